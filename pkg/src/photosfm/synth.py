"""Analytic scene renderer used as the ground-truth oracle.

Scenes are textured planes and axis-aligned boxes. Textures are sums of
random-phase 3D sinusoids evaluated at the hit point, band-limited so that
bilinear resampling of a rendered image stays accurate and photometric
gradients are meaningful. Rays are cast per pixel with unit z-slope, so the
ray parameter equals the camera-frame z depth.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import geom
from .errors import InvalidArgumentError

HIT_EPS = 1e-6

# relative wavelengths and amplitude split of the texture octaves; the mix
# is weighted toward long wavelengths to keep interpolation error low
OCTAVE_WAVELENGTHS = (1.0, 0.55, 0.3, 0.18)
OCTAVE_AMPLITUDES = (0.55, 0.25, 0.13, 0.07)

# wave components along world z are damped: surfaces seen at grazing angles
# compress that direction quadratically with depth, which would alias under
# bilinear resampling
Z_DAMP = 0.12


@dataclass(frozen=True)
class Texture:
    directions: np.ndarray  # (C, K, 3) unit wave vectors
    wavelengths: np.ndarray  # (K,)
    phases: np.ndarray  # (C, K)
    amplitudes: np.ndarray  # (K,)

    def eval(self, points):
        pts = np.asarray(points, dtype=float)
        c, k, _ = self.directions.shape
        out = np.full(pts.shape[:-1] + (c,), 0.5)
        for ci in range(c):
            proj = pts @ self.directions[ci].T  # (..., K)
            ang = 2.0 * np.pi * proj / self.wavelengths + self.phases[ci]
            out[..., ci] += np.sin(ang) @ self.amplitudes
        return np.clip(out, 0.0, 1.0)


def _wave_directions(rng, channels, k, plane_normal=None):
    out = np.empty((channels, k, 3))
    n = None
    if plane_normal is not None:
        n = np.asarray(plane_normal, dtype=float)
        n = n / np.linalg.norm(n)
    for ci in range(channels):
        for ki in range(k):
            while True:
                d = rng.normal(size=3)
                if n is not None:
                    d -= (d @ n) * n  # waves live in the surface
                d[2] *= Z_DAMP
                norm = np.linalg.norm(d)
                if norm > 0.3:  # reject draws that collapse under the damping
                    out[ci, ki] = d / norm
                    break
    return out


def make_texture(seed, base_wavelength, amplitude, channels, plane_normal=None):
    if amplitude <= 0 or amplitude > 0.45:
        raise InvalidArgumentError("texture amplitude must lie in (0, 0.45]")
    rng = np.random.default_rng(seed)
    k = len(OCTAVE_WAVELENGTHS)
    return Texture(
        directions=_wave_directions(rng, channels, k, plane_normal),
        wavelengths=base_wavelength * np.array(OCTAVE_WAVELENGTHS),
        phases=rng.uniform(0, 2 * np.pi, size=(channels, k)),
        amplitudes=amplitude * np.array(OCTAVE_AMPLITUDES),
    )


@dataclass(frozen=True)
class Primitive:
    kind: str  # "plane" | "box"
    params: tuple  # plane: (px py pz nx ny nz); box: (lox loy loz hix hiy hiz)
    wavelength: float
    amplitude: float


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    camera_height: float = 1.5
    channels: int = 1
    texture_seed: int = 7
    sky_value: float = 0.55
    sky_depth: float = 50.0

    def __post_init__(self):
        if self.channels not in (1, 3):
            raise InvalidArgumentError("channels must be 1 or 3")
        if self.camera_height <= 0 or self.sky_depth <= 0:
            raise InvalidArgumentError("camera_height and sky_depth must be positive")
        if not (0.0 <= self.sky_value <= 1.0):
            raise InvalidArgumentError("sky_value must lie in [0, 1]")
        if not self.primitives:
            raise InvalidArgumentError("scene needs at least one primitive")


@dataclass
class RenderedFrame:
    """One rendered view; pose maps world points into the camera frame."""

    image: np.ndarray
    depth: np.ndarray
    pose: geom.Pose
    hit: np.ndarray
    prim: np.ndarray  # per-pixel primitive index, -1 for sky


def default_scene(channels=1, texture_seed=7) -> SceneSpec:
    """Closed scene: ground plane, backdrop, two side walls, three boxes.

    The camera convention is y down, so the ground lies at y = +height.
    Every forward ray hits a surface, which keeps ground-truth depth dense.
    """
    prims = (
        # wavelength scales with how deep each surface sits so resampled
        # views stay within a fraction of an intensity level of exact
        Primitive("plane", (0.0, 1.5, 0.0, 0.0, -1.0, 0.0), 10.0, 0.42),
        Primitive("plane", (0.0, 0.0, 18.0, 0.0, 0.0, -1.0), 24.0, 0.42),
        Primitive("plane", (-7.0, 0.0, 0.0, 1.0, 0.0, 0.0), 20.0, 0.40),
        Primitive("plane", (7.0, 0.0, 0.0, -1.0, 0.0, 0.0), 20.0, 0.40),
        Primitive("box", (-2.5, 0.3, 4.0, -1.3, 1.5, 5.2), 4.0, 0.40),
        Primitive("box", (1.0, 0.7, 6.0, 2.2, 1.5, 7.0), 5.5, 0.40),
        Primitive("box", (-0.6, 0.9, 8.5, 0.8, 1.5, 9.8), 7.0, 0.40),
    )
    return SceneSpec(primitives=prims, channels=channels, texture_seed=texture_seed)


def default_intrinsics() -> geom.Intrinsics:
    return geom.Intrinsics(fx=80.0, fy=80.0, cx=48.0, cy=32.0, width=96, height=64)


def _plane_hits(params, origin, dw):
    p0 = np.array(params[:3])
    n = np.array(params[3:6])
    norm = np.linalg.norm(n)
    if norm == 0:
        raise InvalidArgumentError("plane normal must be nonzero")
    n = n / norm
    denom = dw @ n
    num = (p0 - origin) @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = num / denom
    bad = (np.abs(denom) < 1e-12) | ~np.isfinite(t) | (t <= HIT_EPS)
    return np.where(bad, np.inf, t)


def _box_hits(params, origin, dw):
    lo = np.array(params[:3])
    hi = np.array(params[3:6])
    if np.any(hi <= lo):
        raise InvalidArgumentError("box hi must exceed lo on every axis")
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo - origin) / dw
        t2 = (hi - origin) / dw
    t1 = np.nan_to_num(t1, nan=-np.inf, posinf=np.inf, neginf=-np.inf)
    t2 = np.nan_to_num(t2, nan=np.inf, posinf=np.inf, neginf=-np.inf)
    near = np.max(np.minimum(t1, t2), axis=-1)
    far = np.min(np.maximum(t1, t2), axis=-1)
    hit = (near <= far) & (near > HIT_EPS)
    return np.where(hit, near, np.inf)


def render(spec: SceneSpec, cam_to_world: geom.Pose, intr: geom.Intrinsics) -> RenderedFrame:
    """Ray-cast one view. cam_to_world places the camera in the world."""
    textures = [
        make_texture(
            spec.texture_seed + 1000 * i,
            p.wavelength,
            p.amplitude,
            spec.channels,
            plane_normal=p.params[3:6] if p.kind == "plane" else None,
        )
        for i, p in enumerate(spec.primitives)
    ]
    dirs = geom.pixel_directions(intr)
    dw = dirs @ cam_to_world.rotation.T
    origin = cam_to_world.translation
    ts = np.full(intr.shape + (len(spec.primitives),), np.inf)
    for i, prim in enumerate(spec.primitives):
        if prim.kind == "plane":
            ts[..., i] = _plane_hits(prim.params, origin, dw)
        elif prim.kind == "box":
            ts[..., i] = _box_hits(prim.params, origin, dw)
        else:
            raise InvalidArgumentError(f"unknown primitive kind {prim.kind!r}")
    idx = np.argmin(ts, axis=-1)
    tmin = np.min(ts, axis=-1)
    hit = np.isfinite(tmin)
    depth = np.where(hit, tmin, spec.sky_depth)
    image = np.full(intr.shape + (spec.channels,), spec.sky_value)
    points = origin + np.where(hit, tmin, 0.0)[..., None] * dw
    for i in range(len(spec.primitives)):
        mask = hit & (idx == i)
        if mask.any():
            image[mask] = textures[i].eval(points[mask])
    prim = np.where(hit, idx, -1)
    return RenderedFrame(
        image=image, depth=depth, pose=geom.inverse(cam_to_world), hit=hit, prim=prim
    )


def same_surface_mask(prim_src, prim_tgt, coords):
    """True where the warped sample footprint lies entirely on the target
    pixel's own surface. Rules out blends across occlusions and creases."""
    h, w = prim_src.shape
    x0 = np.clip(np.floor(coords[..., 0]).astype(np.intp), 0, w - 2)
    y0 = np.clip(np.floor(coords[..., 1]).astype(np.intp), 0, h - 2)
    same = np.ones(prim_tgt.shape, dtype=bool)
    for dy in (0, 1):
        for dx in (0, 1):
            same &= prim_src[y0 + dy, x0 + dx] == prim_tgt
    return same


def make_sequence(spec, trajectory, intr, stride=1):
    """Render every stride-th pose of a camera-to-world trajectory."""
    if stride < 1:
        raise InvalidArgumentError("stride must be >= 1")
    return [render(spec, trajectory.poses[k], intr)
            for k in range(0, len(trajectory), stride)]


def relative_pose(frame_s: RenderedFrame, frame_t: RenderedFrame) -> geom.Pose:
    """Ground-truth pose mapping target-frame points into the source frame."""
    return geom.compose(frame_s.pose, geom.inverse(frame_t.pose))


def make_forward_trajectory(n, step=0.15, yaw_amp=0.0, lateral_amp=0.0, cycles=1.5):
    """Deterministic forward path with optional smooth yaw and sway."""
    if n < 1:
        raise InvalidArgumentError("trajectory needs at least one frame")
    poses = []
    for k in range(n):
        s = np.sin(2.0 * np.pi * cycles * k / max(n - 1, 1))
        rot = geom.rotation_y(yaw_amp * s)
        t = np.array([lateral_amp * s, 0.0, step * k])
        poses.append(geom.Pose(rot, t))
    return geom.Trajectory(poses)


def add_noise(frame: RenderedFrame, sigma, seed) -> RenderedFrame:
    """Gaussian intensity noise, clipped back to [0, 1]; depth untouched."""
    if sigma < 0:
        raise InvalidArgumentError("sigma must be >= 0")
    if sigma == 0:
        return frame
    rng = np.random.default_rng(seed)
    noisy = np.clip(frame.image + rng.normal(0.0, sigma, size=frame.image.shape), 0.0, 1.0)
    return RenderedFrame(
        image=noisy, depth=frame.depth, pose=frame.pose, hit=frame.hit, prim=frame.prim
    )


def make_smooth_field(shape, amplitude, seed, cells=(4, 6)):
    """Low-frequency multiplicative field in [1 - amplitude, 1 + amplitude].

    A coarse uniform grid is bilinearly upsampled to the pixel grid, so the
    field varies over scene-sized regions rather than per pixel. Used to
    corrupt depth maps for optimization experiments.
    """
    if not 0 <= amplitude < 1:
        raise InvalidArgumentError("amplitude must lie in [0, 1)")
    if min(cells) < 2:
        raise InvalidArgumentError("need at least a 2x2 coarse grid")
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(-1.0, 1.0, size=cells)
    h, w = shape
    ui = np.linspace(0.0, cells[1] - 1.0, w)
    vi = np.linspace(0.0, cells[0] - 1.0, h)
    rows = np.stack([np.interp(ui, np.arange(cells[1]), coarse[r])
                     for r in range(cells[0])])
    field = np.stack([np.interp(vi, np.arange(cells[0]), rows[:, c])
                      for c in range(w)], axis=1)
    return 1.0 + amplitude * field


# ---------------------------------------------------------------------------
# scene spec files: plain text, one key or primitive per line


def scene_to_text(spec: SceneSpec) -> str:
    lines = [
        f"camera_height {spec.camera_height!r}",
        f"channels {spec.channels}",
        f"texture_seed {spec.texture_seed}",
        f"sky_value {spec.sky_value!r}",
        f"sky_depth {spec.sky_depth!r}",
    ]
    for p in spec.primitives:
        nums = " ".join(repr(float(x)) for x in p.params)
        lines.append(f"{p.kind} {nums} {p.wavelength!r} {p.amplitude!r}")
    return "\n".join(lines) + "\n"


def scene_from_text(text: str) -> SceneSpec:
    fields = {}
    prims = []
    for ln, line in enumerate(text.splitlines()):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, *rest = line.split()
        if key in ("plane", "box"):
            if len(rest) != 8:
                raise InvalidArgumentError(
                    f"line {ln}: {key} needs 6 geometry numbers + wavelength + amplitude")
            vals = [float(x) for x in rest]
            prims.append(Primitive(key, tuple(vals[:6]), vals[6], vals[7]))
        elif key in ("camera_height", "sky_value", "sky_depth"):
            fields[key] = float(rest[0])
        elif key in ("channels", "texture_seed"):
            fields[key] = int(rest[0])
        else:
            raise InvalidArgumentError(f"line {ln}: unknown scene key {key!r}")
    return SceneSpec(primitives=tuple(prims), **fields)


def load_scene(path) -> SceneSpec:
    with open(path, "r", encoding="ascii") as fh:
        return scene_from_text(fh.read())
