"""SE(3) pose arithmetic, pinhole projection, and trajectory containers.

Conventions used across the package:
  * tangent vectors are 6-vectors ordered [rho; phi], translation first,
    rotation (radians) second
  * a Pose acts on points as x_out = R @ x_in + t
  * pixel coordinates are (u, v) = (column, row), origin at the top-left
    pixel center
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BehindCameraError,
    IllConditionedError,
    InvalidArgumentError,
    InvalidDepthError,
)

ORTHO_TOL = 1e-9
SMALL_ANGLE = 1e-8
Z_EPS = 1e-6


def skew(v):
    v = np.asarray(v, dtype=float)
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


class Pose:
    """Rigid transform with a validated rotation.

    Construction checks orthonormality and det(R) = +1 to ORTHO_TOL; the
    stored arrays are frozen so a Pose can be shared without copies.
    """

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation):
        rotation = np.array(rotation, dtype=float)
        translation = np.array(translation, dtype=float).reshape(-1)
        if rotation.shape != (3, 3):
            raise InvalidArgumentError(f"rotation must be 3x3, got {rotation.shape}")
        if translation.shape != (3,):
            raise InvalidArgumentError(
                f"translation must have 3 entries, got {translation.shape}"
            )
        if not np.all(np.isfinite(rotation)) or not np.all(np.isfinite(translation)):
            raise InvalidArgumentError("pose entries must be finite")
        err = np.abs(rotation @ rotation.T - np.eye(3)).max()
        if err > ORTHO_TOL:
            raise InvalidArgumentError(f"rotation not orthonormal (|R R^T - I| = {err:.3e})")
        det = np.linalg.det(rotation)
        if abs(det - 1.0) > ORTHO_TOL:
            raise InvalidArgumentError(f"rotation determinant {det!r} != +1")
        rotation.flags.writeable = False
        translation.flags.writeable = False
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    def __setattr__(self, name, value):
        raise AttributeError("Pose is immutable")

    def matrix(self):
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __repr__(self):
        return f"Pose(t={self.translation.tolist()})"


def identity() -> Pose:
    return Pose(np.eye(3), np.zeros(3))


def compose(a: Pose, b: Pose) -> Pose:
    """a then-applied-after b: (a*b)(x) = a(b(x))."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(a: Pose) -> Pose:
    rt = a.rotation.T
    return Pose(rt, -rt @ a.translation)


def transform_points(pose: Pose, points):
    """Apply pose to an (..., 3) array of points."""
    points = np.asarray(points, dtype=float)
    if points.shape[-1] != 3:
        raise InvalidArgumentError("points must have a trailing dimension of 3")
    return points @ pose.rotation.T + pose.translation


def exp_map(xi) -> Pose:
    """Exponential map from a [rho; phi] tangent vector.

    Rodrigues for the rotation block plus the closed-form left Jacobian V
    for the translation; both fall back to 2-term Taylor series below
    SMALL_ANGLE so the map is continuous across the branch.
    """
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if xi.shape != (6,):
        raise InvalidArgumentError(f"tangent must have 6 entries, got {xi.shape}")
    if not np.all(np.isfinite(xi)):
        raise InvalidArgumentError("tangent entries must be finite")
    rho, phi = xi[:3], xi[3:]
    theta = np.linalg.norm(phi)
    w = skew(phi)
    w2 = w @ w
    if theta < SMALL_ANGLE:
        # sin(t)/t ~ 1 - t^2/6, (1-cos t)/t^2 ~ 1/2 - t^2/24,
        # (t - sin t)/t^3 ~ 1/6 - t^2/120
        t2 = theta * theta
        a = 1.0 - t2 / 6.0
        b = 0.5 - t2 / 24.0
        c = 1.0 / 6.0 - t2 / 120.0
    else:
        a = np.sin(theta) / theta
        # half-angle form: (1 - cos t)/t^2 cancels catastrophically near the
        # branch cut, 2 sin^2(t/2)/t^2 does not
        half = 0.5 * theta
        b = 0.5 * (np.sin(half) / half) ** 2
        c = (theta - np.sin(theta)) / (theta ** 3)
    rot = np.eye(3) + a * w + b * w2
    vmat = np.eye(3) + b * w + c * w2
    return Pose(rot, vmat @ rho)


def log_map(pose: Pose):
    """Inverse of exp_map; raises IllConditionedError within 1e-6 of pi."""
    rot = pose.rotation
    cos_theta = np.clip((np.trace(rot) - 1.0) * 0.5, -1.0, 1.0)
    theta = np.arccos(cos_theta)
    if theta > np.pi - 1e-6:
        raise IllConditionedError(f"rotation angle {theta!r} too close to pi for log")
    vee = 0.5 * np.array([
        rot[2, 1] - rot[1, 2],
        rot[0, 2] - rot[2, 0],
        rot[1, 0] - rot[0, 1],
    ])
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        phi = vee * (1.0 + t2 / 6.0)
        coef = 1.0 / 12.0 + t2 / 720.0
    else:
        phi = vee * theta / np.sin(theta)
        coef = (1.0 / (theta * theta)
                - (1.0 + np.cos(theta)) / (2.0 * theta * np.sin(theta)))
    w = skew(phi)
    vinv = np.eye(3) - 0.5 * w + coef * (w @ w)
    return np.concatenate([vinv @ pose.translation, phi])


def rotation_y(angle: float):
    """Rotation about the camera y axis (yaw, y points down)."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_angle(rot) -> float:
    """Geodesic angle of a rotation matrix in radians."""
    return float(np.arccos(np.clip((np.trace(np.asarray(rot)) - 1.0) * 0.5, -1.0, 1.0)))


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgumentError("focal lengths must be positive")
        if self.width < 2 or self.height < 2:
            raise InvalidArgumentError("image size must be at least 2x2")

    @property
    def shape(self):
        return (self.height, self.width)


def project(points, intr: Intrinsics):
    """Pinhole projection of (..., 3) camera-frame points to (u, v)."""
    points = np.asarray(points, dtype=float)
    if points.shape[-1] != 3:
        raise InvalidArgumentError("points must have a trailing dimension of 3")
    z = points[..., 2]
    if np.any(z <= Z_EPS):
        raise BehindCameraError("point with z <= Z_EPS cannot be projected")
    u = intr.fx * points[..., 0] / z + intr.cx
    v = intr.fy * points[..., 1] / z + intr.cy
    return np.stack([u, v], axis=-1)


def backproject(uv, depth, intr: Intrinsics):
    """Lift (u, v) pixels with z-depth to camera-frame points."""
    uv = np.asarray(uv, dtype=float)
    depth = np.asarray(depth, dtype=float)
    if uv.shape[-1] != 2:
        raise InvalidArgumentError("uv must have a trailing dimension of 2")
    if np.any(depth <= 0):
        raise InvalidDepthError("depth must be strictly positive")
    x = (uv[..., 0] - intr.cx) / intr.fx * depth
    y = (uv[..., 1] - intr.cy) / intr.fy * depth
    return np.stack([x, y, np.broadcast_to(depth, x.shape).copy()], axis=-1)


def pixel_grid(intr: Intrinsics):
    """Integer pixel center coordinates as float (u, v) arrays of shape HxW."""
    u, v = np.meshgrid(
        np.arange(intr.width, dtype=float),
        np.arange(intr.height, dtype=float),
    )
    return u, v


def pixel_directions(intr: Intrinsics):
    """Unit-depth ray directions ((u-cx)/fx, (v-cy)/fy, 1) per pixel, (H, W, 3)."""
    u, v = pixel_grid(intr)
    return np.stack([
        (u - intr.cx) / intr.fx,
        (v - intr.cy) / intr.fy,
        np.ones_like(u),
    ], axis=-1)


class Trajectory:
    """Ordered absolute camera-to-world poses with timestamps."""

    def __init__(self, poses, timestamps=None):
        poses = list(poses)
        if not poses:
            raise InvalidArgumentError("trajectory needs at least one pose")
        if timestamps is None:
            timestamps = np.arange(len(poses), dtype=float)
        else:
            timestamps = np.asarray(timestamps, dtype=float)
            if timestamps.shape != (len(poses),):
                raise InvalidArgumentError("one timestamp per pose required")
            if np.any(np.diff(timestamps) <= 0):
                raise InvalidArgumentError("timestamps must be strictly increasing")
        self.poses = poses
        self.timestamps = timestamps

    def __len__(self):
        return len(self.poses)

    def relative(self, i: int, j: int) -> Pose:
        """Pose mapping frame-j camera coordinates into frame i."""
        return compose(inverse(self.poses[i]), self.poses[j])

    def path_lengths(self):
        """Cumulative ground-path length at every frame (starts at 0)."""
        t = np.array([p.translation for p in self.poses])
        steps = np.linalg.norm(np.diff(t, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])


def trajectory_to_text(traj: Trajectory) -> str:
    """12 numbers per line, row-major 3x4 [R|t], matching odometry pose files."""
    lines = []
    for p in traj.poses:
        m = np.hstack([p.rotation, p.translation[:, None]])
        lines.append(" ".join(format(x, ".12e") for x in m.reshape(-1)))
    return "\n".join(lines) + "\n"


def trajectory_from_text(text: str) -> Trajectory:
    poses = []
    for ln, line in enumerate(text.splitlines()):
        line = line.strip()
        if not line:
            continue
        vals = [float(x) for x in line.split()]
        if len(vals) != 12:
            raise InvalidArgumentError(f"pose line {ln} has {len(vals)} values, want 12")
        m = np.array(vals).reshape(3, 4)
        poses.append(Pose(m[:, :3], m[:, 3]))
    if not poses:
        raise InvalidArgumentError("pose file contains no poses")
    return Trajectory(poses)


def load_trajectory(path) -> Trajectory:
    with open(path, "r", encoding="ascii") as fh:
        return trajectory_from_text(fh.read())
