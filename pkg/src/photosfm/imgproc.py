"""Images, bilinear sampling, view synthesis, and file I/O.

Images are float64 arrays of shape (H, W, C) with values in [0, 1] and
C in {1, 3}; depth maps are strictly positive (H, W) arrays. Sampling
coordinates are (u, v) = (column, row) at pixel centers.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import geom
from .errors import InvalidArgumentError, InvalidDepthError

FLOAT_MAGIC = b"FPL1"


def check_image(img):
    img = np.asarray(img, dtype=float)
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise InvalidArgumentError(f"image must be (H, W, C) with C in {{1, 3}}, got {img.shape}")
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise InvalidArgumentError("image must be at least 2x2")
    return img


def check_depth(depth):
    depth = np.asarray(depth, dtype=float)
    if depth.ndim != 2:
        raise InvalidArgumentError(f"depth must be (H, W), got {depth.shape}")
    if not np.all(np.isfinite(depth)) or np.any(depth <= 0):
        raise InvalidDepthError("depth must be finite and strictly positive")
    return depth


def _cells(shape, u, v):
    """Shared bilinear cell bookkeeping.

    Returns integer corner indices, fractional offsets, and the in-bounds
    mask. The corner column is clamped to [0, W-2] (row likewise) so a
    sample exactly on the far border uses the last cell with fraction 1;
    in_bounds is true iff (u, v) lies inside [0, W-1] x [0, H-1].
    """
    h, w = shape
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    # border slack absorbs round-trip noise so an identity warp keeps the
    # outermost pixels valid
    eps = 1e-9
    in_bounds = (u >= -eps) & (u <= w - 1 + eps) & (v >= -eps) & (v <= h - 1 + eps)
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(uc), w - 2).astype(np.intp)
    y0 = np.minimum(np.floor(vc), h - 2).astype(np.intp)
    a = uc - x0
    b = vc - y0
    return x0, y0, a, b, in_bounds


def bilinear_sample(img, u, v):
    """Sample a (H, W) or (H, W, C) array at continuous (u, v).

    Returns (values, in_bounds). Out-of-bounds samples are flagged false
    and their value is taken from the clamped cell; callers mask them.
    """
    img = np.asarray(img, dtype=float)
    x0, y0, a, b, inb = _cells(img.shape[:2], u, v)
    if img.ndim == 3:
        a = a[..., None]
        b = b[..., None]
    i00 = img[y0, x0]
    i10 = img[y0, x0 + 1]
    i01 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    vals = ((1 - a) * (1 - b) * i00 + a * (1 - b) * i10
            + (1 - a) * b * i01 + a * b * i11)
    return vals, inb


def bilinear_position_gradient(img, u, v):
    """Analytic d(sample)/du and d(sample)/dv of the bilinear interpolant.

    Piecewise constant in u (resp. v) within each cell; this is the exact
    derivative of bilinear_sample, not a sampled difference image.
    """
    img = np.asarray(img, dtype=float)
    x0, y0, a, b, _ = _cells(img.shape[:2], u, v)
    if img.ndim == 3:
        a = a[..., None]
        b = b[..., None]
    i00 = img[y0, x0]
    i10 = img[y0, x0 + 1]
    i01 = img[y0 + 1, x0]
    i11 = img[y0 + 1, x0 + 1]
    du = (1 - b) * (i10 - i00) + b * (i11 - i01)
    dv = (1 - a) * (i01 - i00) + a * (i11 - i10)
    return du, dv


def bilinear_scatter(shape, u, v, weights):
    """Adjoint of bilinear_sample w.r.t. the sampled array.

    Accumulates `weights` (same shape as u) through the four corner
    weights into a zero array of `shape`; uses the same clamped cells as
    bilinear_sample so gather/scatter are exact transposes.
    """
    x0, y0, a, b, _ = _cells(shape, u, v)
    out = np.zeros(shape, dtype=float)
    w = np.asarray(weights, dtype=float)
    np.add.at(out, (y0, x0), (1 - a) * (1 - b) * w)
    np.add.at(out, (y0, x0 + 1), a * (1 - b) * w)
    np.add.at(out, (y0 + 1, x0), (1 - a) * b * w)
    np.add.at(out, (y0 + 1, x0 + 1), a * b * w)
    return out


@dataclass
class WarpResult:
    """View synthesis output plus the intermediates gradients need.

    warped_depth is the source depth map resampled into the target frame
    (None when no source depth was supplied); z is the z component of the
    target points transformed into the source frame. Both are needed by
    the geometric-consistency term, which compares them, so they are kept
    separate. coords holds the continuous source-frame sample positions
    (H, W, 2) and q the transformed camera-frame points (H, W, 3).
    """

    image: np.ndarray
    valid: np.ndarray
    z: np.ndarray
    coords: np.ndarray
    q: np.ndarray
    warped_depth: np.ndarray | None = None

    @property
    def valid_fraction(self):
        return float(np.mean(self.valid))


def synthesize_view(image_src, depth_tgt, pose_ts, intr, depth_src=None):
    """Reconstruct the target view from a source image.

    Each target pixel is back-projected with depth_tgt, moved by pose_ts
    (target-frame points into the source frame), projected, and sampled
    from image_src. Pixels whose transformed depth is <= Z_EPS or whose
    sample leaves the source image are masked invalid, not clamped.
    """
    image_src = check_image(image_src)
    depth_tgt = check_depth(depth_tgt)
    if depth_tgt.shape != intr.shape:
        raise InvalidArgumentError("depth_tgt shape does not match intrinsics")
    dirs = geom.pixel_directions(intr)
    p = dirs * depth_tgt[..., None]
    q = p @ pose_ts.rotation.T + pose_ts.translation
    z = q[..., 2]
    front = z > geom.Z_EPS
    zsafe = np.where(front, z, 1.0)
    u = intr.fx * q[..., 0] / zsafe + intr.cx
    v = intr.fy * q[..., 1] / zsafe + intr.cy
    vals, inb = bilinear_sample(image_src, u, v)
    valid = front & inb
    vals = np.where(valid[..., None], vals, 0.0)
    wd = None
    if depth_src is not None:
        depth_src = check_depth(depth_src)
        wd, _ = bilinear_sample(depth_src, u, v)
        wd = np.where(valid, wd, 0.0)
    return WarpResult(image=vals, valid=valid, z=z,
                      coords=np.stack([u, v], axis=-1), q=q, warped_depth=wd)


def du_dq(q, intr):
    """Jacobian of the projection (u, v) w.r.t. the camera point, (H, W, 2, 3)."""
    z = q[..., 2]
    zsafe = np.where(np.abs(z) > geom.Z_EPS, z, 1.0)
    out = np.zeros(q.shape[:-1] + (2, 3))
    out[..., 0, 0] = intr.fx / zsafe
    out[..., 0, 2] = -intr.fx * q[..., 0] / zsafe ** 2
    out[..., 1, 1] = intr.fy / zsafe
    out[..., 1, 2] = -intr.fy * q[..., 1] / zsafe ** 2
    return out


def vq_to_xi(q, vq):
    """Map per-pixel cotangents on transformed points to a pose cotangent.

    For a left perturbation exp(eps) applied to the warp pose, a point
    moves as q + eps_rho + eps_phi x q, so the pullback of a per-pixel
    row vector vq is [vq; q x vq]; the 6-vector is summed over pixels by
    the caller. Ordering matches the [rho; phi] tangent convention.
    """
    return np.concatenate([vq, np.cross(q, vq)], axis=-1)


def warp_intensity_jacobian(image_src, depth_tgt, pose_ts, intr):
    """Per-pixel d(warped intensity)/d(xi), chained through the projection.

    Returns (J, valid) with J of shape (H, W, C, 6) for a left
    perturbation exp(xi) of pose_ts. Invalid pixels carry zero rows.
    """
    wr = synthesize_view(image_src, depth_tgt, pose_ts, intr)
    gu, gv = bilinear_position_gradient(image_src, wr.coords[..., 0], wr.coords[..., 1])
    duq = du_dq(wr.q, intr)
    if gu.ndim == 2:
        gu = gu[..., None]
        gv = gv[..., None]
    # vq[c] = gu_c * du/dq + gv_c * dv/dq, then lift to the 6-dof tangent
    vq = gu[..., None] * duq[..., None, 0, :] + gv[..., None] * duq[..., None, 1, :]
    jac = vq_to_xi(wr.q[..., None, :], vq)
    jac = np.where(wr.valid[..., None, None], jac, 0.0)
    return jac, wr.valid


def image_gradient(img):
    """Forward-difference gradients (gx, gy), zero on the last column/row."""
    img = np.asarray(img, dtype=float)
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise InvalidArgumentError("image must be at least 2x2")
    gx = np.zeros_like(img)
    gy = np.zeros_like(img)
    gx[:, :-1] = img[:, 1:] - img[:, :-1]
    gy[:-1, :] = img[1:, :] - img[:-1, :]
    return gx, gy


# ---------------------------------------------------------------------------
# file formats


def write_pnm(path, img):
    """Binary PGM (C=1) or PPM (C=3), maxval 255, from a [0, 1] image."""
    img = check_image(img)
    if np.any(img < 0) or np.any(img > 1):
        raise InvalidArgumentError("image values must lie in [0, 1]")
    h, w, c = img.shape
    data = np.round(img * 255.0).astype(np.uint8)
    magic = b"P5" if c == 1 else b"P6"
    body = data[..., 0] if c == 1 else data
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h))
        fh.write(body.tobytes())


def _read_pnm_token(fh):
    tok = b""
    while True:
        ch = fh.read(1)
        if not ch:
            raise InvalidArgumentError("truncated PNM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = fh.read(1)
            continue
        if ch.isspace():
            if tok:
                return tok
            continue
        tok += ch


def read_pnm(path):
    """Read a binary PGM/PPM into a float (H, W, C) image in [0, 1]."""
    with open(path, "rb") as fh:
        magic = _read_pnm_token(fh)
        if magic not in (b"P5", b"P6"):
            raise InvalidArgumentError(f"unsupported PNM magic {magic!r}")
        w = int(_read_pnm_token(fh))
        h = int(_read_pnm_token(fh))
        maxval = int(_read_pnm_token(fh))
        if maxval != 255:
            raise InvalidArgumentError("only maxval 255 PNM files are supported")
        c = 1 if magic == b"P5" else 3
        raw = fh.read(w * h * c)
        if len(raw) != w * h * c:
            raise InvalidArgumentError("truncated PNM payload")
    data = np.frombuffer(raw, dtype=np.uint8).reshape(h, w, c)
    return data.astype(float) / 255.0


def write_float_planar(path, arr):
    """Raw little-endian float32 planes with a 16-byte header.

    Header: magic 'FPL1', then width, height, channels as uint32. A (H, W)
    array is stored as one plane.
    """
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.ndim != 3:
        raise InvalidArgumentError("float planar arrays must be (H, W) or (H, W, C)")
    h, w, c = arr.shape
    planes = np.ascontiguousarray(np.moveaxis(arr, 2, 0))
    with open(path, "wb") as fh:
        fh.write(FLOAT_MAGIC)
        fh.write(struct.pack("<III", w, h, c))
        fh.write(planes.astype("<f4").tobytes())


def read_float_planar(path):
    """Read the float planar format; returns (H, W) for one channel else (H, W, C)."""
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != FLOAT_MAGIC:
            raise InvalidArgumentError(f"bad float planar header in {os.fspath(path)!r}")
        w, h, c = struct.unpack("<III", head[4:])
        raw = fh.read(4 * w * h * c)
        if len(raw) != 4 * w * h * c:
            raise InvalidArgumentError("truncated float planar payload")
    planes = np.frombuffer(raw, dtype="<f4").reshape(c, h, w)
    arr = np.moveaxis(planes, 0, 2).astype(float)
    return arr[..., 0] if c == 1 else arr
