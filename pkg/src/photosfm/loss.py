"""Self-supervised objective: photometric dissimilarity, edge-aware
smoothness, geometric consistency, a depth prior, per-pixel masking, and
analytic gradients of the whole stack with respect to depth and pose.

The scalar objective is exactly what loss_gradients differentiates: both run
through one evaluation core. Gradients are true almost-everywhere gradients;
binary masks (automask, min-reprojection selection, validity) are piecewise
constant so they contribute zero, while the continuous consistency weight
(1 - gc_ratio) and the weighted-mean denominator are differentiated through.
"""

from dataclasses import dataclass

import numpy as np

from . import geom, imgproc
from .errors import (
    EmptySupportError,
    InvalidArgumentError,
    InvalidDepthError,
    NonFiniteGradientError,
)

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.85
    lambda_photo: float = 1.0
    lambda_smooth: float = 0.05
    lambda_gc: float = 0.15
    lambda_prior: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InvalidArgumentError("alpha must lie in [0, 1]")
        for name in ("lambda_photo", "lambda_smooth", "lambda_gc", "lambda_prior"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be nonnegative")


@dataclass(frozen=True)
class MaskConfig:
    use_automask: bool = True
    use_min_reprojection: bool = True
    use_self_discovered: bool = True


@dataclass
class LossReport:
    total: float
    photo: float
    smooth: float
    gc: float
    prior: float
    residual_map: np.ndarray
    mask: np.ndarray

    def to_record(self):
        return {
            "total": self.total,
            "photo": self.photo,
            "smooth": self.smooth,
            "gc": self.gc,
            "prior": self.prior,
            "mask_mean": float(self.mask.mean()),
        }


@dataclass
class Sample:
    """One target frame with its source frames and relative poses.

    poses_ts[i] maps target-frame points into source i's frame. depths_src
    enables the geometric-consistency term and the inverse direction.
    depth_max normalizes the prior term; defaults to depth_init's max so the
    normalization stays fixed while depth_tgt is being optimized.
    """

    images_src: list
    image_tgt: np.ndarray
    depth_tgt: np.ndarray
    poses_ts: list
    intr: geom.Intrinsics
    depths_src: list | None = None
    depth_init: np.ndarray | None = None
    depth_max: float | None = None

    def __post_init__(self):
        if len(self.images_src) == 0:
            raise InvalidArgumentError("sample needs at least one source image")
        if len(self.poses_ts) != len(self.images_src):
            raise InvalidArgumentError("one pose per source image required")
        if self.depths_src is not None and len(self.depths_src) != len(self.images_src):
            raise InvalidArgumentError("one source depth per source image required")

    def prior_depth_max(self):
        if self.depth_max is not None:
            return float(self.depth_max)
        return float(np.max(self.depth_init))


# ---------------------------------------------------------------------------
# SSIM with a closed-form vector-Jacobian product


def _box3(x):
    """3x3 mean filter with replicated edges; works on (H, W) and (H, W, C)."""
    h, w = x.shape[:2]
    p = np.pad(x, ((1, 1), (1, 1)) + ((0, 0),) * (x.ndim - 2), mode="edge")
    out = np.zeros_like(x, dtype=float)
    for dy in range(3):
        for dx in range(3):
            out += p[dy:dy + h, dx:dx + w]
    return out / 9.0


def _box3_adjoint(g):
    h, w = g.shape[:2]
    pad = np.zeros((h + 2, w + 2) + g.shape[2:], dtype=float)
    for dy in range(3):
        for dx in range(3):
            pad[dy:dy + h, dx:dx + w] += g
    pad /= 9.0
    # fold the replicate-padding border back onto the edge pixels
    pad[1] += pad[0]
    pad[h] += pad[h + 1]
    pad[:, 1] += pad[:, 0]
    pad[:, w] += pad[:, w + 1]
    return pad[1:h + 1, 1:w + 1]


def ssim(x, y):
    """Per-pixel SSIM map over 3x3 windows, same shape as the inputs."""
    mx, my = _box3(x), _box3(y)
    sxx = _box3(x * x) - mx * mx
    syy = _box3(y * y) - my * my
    sxy = _box3(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def _ssim_vjp(x, y, g):
    """Gradient of sum(g * ssim(x, y)) with respect to x."""
    mx, my = _box3(x), _box3(y)
    sxx = _box3(x * x) - mx * mx
    syy = _box3(y * y) - my * my
    sxy = _box3(x * y) - mx * my
    a = 2 * mx * my + SSIM_C1
    b = 2 * sxy + SSIM_C2
    c = mx * mx + my * my + SSIM_C1
    d = sxx + syy + SSIM_C2
    cd = c * d
    ga = g * b / cd
    gb = g * a / cd
    gc = -g * a * b / (c * cd)
    gd = -g * a * b / (cd * d)
    # quotient rule pushed back through the window statistics
    g_mx = 2 * my * ga + 2 * mx * gc - my * (2 * gb) - 2 * mx * gd
    gx = _box3_adjoint(g_mx)
    gx += y * _box3_adjoint(2 * gb)
    gx += 2 * x * _box3_adjoint(gd)
    return gx


# ---------------------------------------------------------------------------
# individual loss terms


def _photometric_map(image_a, image_b, alpha):
    """Mean-over-channel mix of L1 and SSIM dissimilarity, (H, W)."""
    l1 = np.abs(image_a - image_b).mean(axis=-1)
    ds = np.clip((1.0 - ssim(image_a, image_b)) / 2.0, 0.0, 1.0).mean(axis=-1)
    return (1.0 - alpha) * l1 + alpha * ds


def _photometric_map_vjp(image_a, image_b, alpha, g):
    """Gradient of sum(g * map) with respect to image_a."""
    c = image_a.shape[-1]
    out = (1.0 - alpha) / c * np.sign(image_a - image_b) * g[..., None]
    ds = (1.0 - ssim(image_a, image_b)) / 2.0
    gate = (ds > 0.0) & (ds < 1.0)
    gs = np.where(gate, -alpha / (2.0 * c) * g[..., None], 0.0)
    out += _ssim_vjp(image_a, image_b, gs)
    return out


def photometric_loss(recon: imgproc.WarpResult, image_tgt, alpha):
    """Scalar photometric loss over valid pixels plus the per-pixel map.

    Invalid pixels are filled with the target values before the windowed
    statistics so they carry zero residual and leak nothing into their
    neighbors' windows.
    """
    image_tgt = imgproc.check_image(image_tgt)
    if recon.image.shape != image_tgt.shape:
        raise InvalidArgumentError("reconstruction and target dims differ")
    if not recon.valid.any():
        raise EmptySupportError("no valid pixels in reconstruction")
    filled = np.where(recon.valid[..., None], recon.image, image_tgt)
    pmap = _photometric_map(filled, image_tgt, alpha)
    return float(pmap[recon.valid].mean()), pmap


def smoothness_loss(image_tgt, depth_tgt):
    """Edge-aware first-order smoothness of mean-normalized inverse depth."""
    image_tgt = imgproc.check_image(image_tgt)
    depth_tgt = np.asarray(depth_tgt, dtype=float)
    if depth_tgt.shape != image_tgt.shape[:2]:
        raise InvalidArgumentError("depth and image dims differ")
    if not np.all(np.isfinite(depth_tgt)) or np.any(depth_tgt <= 0):
        raise InvalidDepthError("depth must be positive and finite")
    inv = 1.0 / depth_tgt
    dstar = inv / inv.mean()
    gxd, gyd = imgproc.image_gradient(dstar)
    gxi, gyi = imgproc.image_gradient(image_tgt)
    wx = np.exp(-np.abs(gxi).mean(axis=-1))
    wy = np.exp(-np.abs(gyi).mean(axis=-1))
    return float((np.abs(gxd) * wx + np.abs(gyd) * wy).mean())


def _smoothness_grad(image_tgt, depth_tgt):
    inv = 1.0 / depth_tgt
    mu = inv.mean()
    dstar = inv / mu
    gxd, gyd = imgproc.image_gradient(dstar)
    gxi, gyi = imgproc.image_gradient(image_tgt)
    wx = np.exp(-np.abs(gxi).mean(axis=-1))
    wy = np.exp(-np.abs(gyi).mean(axis=-1))
    n = depth_tgt.size
    sx = np.sign(gxd) * wx / n
    sy = np.sign(gyd) * wy / n
    g_dstar = np.zeros_like(dstar)
    g_dstar[:, :-1] -= sx[:, :-1]
    g_dstar[:, 1:] += sx[:, :-1]
    g_dstar[:-1, :] -= sy[:-1, :]
    g_dstar[1:, :] += sy[:-1, :]
    # dstar couples every pixel through the mean normalization
    g_inv = g_dstar / mu - np.sum(g_dstar * inv) / (mu * mu * n)
    return -g_inv / depth_tgt ** 2


def geometric_consistency_loss(depth_tgt, warp: imgproc.WarpResult, pose_ts, intr):
    """Symmetric depth-consistency ratio; scalar mean plus the ratio map."""
    if warp.warped_depth is None:
        raise InvalidArgumentError("warp must carry warped_depth")
    if not warp.valid.any():
        raise EmptySupportError("no valid overlap for geometric consistency")
    denom = np.maximum(warp.z + warp.warped_depth, 1e-12)
    ratio = np.where(warp.valid, np.abs(warp.z - warp.warped_depth) / denom, 0.0)
    return float(ratio[warp.valid].mean()), ratio


def depth_prior_loss(depth_opt, depth_init, depth_max):
    """SSIM distance to the initial depth, both normalized by depth_max."""
    depth_opt = np.asarray(depth_opt, dtype=float)
    depth_init = np.asarray(depth_init, dtype=float)
    if depth_opt.shape != depth_init.shape:
        raise InvalidArgumentError("depth dims differ")
    if depth_max <= 0:
        raise InvalidArgumentError("depth_max must be positive")
    ds = (1.0 - ssim(depth_opt / depth_max, depth_init / depth_max)) / 2.0
    return float(np.clip(ds, 0.0, 1.0).mean())


def _depth_prior_grad(depth_opt, depth_init, depth_max):
    n_opt = depth_opt / depth_max
    n_init = depth_init / depth_max
    ds = (1.0 - ssim(n_opt, n_init)) / 2.0
    gate = (ds > 0.0) & (ds < 1.0)
    g = np.where(gate, -0.5 / depth_opt.size, 0.0)
    return _ssim_vjp(n_opt, n_init, g) / depth_max


def compose_masks(cfg: MaskConfig, forward_losses, identity_losses, gc_ratio=None):
    """Per-pixel weight in [0, 1] from the configured masking techniques.

    Callers pre-mask invalid pixels in forward_losses to +inf so the
    min-reprojection selection never picks them.
    """
    if not forward_losses:
        raise InvalidArgumentError("at least one per-source loss map required")
    stack = np.stack(forward_losses)
    min_re = stack.min(axis=0)
    w = np.ones(min_re.shape)
    if cfg.use_automask and identity_losses:
        min_id = np.stack(identity_losses).min(axis=0)
        # strict comparison: exact ties (zero motion) are removed
        w = np.where(min_re < min_id, w, 0.0)
    if cfg.use_self_discovered and gc_ratio is not None:
        w = w * (1.0 - gc_ratio)
    return w


# ---------------------------------------------------------------------------
# full objective: one evaluation core shared by value and gradient paths


class _Direction:
    """All per-direction intermediates: warps, maps, masks, reductions."""

    def __init__(self, images_src, image_tgt, depth_tgt, poses_ts, depths_src,
                 intr, weights, cfg):
        self.poses_ts = poses_ts
        self.images_src = images_src
        self.image_tgt = image_tgt
        self.warps = []
        self.filled = []
        self.pmaps = []
        self.ratios = []
        idents = []
        for i, img_s in enumerate(images_src):
            d_s = depths_src[i] if depths_src is not None else None
            wr = imgproc.synthesize_view(img_s, depth_tgt, poses_ts[i], intr, depth_src=d_s)
            xs = np.where(wr.valid[..., None], wr.image, image_tgt)
            self.warps.append(wr)
            self.filled.append(xs)
            self.pmaps.append(_photometric_map(xs, image_tgt, weights.alpha))
            idents.append(_photometric_map(img_s, image_tgt, weights.alpha))
            if wr.warped_depth is not None:
                denom = np.maximum(wr.z + wr.warped_depth, 1e-12)
                self.ratios.append(
                    np.where(wr.valid, np.abs(wr.z - wr.warped_depth) / denom, 0.0))
        self.valid_any = np.any([w.valid for w in self.warps], axis=0)
        if not self.valid_any.any():
            raise EmptySupportError("no source overlaps the target")

        masked = [np.where(w.valid, p, np.inf) for w, p in zip(self.warps, self.pmaps)]
        stack = np.stack(masked)
        if cfg.use_min_reprojection:
            self.sel = np.argmin(stack, axis=0)
        else:
            # average over the sources that see each pixel
            counts = np.maximum(np.sum([w.valid for w in self.warps], axis=0), 1)
            self.sel = None
            self.sel_weight = [w.valid / counts for w in self.warps]
        if self.sel is not None:
            self.lsel = np.take_along_axis(stack, self.sel[None], axis=0)[0]
            self.lsel = np.where(self.valid_any, self.lsel, 0.0)
        else:
            self.lsel = sum(np.where(w.valid, p, 0.0) * sw for w, p, sw in
                            zip(self.warps, self.pmaps, self.sel_weight))

        self.gc_map = None
        if self.ratios:
            if self.sel is not None:
                rstack = np.stack(self.ratios)
                self.gc_map = np.take_along_axis(rstack, self.sel[None], axis=0)[0]
                self.gc_map = np.where(self.valid_any, self.gc_map, 0.0)
            else:
                self.gc_map = sum(r * sw for r, sw in zip(self.ratios, self.sel_weight))

        self.mask = compose_masks(cfg, masked, idents if cfg.use_automask else [],
                                  self.gc_map if cfg.use_self_discovered else None)
        self.mask = np.where(self.valid_any, self.mask, 0.0)
        self.mask_sum = float(self.mask.sum())
        if self.mask_sum <= 0:
            raise EmptySupportError("masking removed every pixel")
        self.photo = float((self.mask * self.lsel).sum() / self.mask_sum)

        self.gc = 0.0
        self.gc_counts = []
        if self.ratios:
            per = []
            for wr, r in zip(self.warps, self.ratios):
                nv = int(wr.valid.sum())
                self.gc_counts.append(nv)
                per.append(float(r[wr.valid].sum() / nv) if nv else 0.0)
            self.gc = float(np.mean(per))


def _sample_directions(sample, weights, cfg, bidirectional):
    fwd = _Direction(sample.images_src, sample.image_tgt, sample.depth_tgt,
                     sample.poses_ts, sample.depths_src, sample.intr, weights, cfg)
    revs = []
    if bidirectional:
        if sample.depths_src is None:
            raise InvalidArgumentError("bidirectional evaluation needs source depths")
        for i, img_s in enumerate(sample.images_src):
            revs.append(_Direction(
                [sample.image_tgt], img_s, sample.depths_src[i],
                [geom.inverse(sample.poses_ts[i])], [sample.depth_tgt],
                sample.intr, weights, cfg))
    return fwd, revs


def total_loss(sample: Sample, weights: LossWeights, cfg: MaskConfig,
               bidirectional=False) -> LossReport:
    """Weighted sum of the loss terms, optionally averaged over the forward
    and inverse warp directions. The report's map fields are the forward
    target-side residual and mask; the prior term (when depth_init is set)
    applies once to the optimized target depth, outside direction averaging.
    """
    fwd, revs = _sample_directions(sample, weights, cfg, bidirectional)
    photo = fwd.photo
    gc = fwd.gc
    smooth = smoothness_loss(sample.image_tgt, sample.depth_tgt) \
        if weights.lambda_smooth > 0 else 0.0
    if revs:
        photo = 0.5 * (photo + float(np.mean([r.photo for r in revs])))
        gc = 0.5 * (gc + float(np.mean([r.gc for r in revs])))
        if weights.lambda_smooth > 0:
            rsm = np.mean([smoothness_loss(img, d) for img, d in
                           zip(sample.images_src, sample.depths_src)])
            smooth = 0.5 * (smooth + float(rsm))
    prior = 0.0
    if sample.depth_init is not None and weights.lambda_prior > 0:
        prior = depth_prior_loss(sample.depth_tgt, sample.depth_init,
                                 sample.prior_depth_max())
    total = (weights.lambda_photo * photo + weights.lambda_smooth * smooth
             + weights.lambda_gc * gc + weights.lambda_prior * prior)
    return LossReport(total=float(total), photo=photo, smooth=smooth, gc=gc,
                      prior=prior, residual_map=fwd.lsel, mask=fwd.mask)


def _direction_gradients(d: _Direction, weights, cfg, intr, scale, src_depths,
                         g_depth_tgt, g_poses, reverse_source=None,
                         own_depth=None):
    """Accumulate one direction's gradient contributions.

    Forward direction: the warps were built from the target depth, so the
    point cotangent g_q splits into the pose tangent and a per-pixel depth
    gradient. Reverse direction (reverse_source = source index): the warp
    geometry rides on the fixed source depth (own_depth); the target depth
    enters only through the resampled consistency term, and the pose tangent
    is pulled back through the inverse map.
    """
    n_src = len(d.warps)
    for i in range(n_src):
        wr = d.warps[i]
        if d.sel is not None:
            sel_gate = ((d.sel == i) & d.valid_any).astype(float)
        else:
            sel_gate = d.sel_weight[i]
        g_l = weights.lambda_photo * scale * d.mask * sel_gate / d.mask_sum

        g_r = np.zeros(wr.valid.shape)
        if d.ratios:
            if cfg.use_self_discovered:
                # quotient rule: the (1 - ratio) weight and the mask-sum
                # denominator both move with the ratio
                keep = np.where(d.valid_any, 1.0, 0.0)
                if cfg.use_automask:
                    keep = np.where(d.mask > 0, keep, 0.0)
                g_r += -weights.lambda_photo * scale * keep * sel_gate \
                    * (d.lsel - d.photo) / d.mask_sum
            if d.gc_counts[i]:
                g_r += weights.lambda_gc * scale * wr.valid \
                    / (n_src * d.gc_counts[i])

        # photometric chain back to the warped image then to sample coords
        g_filled = _photometric_map_vjp(d.filled[i], d.image_tgt, weights.alpha, g_l)
        g_recon = np.where(wr.valid[..., None], g_filled, 0.0)
        u, v = wr.coords[..., 0], wr.coords[..., 1]
        gu_img, gv_img = imgproc.bilinear_position_gradient(d.images_src[i], u, v)
        if gu_img.ndim == 2:
            gu_img, gv_img = gu_img[..., None], gv_img[..., None]
        g_u = (g_recon * gu_img).sum(axis=-1)
        g_v = (g_recon * gv_img).sum(axis=-1)

        g_wd = None
        g_z = None
        if d.ratios:
            sgn = np.sign(wr.z - wr.warped_depth)
            denom2 = np.maximum(wr.z + wr.warped_depth, 1e-12) ** 2
            g_z = np.where(wr.valid, g_r * 2.0 * sgn * wr.warped_depth / denom2, 0.0)
            g_wd = np.where(wr.valid, g_r * -2.0 * sgn * wr.z / denom2, 0.0)
            if src_depths[i] is not None:
                gud, gvd = imgproc.bilinear_position_gradient(src_depths[i], u, v)
                g_u = g_u + g_wd * gud
                g_v = g_v + g_wd * gvd

        duq = imgproc.du_dq(wr.q, intr)
        g_q = g_u[..., None] * duq[..., 0, :] + g_v[..., None] * duq[..., 1, :]
        if g_z is not None:
            g_q[..., 2] += g_z
        g_q = np.where(wr.valid[..., None], g_q, 0.0)

        pose = d.poses_ts[i]
        if reverse_source is None:
            g_poses[i] += imgproc.vq_to_xi(wr.q, g_q).sum(axis=(0, 1))
            if g_depth_tgt is not None:
                rd = geom.pixel_directions(intr) @ pose.rotation.T
                g_depth_tgt += (g_q * rd).sum(axis=-1)
        else:
            # pose_ts here is inverse(T_st); pull the perturbation back to T_st
            w_vec = g_q @ pose.rotation
            p_s = geom.pixel_directions(intr) * own_depth[..., None]
            g_poses[reverse_source] += np.concatenate(
                [-w_vec, -np.cross(p_s, w_vec)], axis=-1).sum(axis=(0, 1))
            if g_depth_tgt is not None and g_wd is not None:
                g_depth_tgt += imgproc.bilinear_scatter(
                    g_depth_tgt.shape, u, v, g_wd)


def loss_gradients(sample: Sample, weights: LossWeights, cfg: MaskConfig,
                   wrt="depth", bidirectional=False):
    """Analytic gradient of total_loss.

    wrt="depth": (H, W) gradient for depth_tgt. wrt="pose": (S, 6) array of
    left-perturbation tangent gradients, one row per source pose.
    """
    if wrt not in ("depth", "pose"):
        raise InvalidArgumentError("wrt must be 'depth' or 'pose'")
    fwd, revs = _sample_directions(sample, weights, cfg, bidirectional)
    scale = 0.5 if revs else 1.0
    h, w = sample.depth_tgt.shape
    g_depth = np.zeros((h, w)) if wrt == "depth" else None
    g_poses = [np.zeros(6) for _ in sample.images_src]

    fwd_src_depths = sample.depths_src if sample.depths_src is not None \
        else [None] * len(sample.images_src)
    _direction_gradients(fwd, weights, cfg, sample.intr, scale, fwd_src_depths,
                         g_depth, g_poses)
    for i, rev in enumerate(revs):
        _direction_gradients(rev, weights, cfg, sample.intr, scale / len(revs),
                             [sample.depth_tgt], g_depth, g_poses,
                             reverse_source=i, own_depth=sample.depths_src[i])

    if g_depth is not None:
        if weights.lambda_smooth > 0:
            g_depth += scale * weights.lambda_smooth * _smoothness_grad(
                sample.image_tgt, sample.depth_tgt)
        if sample.depth_init is not None and weights.lambda_prior > 0:
            g_depth += weights.lambda_prior * _depth_prior_grad(
                sample.depth_tgt, sample.depth_init, sample.prior_depth_max())
        if not np.all(np.isfinite(g_depth)):
            raise NonFiniteGradientError("depth gradient is not finite")
        return g_depth
    out = np.stack(g_poses)
    if not np.all(np.isfinite(out)):
        raise NonFiniteGradientError("pose gradient is not finite")
    return out
