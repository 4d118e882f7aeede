"""Training objectives on rendered images and surfel attributes.

Functions named ``*_grad`` return ``(value, gradient)``; the plain names
return only the value.
"""
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .scene import ALPHA_MAX, ALPHA_MIN

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5  # radius 5, an 11 x 11 window
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_PAD = 5
L1_WEIGHT = 0.8


def _as_hwc(img):
    img = np.asarray(img, dtype=np.float64)
    return img[..., None] if img.ndim == 2 else img


def _filter(x, mode="reflect"):
    return gaussian_filter(x, sigma=(SSIM_SIGMA, SSIM_SIGMA, 0), truncate=SSIM_TRUNCATE, mode=mode)


def ssim_grad(img, ref):
    """Mean SSIM over the window-interior pixels and channels, and its gradient w.r.t. ``img``.

    Gaussian-weighted statistics with population covariance and unit data
    range; a border of five pixels is excluded from the mean.
    """
    x, y = _as_hwc(img), _as_hwc(ref)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if min(x.shape[:2]) < 2 * SSIM_PAD + 1:
        raise ValueError("SSIM needs images at least 11 pixels on each side")
    ux, uy = _filter(x), _filter(y)
    uxx, uyy, uxy = _filter(x * x), _filter(y * y), _filter(x * y)
    a1 = 2 * ux * uy + SSIM_C1
    a2 = 2 * (uxy - ux * uy) + SSIM_C2
    b1 = ux * ux + uy * uy + SSIM_C1
    b2 = (uxx - ux * ux) + (uyy - uy * uy) + SSIM_C2
    d = b1 * b2
    s = a1 * a2 / d
    mask = np.zeros(x.shape[:2])
    mask[SSIM_PAD:-SSIM_PAD, SSIM_PAD:-SSIM_PAD] = 1.0
    count = mask.sum() * x.shape[2]
    value = float(np.sum(s * mask[..., None]) / count)
    g = mask[..., None] / count
    # the weighted pixels sit a full window radius inside, so the filter adjoint needs no border handling
    d_ux = g * (2 * uy * (a2 - a1) / d - 2 * ux * s / b1 + 2 * ux * s / b2)
    d_uxx = g * (-s / b2)
    d_uxy = g * (2 * a1 / d)
    grad = _filter(d_ux, "constant") + 2 * x * _filter(d_uxx, "constant") + y * _filter(d_uxy, "constant")
    return value, grad.reshape(np.shape(img))


def ssim(img, ref):
    return ssim_grad(img, ref)[0]


def recon_loss_grad(img, ref):
    """``0.8 * L1 + 0.2 * (1 - SSIM)`` and its gradient w.r.t. ``img``."""
    img = np.asarray(img, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError(f"image shapes differ: {img.shape} vs {ref.shape}")
    diff = img - ref
    l1 = float(np.mean(np.abs(diff)))
    s, ds = ssim_grad(img, ref)
    value = L1_WEIGHT * l1 + (1 - L1_WEIGHT) * (1.0 - s)
    grad = L1_WEIGHT * np.sign(diff) / diff.size - (1 - L1_WEIGHT) * ds
    return value, grad


def recon_loss(img, ref):
    return recon_loss_grad(img, ref)[0]


def _segment_exclusive_cumsum(x, offsets):
    c = np.concatenate([[0.0], np.cumsum(x)])
    starts = np.repeat(offsets[:-1], np.diff(offsets))
    return c[:-1] - c[starts]


def distortion_loss(records):
    """Mean over rays of ``sum_{i,j} w_i w_j |z_i - z_j|`` over ordered hit pairs."""
    w, z = records.weights, records.t
    if records.n_rays == 0:
        return 0.0
    # hits are depth sorted within each ray, so |z_i - z_j| = z_i - z_j for j before i
    before_w = _segment_exclusive_cumsum(w, records.offsets)
    before_wz = _segment_exclusive_cumsum(w * z, records.offsets)
    per_hit = 2.0 * w * (z * before_w - before_wz)
    return float(per_hit.sum() / records.n_rays)


def point_map_normals(origins, dirs, depth):
    """Normals of the unprojected depth map by central differences, facing the camera.

    Returns ``(normals, valid)``; border pixels and pixels next to empty ones are invalid.
    """
    pts = origins + depth[..., None] * dirs
    n = np.zeros_like(pts)
    dx = pts[1:-1, 2:] - pts[1:-1, :-2]
    dy = pts[2:, 1:-1] - pts[:-2, 1:-1]
    c = np.cross(dx, dy)
    norm = np.linalg.norm(c, axis=-1, keepdims=True)
    inner = c / np.maximum(norm, 1e-300)
    flip = np.sum(inner * dirs[1:-1, 1:-1], axis=-1) > 0
    inner[flip] *= -1
    n[1:-1, 1:-1] = inner
    ok = depth > 0
    valid = np.zeros(depth.shape, bool)
    valid[1:-1, 1:-1] = (ok[1:-1, 1:-1] & ok[1:-1, 2:] & ok[1:-1, :-2] & ok[2:, 1:-1] & ok[:-2, 1:-1]
                         & (norm[..., 0] > 0))
    return n, valid


def normal_depth_loss(records, depth, hit_normals, shape):
    """Mean over valid pixels of ``sum_i w_i (1 - n_i . N)``; ``N`` comes from the depth map.

    ``hit_normals`` are the surfel normals of the hits in ``records``, used unflipped.
    """
    h, w = shape
    o = records.origins.reshape(h, w, 3)
    d = records.dirs.reshape(h, w, 3)
    N, valid = point_map_normals(o, d, np.asarray(depth).reshape(h, w))
    Nf = N.reshape(-1, 3)[records.ray]
    per_hit = records.weights * (1.0 - np.sum(hit_normals * Nf, axis=1))
    per_pix = np.bincount(records.ray, weights=per_hit, minlength=h * w)
    vf = valid.ravel()
    return float(per_pix[vf].mean()) if vf.any() else 0.0


def edge_aware_smooth_grad(feature, ref):
    """Forward-difference feature gradients damped by ``exp(-|grad ref|)``; value and d/d feature."""
    f, r = _as_hwc(feature), _as_hwc(ref)
    npix = f.shape[0] * f.shape[1]
    grad = np.zeros_like(f)
    value = 0.0
    for axis in (0, 1):
        df = np.diff(f, axis=axis)
        wt = np.exp(-np.mean(np.abs(np.diff(r, axis=axis)), axis=-1, keepdims=True))
        value += float(np.sum(np.mean(np.abs(df), axis=-1, keepdims=True) * wt) / npix)
        g = np.sign(df) * wt / (f.shape[2] * npix)
        sl_hi = [slice(None)] * 3
        sl_lo = [slice(None)] * 3
        sl_hi[axis] = slice(1, None)
        sl_lo[axis] = slice(None, -1)
        grad[tuple(sl_hi)] += g
        grad[tuple(sl_lo)] -= g
    return value, grad.reshape(np.shape(feature))


def edge_aware_smooth_loss(feature, ref):
    return edge_aware_smooth_grad(feature, ref)[0]


def sparsity_loss_grad(opacity):
    """Mean of ``log a + log(1 - a)`` with ``a`` clamped away from 0 and 1."""
    a = np.asarray(opacity, dtype=np.float64)
    c = np.clip(a, ALPHA_MIN, ALPHA_MAX)
    value = float(np.mean(np.log(c) + np.log1p(-c)))
    inside = (a > ALPHA_MIN) & (a < ALPHA_MAX)
    grad = np.where(inside, (1.0 / c - 1.0 / (1.0 - c)) / a.size, 0.0)
    return value, grad


def sparsity_loss(opacity):
    return sparsity_loss_grad(opacity)[0]


def light_prior_grad(light_image):
    """Mean absolute deviation of the per-channel means from their average (neutral white light)."""
    img = _as_hwc(light_image)
    cbar = img.reshape(-1, img.shape[-1]).mean(axis=0)
    dev = cbar - cbar.mean()
    value = float(np.mean(np.abs(dev)))
    sg = np.sign(dev)
    d_cbar = (sg - sg.mean()) / len(cbar)
    grad = np.broadcast_to(d_cbar / (img.shape[0] * img.shape[1]), img.shape).copy()
    return value, grad.reshape(np.shape(light_image))


def light_prior_loss(light_image):
    return light_prior_grad(light_image)[0]


@dataclass(frozen=True)
class LossWeights:
    rad: float = 0.2
    dist: float = 1000.0
    n: float = 0.05
    ns: float = 0.02
    m: float = 0.05
    a_s: float = 0.2
    r_s: float = 0.1
    light: float = 0.01

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {k} must be finite and non-negative")

    @classmethod
    def relight(cls):
        return cls(rad=1.0, dist=0, n=0, ns=0, m=0, a_s=0, r_s=0, light=0)


STAGES = ("init", "inverse", "relight")
# component name -> weight attribute (None means unit weight)
STAGE_TERMS = {
    "init": {"recon": None, "recon_pbr": None, "rad": "rad", "dist": "dist", "normal": "n", "nsmooth": "ns",
             "sparsity": "m"},
    "relight": {"rad": "rad"},
}
STAGE_TERMS["inverse"] = dict(STAGE_TERMS["init"], albedo_smooth="a_s", rough_smooth="r_s", light="light")


def term_weight(stage, name, weights):
    attr = STAGE_TERMS[stage][name]
    return 1.0 if attr is None else getattr(weights, attr)


def stage_objective(stage, components, weights):
    """Weighted sum of the loss components active in ``stage``; missing components count as 0."""
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}")
    return float(sum(term_weight(stage, k, weights) * components.get(k, 0.0) for k in STAGE_TERMS[stage]))
