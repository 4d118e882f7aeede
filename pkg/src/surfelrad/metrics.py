"""Image-quality metrics used for evaluation (not training)."""
import numpy as np

from .imageio import tonemap
from .losses import ssim as _ssim

METRICS = ("psnr", "ssim", "mae-normal", "mse-rough")


def to_8bit(img):
    return np.round(tonemap(img) * 255.0)


def psnr(img, ref):
    """PSNR in dB on tone-mapped 8-bit values; ``inf`` for identical images."""
    a, b = to_8bit(img), to_8bit(ref)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(255.0 ** 2 / mse)


def ssim(img, ref):
    return _ssim(to_8bit(img) / 255.0, to_8bit(ref) / 255.0)


def mae_normal(img, ref):
    """Mean angle in degrees between normal images, over pixels where both are non-zero."""
    a = np.asarray(img, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(ref, dtype=np.float64).reshape(-1, 3)
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    ok = (na > 1e-8) & (nb > 1e-8)
    if not ok.any():
        return 0.0
    cos = np.sum(a[ok] * b[ok], axis=1) / (na[ok] * nb[ok])
    return float(np.degrees(np.arccos(np.clip(cos, -1.0, 1.0))).mean())


def mse_rough(img, ref):
    return float(np.mean((np.asarray(img, dtype=np.float64) - np.asarray(ref, dtype=np.float64)) ** 2))


def compute(metric, img, ref):
    fn = {"psnr": psnr, "ssim": ssim, "mae-normal": mae_normal, "mse-rough": mse_rough}.get(metric)
    if fn is None:
        raise ValueError(f"unknown metric {metric!r}; expected one of {', '.join(METRICS)}")
    return fn(img, ref)


def format_value(v):
    return "inf" if np.isinf(v) else f"{v:.6g}"
