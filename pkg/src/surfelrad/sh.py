"""Real spherical harmonics up to degree 3 (16 coefficients per channel)."""
import numpy as np

from .vecmath import check_unit

DEGREE = 3
N_COEFFS = (DEGREE + 1) ** 2

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)


def sh_basis(dirs):
    """Basis values ``Y_k(d)`` with shape ``dirs.shape[:-1] + (16,)``."""
    d = np.asarray(dirs, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    out = np.empty(d.shape[:-1] + (N_COEFFS,))
    out[..., 0] = C0
    out[..., 1] = -C1 * y
    out[..., 2] = C1 * z
    out[..., 3] = -C1 * x
    out[..., 4] = C2[0] * x * y
    out[..., 5] = C2[1] * y * z
    out[..., 6] = C2[2] * (2.0 * zz - xx - yy)
    out[..., 7] = C2[3] * x * z
    out[..., 8] = C2[4] * (xx - yy)
    out[..., 9] = C3[0] * y * (3.0 * xx - yy)
    out[..., 10] = C3[1] * x * y * z
    out[..., 11] = C3[2] * y * (4.0 * zz - xx - yy)
    out[..., 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[..., 13] = C3[4] * x * (4.0 * zz - xx - yy)
    out[..., 14] = C3[5] * z * (xx - yy)
    out[..., 15] = C3[6] * x * (xx - 3.0 * yy)
    return out


def eval_sh(sh, dirs, clamp=True):
    """Radiance of SH coefficient block(s) ``sh[..., 16, 3]`` toward ``dirs``.

    Rendering paths clamp at zero; pass ``clamp=False`` for the raw value used
    by the residual.
    """
    dirs = check_unit(dirs)
    sh = np.asarray(sh, dtype=np.float64)
    val = np.einsum("...k,...kc->...c", sh_basis(dirs), sh)
    return np.maximum(val, 0.0) if clamp else val


# integral of the Legendre polynomial P_l over [0, 1], per band
_HEMI_BAND = np.repeat([1.0, 0.5, 0.0, -0.125], [1, 3, 5, 7])


def hemisphere_mean(sh, normals):
    """Unclamped radiance averaged over the solid angle of the hemisphere around ``normals``.

    Each band is scaled by the mean of its zonal profile over the hemisphere,
    so this is what a diffuse surface's constant radiance should equal.
    """
    normals = check_unit(normals)
    return np.einsum("...k,...kc->...c", sh_basis(normals) * _HEMI_BAND, np.asarray(sh, dtype=np.float64))
