"""Environment cubemap: direction <-> texel mapping and nearest-texel lookup.

Face order is +X, -X, +Y, -Y, +Z, -Z. Within a face, row 0 is the top of the
face image (OpenGL cubemap orientation).
"""
from dataclasses import dataclass

import numpy as np

from .vecmath import check_unit

FACE_NAMES = ("+X", "-X", "+Y", "-Y", "+Z", "-Z")
DEFAULT_RESOLUTION = 32

# (major axis, sign, sc axis, sc sign, tc axis, tc sign)
_FACES = (
    (0, +1.0, 2, -1.0, 1, -1.0),
    (0, -1.0, 2, +1.0, 1, -1.0),
    (1, +1.0, 0, +1.0, 2, +1.0),
    (1, -1.0, 0, +1.0, 2, -1.0),
    (2, +1.0, 0, +1.0, 1, -1.0),
    (2, -1.0, 0, -1.0, 1, -1.0),
)


def direction_face(dirs):
    """Index of the face whose major axis dominates each direction."""
    d = np.asarray(dirs, dtype=np.float64)
    a = np.abs(d)
    ax = np.where((a[..., 0] >= a[..., 1]) & (a[..., 0] >= a[..., 2]), 0,
                  np.where(a[..., 1] >= a[..., 2], 1, 2))
    comp = np.take_along_axis(d, ax[..., None], axis=-1)[..., 0]
    return 2 * ax + (comp < 0)


def direction_to_texel(dirs, res):
    """Map directions to ``(face, row, col)`` integer arrays."""
    d = np.asarray(dirs, dtype=np.float64)
    face = direction_face(d)
    sc = np.empty(face.shape)
    tc = np.empty(face.shape)
    ma = np.empty(face.shape)
    for f, (mj, ms, sa, ss, ta, ts) in enumerate(_FACES):
        m = face == f
        if not np.any(m):
            continue
        dm = d[m]
        ma[m] = np.abs(dm[:, mj])
        sc[m] = ss * dm[:, sa]
        tc[m] = ts * dm[:, ta]
    ma = np.maximum(ma, 1e-300)
    u = 0.5 * (sc / ma + 1.0)
    v = 0.5 * (tc / ma + 1.0)
    col = np.clip(np.floor(u * res), 0, res - 1).astype(np.int64)
    row = np.clip(np.floor(v * res), 0, res - 1).astype(np.int64)
    return face, row, col


def direction_to_index(dirs, res):
    """Flat texel index ``face * res * res + row * res + col``."""
    face, row, col = direction_to_texel(dirs, res)
    return (face * res + row) * res + col


def texel_directions(res):
    """Unit directions through every texel center, shape ``(6, res, res, 3)``."""
    c = (np.arange(res) + 0.5) / res * 2.0 - 1.0
    tc, sc = np.meshgrid(c, c, indexing="ij")
    out = np.empty((6, res, res, 3))
    for f, (mj, ms, sa, ss, ta, ts) in enumerate(_FACES):
        v = np.zeros((res, res, 3))
        v[..., mj] = ms
        v[..., sa] = ss * sc
        v[..., ta] = ts * tc
        out[f] = v
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def texel_solid_angles(res):
    """Solid angle subtended by every texel, shape ``(6, res, res)``."""
    edges = np.linspace(-1.0, 1.0, res + 1)

    def corner(x, y):
        return np.arctan2(x * y, np.sqrt(x * x + y * y + 1.0))

    x0, x1 = edges[:-1], edges[1:]
    y0, y1 = edges[:-1, None], edges[1:, None]
    w = corner(x1, y1) - corner(x0, y1) - corner(x1, y0) + corner(x0, y0)
    return np.broadcast_to(w, (6, res, res)).copy()


@dataclass
class EnvironmentCubemap:
    """Distant lighting stored as six RGB faces of ``res x res`` texels."""

    faces: np.ndarray

    def __post_init__(self):
        self.faces = np.asarray(self.faces, dtype=np.float64)
        if self.faces.ndim != 4 or self.faces.shape[0] != 6 or self.faces.shape[1] != self.faces.shape[2] \
                or self.faces.shape[3] != 3:
            raise ValueError(f"cubemap faces must have shape (6, R, R, 3), got {self.faces.shape}")

    @property
    def res(self):
        return self.faces.shape[1]

    @classmethod
    def constant(cls, value, res=DEFAULT_RESOLUTION):
        return cls(np.broadcast_to(np.asarray(value, dtype=np.float64), (6, res, res, 3)).copy())

    @classmethod
    def from_function(cls, fn, res=DEFAULT_RESOLUTION):
        """Fill texels with ``fn(directions) -> rgb`` evaluated at texel centers."""
        dirs = texel_directions(res)
        return cls(np.broadcast_to(fn(dirs), (6, res, res, 3)).copy())

    def flat(self):
        return self.faces.reshape(-1, 3)

    def lookup(self, dirs):
        return self.flat()[direction_to_index(dirs, self.res)]

    def copy(self):
        return EnvironmentCubemap(self.faces.copy())


def sample_cubemap(env, dirs):
    """Nearest-texel radiance of ``env`` along unit ``dirs``."""
    return env.lookup(check_unit(dirs))
