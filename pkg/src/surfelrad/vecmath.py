"""Small vector helpers shared by every module."""
import numpy as np


class ContractError(ValueError):
    """A precondition on an input value was violated."""


def check_unit(dirs, tol=1e-6, what="direction"):
    dirs = np.asarray(dirs, dtype=np.float64)
    err = np.abs(np.linalg.norm(dirs, axis=-1) - 1.0)
    if not np.all(err <= tol):
        raise ContractError(f"{what} must be unit length (max deviation {np.max(err):.3g})")
    return dirs


def normalize(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def dot(a, b):
    return np.sum(a * b, axis=-1)


def reflect(wo, n):
    """Mirror direction of ``wo`` about ``n`` (both pointing away from the surface)."""
    return 2.0 * dot(wo, n)[..., None] * n - wo


def tangent_frame(n):
    """Two unit tangents ``(t, b)`` with ``t x b = n`` for each normal."""
    n = np.asarray(n, dtype=np.float64)
    helper = np.where(np.abs(n[..., :1]) > 0.9, np.array([0.0, 1.0, 0.0]), np.array([1.0, 0.0, 0.0]))
    t = normalize(np.cross(helper, n))
    b = np.cross(n, t)
    return t, b


def to_world(local, n):
    """Rotate directions given in a ``(t, b, n)`` frame into world space."""
    t, b = tangent_frame(n)
    return local[..., 0:1] * t + local[..., 1:2] * b + local[..., 2:3] * n


def scatter_rows(target, index, values):
    """``target[index[i]] += values[i]`` with repeated indices, via one bincount per column."""
    if len(index) == 0:
        return target
    flat = target.reshape(len(target), -1)
    vals = np.asarray(values, dtype=np.float64).reshape(len(index), -1)
    for c in range(flat.shape[1]):
        flat[:, c] += np.bincount(index, weights=vals[:, c], minlength=len(target))
    return target
