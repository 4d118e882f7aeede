"""Counter-based random numbers.

Every random draw is a pure function of an integer key tuple, so a forward
pass, its reverse pass and a finite-difference replay all see the same rays.
"""
import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# stream identifiers, one per kind of random decision
PICK_SURFEL = 1
OUT_DIR = 2
IN_DIR = 3
CAMERA = 4
PATH = 5
VIEW = 6


def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def hash_keys(*keys):
    """Hash broadcastable integer key arrays into uint64 values."""
    arrays = [np.asarray(k, dtype=np.int64) for k in keys]
    shape = np.broadcast_shapes(*(a.shape for a in arrays))
    h = np.zeros((1,) + shape, np.uint64)
    with np.errstate(over="ignore"):
        for a in arrays:
            a = np.broadcast_to(a, shape)[None].astype(np.uint64)
            h = _mix(h + _GOLDEN + a)
    return h[0]


def uniform(*keys):
    """Uniform doubles in [0, 1) keyed by ``keys``."""
    return (hash_keys(*keys) >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
