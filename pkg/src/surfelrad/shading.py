"""Simplified Disney BRDF (Lambert + GGX specular) and split-sum image-based shading.

The split-sum tables are linear in the environment map, so each table is
stored as a sparse operator applied to the flattened cubemap. That keeps
precomputation deterministic and makes environment gradients a transpose
product.
"""
from dataclasses import dataclass, field
from functools import lru_cache
import hashlib
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .cubemap import EnvironmentCubemap, direction_to_index, texel_directions
from .vecmath import dot, normalize, reflect, scatter_rows, to_world

F0 = 0.04
ALPHA_G_MIN = 1e-4
DENOM_MIN = 1e-6

PREFILTER_LEVELS = 6
PREFILTER_SAMPLES = 256
IRRADIANCE_SAMPLES = 512
LUT_SIZE = 64
LUT_SAMPLES = 1024


@dataclass
class BrdfSample:
    value: np.ndarray
    diffuse: np.ndarray
    specular: np.ndarray


def ggx_specular(roughness, n_h, n_l, n_v, v_h, with_grad=False):
    """Scalar GGX lobe ``D F G / (4 n.l n.v)`` and optionally its roughness derivative."""
    r = np.asarray(roughness, dtype=np.float64)
    r2 = r * r
    ag = np.maximum(r2, ALPHA_G_MIN)
    A = ag * ag
    nh2 = n_h * n_h
    d = nh2 * (A - 1.0) + 1.0
    D = A / (np.pi * d * d)
    F = F0 + (1.0 - F0) * (1.0 - v_h) ** 5
    s_l = np.sqrt(A + (1.0 - A) * n_l * n_l)
    s_v = np.sqrt(A + (1.0 - A) * n_v * n_v)
    g_l = 2.0 * n_l / (n_l + s_l)
    g_v = 2.0 * n_v / (n_v + s_v)
    denom = np.maximum(4.0 * n_l * n_v, DENOM_MIN)
    fs = D * F * g_l * g_v / denom
    if not with_grad:
        return fs
    dD = (d - 2.0 * A * nh2) / (np.pi * d ** 3)
    dg_l = -2.0 * n_l / (n_l + s_l) ** 2 * (1.0 - n_l * n_l) / (2.0 * s_l)
    dg_v = -2.0 * n_v / (n_v + s_v) ** 2 * (1.0 - n_v * n_v) / (2.0 * s_v)
    dA_dr = np.where(r2 > ALPHA_G_MIN, 4.0 * r2 * r, 0.0)
    dfs = F / denom * (dD * g_l * g_v + D * (dg_l * g_v + g_l * dg_v)) * dA_dr
    return fs, dfs


def brdf_geometry(n, wo, wi):
    """Cosines used by the BRDF and a mask of pairs above both horizons."""
    n_l = dot(n, wi)
    n_v = dot(n, wo)
    valid = (n_l > 0) & (n_v > 0)
    h = wi + wo
    h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-300)
    return valid, np.clip(n_l, 0, 1), np.clip(n_v, 0, 1), np.clip(dot(n, h), 0, 1), np.clip(dot(h, wo), 0, 1)


def eval_brdf(albedo, roughness, n, wo, wi, specular=True):
    """Evaluate ``f_r = albedo/pi + f_s``; zero below either horizon."""
    albedo = np.asarray(albedo, dtype=np.float64)
    n, wo, wi = (np.asarray(v, dtype=np.float64) for v in (n, wo, wi))
    valid, n_l, n_v, n_h, v_h = brdf_geometry(n, wo, wi)
    fd = np.where(valid[..., None], albedo / np.pi, 0.0)
    fs = ggx_specular(roughness, n_h, n_l, n_v, v_h) if specular else np.zeros_like(n_l)
    fs = np.where(valid, fs, 0.0)
    fs3 = np.broadcast_to(fs[..., None], fd.shape)
    return BrdfSample(fd + fs3, fd, fs3.copy())


def hammersley(n):
    i = np.arange(n, dtype=np.uint64)
    bits = i.copy()
    bits = ((bits << np.uint64(16)) | (bits >> np.uint64(16))) & np.uint64(0xFFFFFFFF)
    bits = ((bits & np.uint64(0x55555555)) << np.uint64(1)) | ((bits & np.uint64(0xAAAAAAAA)) >> np.uint64(1))
    bits = ((bits & np.uint64(0x33333333)) << np.uint64(2)) | ((bits & np.uint64(0xCCCCCCCC)) >> np.uint64(2))
    bits = ((bits & np.uint64(0x0F0F0F0F)) << np.uint64(4)) | ((bits & np.uint64(0xF0F0F0F0)) >> np.uint64(4))
    bits = ((bits & np.uint64(0x00FF00FF)) << np.uint64(8)) | ((bits & np.uint64(0xFF00FF00)) >> np.uint64(8))
    return (i.astype(np.float64) + 0.5) / n, bits.astype(np.float64) / 4294967296.0


def ggx_half_vectors(roughness, n_samples):
    """Local-frame GGX-distributed half vectors (Hammersley points)."""
    u, v = hammersley(n_samples)
    A = max(roughness * roughness, ALPHA_G_MIN) ** 2
    cos_t = np.sqrt((1.0 - u) / (1.0 + (A - 1.0) * u))
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    phi = 2.0 * np.pi * v
    return np.stack([sin_t * np.cos(phi), sin_t * np.sin(phi), cos_t], -1)


def level_roughness(level, levels=PREFILTER_LEVELS):
    return level / (levels - 1)


def prefilter_resolution(res, level):
    return res if level == 0 else max(res // 2, 1)


@lru_cache(maxsize=None)
def irradiance_operator(res, n_samples=IRRADIANCE_SAMPLES):
    """Sparse ``(6 R^2, 6 R^2)`` map from env texels to cosine-averaged radiance per normal."""
    u, v = hammersley(n_samples)
    r = np.sqrt(u)
    local = np.stack([r * np.cos(2 * np.pi * v), r * np.sin(2 * np.pi * v), np.sqrt(1.0 - u)], -1)
    normals = texel_directions(res).reshape(-1, 3)
    rows, cols = [], []
    for chunk in np.array_split(np.arange(len(normals)), max(1, len(normals) // 512)):
        d = to_world(local[None], normals[chunk][:, None])
        cols.append(direction_to_index(d, res).ravel())
        rows.append(np.repeat(chunk, n_samples))
    rows, cols = np.concatenate(rows), np.concatenate(cols)
    m = sp.coo_matrix((np.full(len(rows), 1.0 / n_samples), (rows, cols)), shape=(len(normals), len(normals)))
    return m.tocsr()


@lru_cache(maxsize=None)
def prefilter_operator(res, level, levels=PREFILTER_LEVELS, n_samples=PREFILTER_SAMPLES):
    """Sparse map from env texels to the GGX-prefiltered map of one roughness level."""
    out_res = prefilter_resolution(res, level)
    normals = texel_directions(out_res).reshape(-1, 3)
    if level == 0:
        return sp.identity(6 * res * res, format="csr")
    h_local = ggx_half_vectors(level_roughness(level, levels), n_samples)
    rows, cols, vals = [], [], []
    for chunk in np.array_split(np.arange(len(normals)), max(1, len(normals) // 512)):
        nrm = normals[chunk][:, None]
        h = to_world(h_local[None], nrm)
        l_dir = 2.0 * dot(nrm, h)[..., None] * h - nrm
        w = np.maximum(dot(nrm, l_dir), 0.0)
        w = w / np.maximum(w.sum(axis=1, keepdims=True), 1e-300)
        keep = w > 0
        rows.append(np.broadcast_to(chunk[:, None], w.shape)[keep])
        cols.append(direction_to_index(normalize(l_dir[keep]), res))
        vals.append(w[keep])
    m = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(len(normals), 6 * res * res))
    return m.tocsr()


@lru_cache(maxsize=None)
def brdf_lut(size=LUT_SIZE, n_samples=LUT_SAMPLES):
    """``(size, size, 2)`` table over (n.v, roughness) cell centers of the F0 scale and bias."""
    nv = (np.arange(size) + 0.5) / size
    rough = (np.arange(size) + 0.5) / size
    lut = np.empty((size, size, 2))
    for j, r in enumerate(rough):
        h = ggx_half_vectors(r, n_samples)[None]
        v = np.stack([np.sqrt(1.0 - nv * nv), np.zeros(size), nv], -1)[:, None]
        v_h = np.sum(v * h, -1)
        l_dir = 2.0 * v_h[..., None] * h - v
        n_l, n_h = l_dir[..., 2], h[..., 2]
        A = max(r * r, ALPHA_G_MIN) ** 2
        n_v = nv[:, None]
        g = (2 * n_l / (n_l + np.sqrt(A + (1 - A) * n_l ** 2))) * (2 * n_v / (n_v + np.sqrt(A + (1 - A) * n_v ** 2)))
        g_vis = np.where(n_l > 0, g * v_h / np.maximum(n_h * n_v, 1e-300), 0.0)
        fc = (1.0 - np.clip(v_h, 0, 1)) ** 5
        lut[:, j, 0] = np.mean((1.0 - fc) * g_vis, axis=1)
        lut[:, j, 1] = np.mean(fc * g_vis, axis=1)
    return lut


def _lerp_coords(x, size):
    """Cell-centered linear interpolation weights along one axis (clamped)."""
    f = np.clip(x * size - 0.5, 0.0, size - 1.0)
    i0 = np.minimum(np.floor(f).astype(np.int64), size - 2)
    w = f - i0
    inside = (x * size - 0.5 > 0) & (x * size - 0.5 < size - 1)
    return i0, w, np.where(inside, size, 0.0)


def lut_lookup(nv, roughness, lut=None, with_grad=False):
    """Bilinear (scale, bias) lookup; optional derivative with respect to roughness."""
    lut = brdf_lut() if lut is None else lut
    size = lut.shape[0]
    i0, wi, _ = _lerp_coords(np.asarray(nv, float), size)
    j0, wj, dj = _lerp_coords(np.asarray(roughness, float), size)
    c00, c01 = lut[i0, j0], lut[i0, j0 + 1]
    c10, c11 = lut[i0 + 1, j0], lut[i0 + 1, j0 + 1]
    wi, wj = wi[..., None], wj[..., None]
    a = c00 * (1 - wj) + c01 * wj
    b = c10 * (1 - wj) + c11 * wj
    val = a * (1 - wi) + b * wi
    if not with_grad:
        return val
    dval = ((c01 - c00) * (1 - wi) + (c11 - c10) * wi) * dj[..., None]
    return val, dval


@dataclass
class SplitSumTables:
    res: int
    irradiance: np.ndarray
    prefiltered: list
    lut: np.ndarray
    levels: int = PREFILTER_LEVELS
    env_flat: np.ndarray = field(default=None, repr=False)

    def irradiance_at(self, n):
        return self.irradiance.reshape(-1, 3)[direction_to_index(n, self.res)]


def precompute_splitsum(env, cache_dir=None):
    """Irradiance map, prefiltered mip levels (roughness ``l / (L-1)``) and the BRDF LUT."""
    res = env.res
    flat = env.flat()
    key = None
    if cache_dir is not None:
        key = hashlib.sha256(np.ascontiguousarray(flat, dtype="<f8").tobytes()).hexdigest()[:16]
        cached = _load_cached(Path(cache_dir), key, res)
        if cached is not None:
            cached.env_flat = flat
            return cached
    irr = (irradiance_operator(res) @ flat).reshape(6, res, res, 3)
    pref = []
    for lvl in range(PREFILTER_LEVELS):
        r = prefilter_resolution(res, lvl)
        pref.append((prefilter_operator(res, lvl) @ flat).reshape(6, r, r, 3))
    tables = SplitSumTables(res, irr, pref, brdf_lut(), env_flat=flat)
    if cache_dir is not None:
        _store_cached(Path(cache_dir), key, tables)
    return tables


def _store_cached(cache_dir, key, tables):
    from .imageio import write_pfm
    cache_dir.mkdir(parents=True, exist_ok=True)
    write_pfm(cache_dir / f"{key}_irradiance.pfm", tables.irradiance.reshape(-1, tables.res, 3))
    for lvl, p in enumerate(tables.prefiltered):
        write_pfm(cache_dir / f"{key}_prefilter{lvl}.pfm", p.reshape(-1, p.shape[1], 3))
    write_pfm(cache_dir / f"{key}_lut.pfm", np.concatenate([tables.lut, np.zeros(tables.lut.shape[:2] + (1,))], -1))


def _load_cached(cache_dir, key, res):
    from .imageio import read_pfm
    try:
        irr = read_pfm(cache_dir / f"{key}_irradiance.pfm").reshape(6, res, res, 3)
        pref = []
        for lvl in range(PREFILTER_LEVELS):
            r = prefilter_resolution(res, lvl)
            pref.append(read_pfm(cache_dir / f"{key}_prefilter{lvl}.pfm").reshape(6, r, r, 3))
        lut = read_pfm(cache_dir / f"{key}_lut.pfm")[..., :2]
    except (OSError, ValueError):
        return None
    return SplitSumTables(res, irr, pref, lut)


def _prefiltered_lookup(tables, dirs, roughness):
    """Roughness-interpolated prefiltered radiance plus the data needed for its backward."""
    x = np.clip(roughness, 0.0, 1.0) * (tables.levels - 1)
    l0 = np.minimum(np.floor(x).astype(np.int64), tables.levels - 2)
    w = x - l0
    out = np.zeros(dirs.shape[:-1] + (3,))
    idx = []
    for lvl in range(tables.levels):
        tab = tables.prefiltered[lvl]
        ix = direction_to_index(dirs, tab.shape[1])
        idx.append(ix)
        vals = tab.reshape(-1, 3)[ix]
        wl = np.where(l0 == lvl, 1.0 - w, 0.0) + np.where(l0 + 1 == lvl, w, 0.0)
        out += wl[..., None] * vals
    return out, l0, w, idx


def shade_splitsum(normal, albedo, roughness, wo, tables, with_parts=False, specular=True):
    """Split-sum outgoing radiance: ``albedo * irradiance(n) + prefiltered(reflect) * (F0 scale + bias)``."""
    n = np.asarray(normal, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    r = np.asarray(roughness, dtype=np.float64)
    nv = np.clip(dot(n, wo), 1e-4, 1.0)
    diffuse = np.asarray(albedo) * tables.irradiance_at(n)
    pref, *_ = _prefiltered_lookup(tables, normalize(reflect(wo, n)), r)
    sb = lut_lookup(nv, r, tables.lut)
    spec = pref * (F0 * sb[..., 0:1] + sb[..., 1:2])
    if not specular:
        spec = np.zeros_like(spec)
    if with_parts:
        return diffuse + spec, diffuse, spec
    return diffuse + spec


def shade_splitsum_backward(normal, albedo, roughness, wo, tables, d_out, specular=True):
    """Adjoints of split-sum shading: ``(d_albedo, d_roughness, d_env_flat)``."""
    n = np.asarray(normal, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    r = np.asarray(roughness, dtype=np.float64)
    res = tables.res
    nv = np.clip(dot(n, wo), 1e-4, 1.0)
    irr_idx = direction_to_index(n, res)
    irr = tables.irradiance.reshape(-1, 3)[irr_idx]
    d_albedo = d_out * irr
    d_irr = np.zeros((6 * res * res, 3))
    scatter_rows(d_irr, irr_idx.ravel(), d_out * np.asarray(albedo))
    refl = normalize(reflect(wo, n))
    pref, l0, w, idx = _prefiltered_lookup(tables, refl, r)
    sb, dsb = lut_lookup(nv, r, tables.lut, with_grad=True)
    k = F0 * sb[..., 0:1] + sb[..., 1:2]
    dk = F0 * dsb[..., 0:1] + dsb[..., 1:2]
    lo = np.take_along_axis(np.stack([t.reshape(-1, 3)[i] for t, i in zip(tables.prefiltered, idx)], 0),
                            l0[None, ..., None], 0)[0]
    hi = np.take_along_axis(np.stack([t.reshape(-1, 3)[i] for t, i in zip(tables.prefiltered, idx)], 0),
                            (l0 + 1)[None, ..., None], 0)[0]
    inside = (r > 0) & (r < 1)
    dpref_dr = np.where(inside[..., None], (hi - lo) * (tables.levels - 1), 0.0)
    d_rough = np.sum(d_out * (dpref_dr * k + pref * dk), axis=-1)
    d_env = irradiance_operator(res).T @ d_irr
    if not specular:
        return d_albedo, np.zeros_like(d_rough), d_env
    d_spec = d_out * k
    for lvl in range(tables.levels):
        wl = np.where(l0 == lvl, 1.0 - w, 0.0) + np.where(l0 + 1 == lvl, w, 0.0)
        if not np.any(wl):
            continue
        size = tables.prefiltered[lvl].shape[1]
        d_tab = np.zeros((6 * size * size, 3))
        scatter_rows(d_tab, idx[lvl].ravel(), wl[..., None] * d_spec)
        d_env += prefilter_operator(res, lvl).T @ d_tab
    return d_albedo, d_rough, d_env


def furnace_env(value=1.0, res=32):
    return EnvironmentCubemap.constant(value, res)
