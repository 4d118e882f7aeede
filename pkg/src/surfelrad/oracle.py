"""Ground-truth generators on analytic rectangle scenes.

A brute-force path tracer and a radiosity solver over diffuse rectangles,
a surfelizer that turns the rectangles into a dense surfel scene, an
unchunked sort-everything surfel blender and a central finite-difference
helper. Only the tracer's cutoff constants are shared with it.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .cubemap import EnvironmentCubemap
from .scene import Scene
from .sh import N_COEFFS, sh_basis
from .tracer import MIN_RESPONSE, SIGMA_CUTOFF, T_STOP
from .vecmath import normalize, to_world

# surfelization rule (see README): grid spacing h, Gaussian sigma 0.8 h, grid inset 1.22 h from each edge
SURFELS_PER_UNIT = 16
SURFEL_ALPHA = 0.99
SIGMA_PER_SPACING = 0.8
EDGE_INSET = 1.22


@dataclass
class Rect:
    """Diffuse one-sided rectangle ``center + a*u + b*v`` for ``|a|, |b| <= 1``; front side along ``u x v``."""

    center: np.ndarray
    u: np.ndarray
    v: np.ndarray
    albedo: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    emission: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.center, self.u, self.v = (np.asarray(x, dtype=np.float64) for x in (self.center, self.u, self.v))
        self.albedo = np.broadcast_to(np.asarray(self.albedo, dtype=np.float64), 3).copy()
        self.emission = np.broadcast_to(np.asarray(self.emission, dtype=np.float64), 3).copy()

    @property
    def normal(self):
        return normalize(np.cross(self.u, self.v))

    @property
    def area(self):
        return 4.0 * np.linalg.norm(self.u) * np.linalg.norm(self.v)


@dataclass
class PatchScene:
    rects: list
    env: EnvironmentCubemap


def intersect_rects(rects, origins, dirs, eps=1e-7):
    """Nearest rectangle along each ray: ``(t, index, front)`` with index -1 on a miss."""
    n_ray = len(dirs)
    best_t = np.full(n_ray, np.inf)
    best_i = np.full(n_ray, -1, np.int64)
    front = np.zeros(n_ray, bool)
    for k, r in enumerate(rects):
        n = r.normal
        nd = dirs @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = ((r.center - origins) @ n) / nd
        p = origins + t[:, None] * dirs - r.center
        a = p @ r.u / (r.u @ r.u)
        b = p @ r.v / (r.v @ r.v)
        ok = (np.abs(nd) > 1e-12) & (t > eps) & (np.abs(a) <= 1) & (np.abs(b) <= 1) & (t < best_t)
        best_t[ok] = t[ok]
        best_i[ok] = k
        front[ok] = nd[ok] < 0
    return best_t, best_i, front


def _uniform_hemisphere(n, gen):
    z = gen.random(len(n))
    phi = 2 * np.pi * gen.random(len(n))
    r = np.sqrt(np.maximum(0.0, 1 - z * z))
    return to_world(np.stack([r * np.cos(phi), r * np.sin(phi), z], -1), n)


def _trace_paths(ps, x, k, bounces, gen, indirect_only):
    """Radiance leaving points ``x`` on rectangles ``k`` (diffuse, so direction-free), one path each."""
    albedo = np.array([r.albedo for r in ps.rects])
    emission = np.array([r.emission for r in ps.rects])
    normals = np.array([r.normal for r in ps.rects])
    out = np.zeros((len(x), 3)) if indirect_only else emission[k].copy()
    beta = np.ones((len(x), 3))
    alive = np.arange(len(x))
    pos, rect = x.copy(), k.copy()
    for bounce in range(bounces):
        if len(alive) == 0:
            break
        n = normals[rect]
        wi = _uniform_hemisphere(n, gen)
        # diffuse BRDF times cosine over the uniform pdf
        beta = beta * albedo[rect] * 2.0 * np.sum(wi * n, axis=1)[:, None]
        t, hit, front = intersect_rects(ps.rects, pos, wi)
        miss = hit < 0
        if not (indirect_only and bounce == 0):
            out[alive[miss]] += beta[miss] * ps.env.lookup(wi[miss])
        keep = ~miss & front
        out[alive[keep]] += beta[keep] * emission[hit[keep]]
        alive, beta = alive[keep], beta[keep]
        pos = pos[keep] + t[keep][:, None] * wi[keep]
        rect = hit[keep]
    return out


def path_trace_reference(ps, x, rect_index, wo=None, bounces=8, spp=256, seed=0, indirect_only=False,
                         chunk=1 << 18):
    """Mean outgoing radiance at points ``x`` (on rectangles ``rect_index``) over ``spp`` paths each.

    Diffuse-only, so ``wo`` only matters through which side is visible and
    is accepted for interface symmetry. ``indirect_only`` drops light that
    reaches the first vertex straight from the environment.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    rect_index = np.broadcast_to(np.asarray(rect_index, dtype=np.int64), len(x))
    gen = np.random.default_rng(seed)
    total = np.zeros((len(x), 3))
    sq = np.zeros((len(x), 3))
    pts = np.repeat(np.arange(len(x)), spp)
    for s in range(0, len(pts), chunk):
        ids = pts[s:s + chunk]
        vals = _trace_paths(ps, x[ids], rect_index[ids], bounces, gen, indirect_only)
        np.add.at(total, ids, vals)
        np.add.at(sq, ids, vals * vals)
    mean = total / spp
    var = np.maximum(sq / spp - mean * mean, 0.0)
    return mean, np.sqrt(var / spp)


def path_trace_image(ps, camera, spp=64, bounces=8, seed=0, indirect_only=False):
    """Per-pixel radiance of the first visible rectangle; black where nothing (or a back face) is hit."""
    o, d = camera.rays()
    h, w = d.shape[:2]
    o, d = o.reshape(-1, 3), d.reshape(-1, 3)
    t, hit, front = intersect_rects(ps.rects, o, d)
    img = np.zeros((h * w, 3))
    vis = hit >= 0
    sel = np.flatnonzero(vis & front)
    if len(sel):
        x = o[sel] + t[sel, None] * d[sel]
        img[sel] = path_trace_reference(ps, x, hit[sel], None, bounces, spp, seed, indirect_only)[0]
    return img.reshape(h, w, 3), vis.reshape(h, w).astype(np.float64)


def _elements(rect, n):
    c = (np.arange(n) + 0.5) / n * 2 - 1
    a, b = np.meshgrid(c, c, indexing="ij")
    pts = rect.center + a.reshape(-1, 1) * rect.u + b.reshape(-1, 1) * rect.v
    return pts, np.full(len(pts), rect.area / (n * n))


def _form_factors(p1, n1, p2, n2, a2, chunk=512):
    """Point-to-element form factors ``cos_i cos_j / (pi r^2) * A_j`` without occlusion."""
    out = np.zeros((len(p1), len(p2)))
    for s in range(0, len(p1), chunk):
        p, n = p1[s:s + chunk], n1[s:s + chunk]
        r2 = np.sum(p * p, 1)[:, None] + np.sum(p2 * p2, 1)[None, :] - 2 * p @ p2.T
        ci = p2 @ n.T
        ci = ci.T - np.sum(p * n, 1)[:, None]
        cj = p @ n2.T - np.sum(p2 * n2, 1)[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where((ci > 0) & (cj > 0) & (r2 > 0), ci * cj / (np.pi * r2 * r2), 0.0)
        out[s:s + chunk] = f * a2[None, :]
    return out


def _scene_elements(ps, subdivisions):
    pts, areas, normals, owner = [], [], [], []
    for k, r in enumerate(ps.rects):
        p, a = _elements(r, subdivisions)
        pts.append(p)
        areas.append(a)
        normals.append(np.broadcast_to(r.normal, p.shape))
        owner.append(np.full(len(p), k))
    return (np.concatenate(x) for x in (pts, areas, normals, owner))


def form_factor_matrix(ps, subdivisions):
    """Element-to-element form factors by the centroid double-area rule, no occlusion."""
    pts, areas, normals, owner = _scene_elements(ps, subdivisions)
    f = _form_factors(pts, normals, pts, normals, areas)
    f[owner[:, None] == owner[None, :]] = 0.0
    return f, pts, areas, normals, owner


def patch_form_factor(r1, r2, subdivisions=64):
    """Form factor from rectangle ``r1`` to ``r2`` (area-averaged over ``r1``)."""
    p1, a1 = _elements(r1, subdivisions)
    p2, a2 = _elements(r2, subdivisions)
    f = _form_factors(p1, np.broadcast_to(r1.normal, p1.shape), p2, np.broadcast_to(r2.normal, p2.shape), a2)
    return float(np.sum(f.sum(axis=1) * a1) / a1.sum())


def env_irradiance_terms(ps, pts, normals, n_theta=48, n_phi=96):
    """Cosine-weighted mean of unoccluded environment radiance at each point (stratified quadrature)."""
    u = (np.arange(n_theta) + 0.5) / n_theta
    ph = (np.arange(n_phi) + 0.5) / n_phi * 2 * np.pi
    uu, pp = np.meshgrid(u, ph, indexing="ij")
    r = np.sqrt(uu.ravel())
    local = np.stack([r * np.cos(pp.ravel()), r * np.sin(pp.ravel()), np.sqrt(1 - uu.ravel())], -1)
    out = np.zeros((len(pts), 3))
    for i in range(len(pts)):
        d = to_world(local, normals[i])
        o = np.broadcast_to(pts[i] + 1e-9 * normals[i], d.shape)
        _, hit, _ = intersect_rects(ps.rects, o, d)
        out[i] = np.where((hit < 0)[:, None], ps.env.lookup(d), 0.0).mean(axis=0)
    return out


@dataclass
class RadiositySolution:
    radiance: np.ndarray
    points: np.ndarray
    areas: np.ndarray
    owner: np.ndarray
    iterations: int

    def patch_mean(self, k):
        m = self.owner == k
        return np.sum(self.radiance[m] * self.areas[m, None], axis=0) / self.areas[m].sum()


def radiosity_reference(ps, subdivisions=16, tol=1e-8, max_iter=10000):
    """Diffuse radiance per element from ``B = E + rho (F B + H_env)`` by Jacobi iteration."""
    f, pts, areas, normals, owner = form_factor_matrix(ps, subdivisions)
    rho = np.array([r.albedo for r in ps.rects])[owner]
    emit = np.array([r.emission for r in ps.rects])[owner]
    h_env = env_irradiance_terms(ps, pts, normals)
    b = emit.copy()
    for it in range(1, max_iter + 1):
        nb = emit + rho * (f @ b + h_env)
        delta = np.max(np.abs(nb - b))
        b = nb
        if delta < tol:
            break
    return RadiositySolution(b, pts, areas, owner, it)


def surfelize(ps, per_unit=SURFELS_PER_UNIT, alpha=SURFEL_ALPHA, roughness=1.0, cameras=(), images=None):
    """Dense surfel grid covering every rectangle; materials copied, SH left at zero."""
    rows = {k: [] for k in ("p", "tu", "tv", "s", "albedo")}
    for r in ps.rects:
        lu, lv = np.linalg.norm(r.u), np.linalg.norm(r.v)
        tu, tv = r.u / lu, r.v / lv
        counts, spacing = [], []
        for half in (lu, lv):
            n = max(2, int(round(2 * half * per_unit)))
            counts.append(n)
            spacing.append(2 * half / (n - 1 + 2 * EDGE_INSET))
        a = -lu + spacing[0] * (EDGE_INSET + np.arange(counts[0]))
        b = -lv + spacing[1] * (EDGE_INSET + np.arange(counts[1]))
        aa, bb = np.meshgrid(a, b, indexing="ij")
        p = r.center + aa.reshape(-1, 1) * tu + bb.reshape(-1, 1) * tv
        m = len(p)
        rows["p"].append(p)
        rows["tu"].append(np.broadcast_to(tu, (m, 3)))
        rows["tv"].append(np.broadcast_to(tv, (m, 3)))
        rows["s"].append(np.broadcast_to(SIGMA_PER_SPACING * np.array(spacing), (m, 2)))
        rows["albedo"].append(np.broadcast_to(r.albedo, (m, 3)))
    cat = {k: np.concatenate(v) for k, v in rows.items()}
    n = len(cat["p"])
    return Scene(cat["p"], cat["tu"], cat["tv"], cat["s"], np.full(n, alpha), np.zeros((n, N_COEFFS, 3)),
                 cat["albedo"], np.full(n, roughness), ps.env.copy(), cameras, images)


def surfel_owner(ps, scene, tol=1e-6):
    """Index of the rectangle each surfel of ``surfelize(ps)`` sits on."""
    owner = np.full(len(scene), -1)
    for k, r in enumerate(ps.rects):
        on = np.abs((scene.p - r.center) @ r.normal) < tol
        on &= np.abs(scene.normals @ r.normal - 1) < tol
        owner[on & (owner < 0)] = k
    return owner


@dataclass
class SortedBlend:
    surfel: np.ndarray
    t: np.ndarray
    response: np.ndarray
    t_before: np.ndarray
    transmittance: float
    radiance: np.ndarray


def sorted_blend_reference(scene, origin, direction, t_min=0.0, exclude=-1):
    """Intersect every surfel, sort all hits by (depth, index) once and blend front to back."""
    o, d = np.asarray(origin, dtype=np.float64), np.asarray(direction, dtype=np.float64)
    n, p = scene.normals, scene.p
    denom = n[:, 0] * d[0] + n[:, 1] * d[1] + n[:, 2] * d[2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (n[:, 0] * (p[:, 0] - o[0]) + n[:, 1] * (p[:, 1] - o[1]) + n[:, 2] * (p[:, 2] - o[2])) / denom
    x = [o[k] + t * d[k] - p[:, k] for k in range(3)]
    u = (x[0] * scene.tu[:, 0] + x[1] * scene.tu[:, 1] + x[2] * scene.tu[:, 2]) / scene.scales[:, 0]
    v = (x[0] * scene.tv[:, 0] + x[1] * scene.tv[:, 1] + x[2] * scene.tv[:, 2]) / scene.scales[:, 1]
    ok = (np.abs(denom) >= 1e-9) & (t > t_min) & (np.abs(u) <= SIGMA_CUTOFF) & (np.abs(v) <= SIGMA_CUTOFF)
    ok &= np.arange(len(scene)) != exclude
    g = np.zeros(len(scene))
    # scalar libm exp, the same routine compiled tracer code calls (numpy's vector exp may differ by an ulp)
    g[ok] = [math.exp(-0.5 * (a * a + b * b)) for a, b in zip(u[ok], v[ok])]
    ok &= scene.opacity * g >= MIN_RESPONSE
    idx = np.flatnonzero(ok)
    idx = idx[np.lexsort((idx, t[idx]))]
    basis = sh_basis(-d)
    T, rad, tb, kept = 1.0, np.zeros(3), [], []
    for q in idx:
        a = scene.opacity[q] * g[q]
        c = np.zeros(3)
        for m in range(N_COEFFS):
            c = c + basis[m] * scene.sh[q, m]
        c = np.maximum(c, 0.0)
        rad = rad + T * a * c
        tb.append(T)
        kept.append(q)
        T *= 1.0 - a
        if T < T_STOP:
            break
    kept = np.array(kept, dtype=np.int64)
    return SortedBlend(kept, t[kept], g[kept], np.array(tb), T, rad)


def finite_diff_gradient(objective, array, index, step=1e-3):
    """Central difference of ``objective()`` w.r.t. ``array.flat[index]``; the array is restored."""
    flat = array.reshape(-1)
    old = flat[index]
    flat[index] = old + step
    fp = objective()
    flat[index] = old - step
    fm = objective()
    flat[index] = old
    return (fp - fm) / (2 * step)
