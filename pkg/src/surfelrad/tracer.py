"""BVH ray tracing of 2D Gaussian surfels with depth-sorted alpha blending.

Each surfel is bounded by the box around its 3-sigma rectangle. A ray gathers
the ``K`` nearest remaining hits per traversal, blends them front to back and
traverses again past the last blended hit, until the hits run out or the
transmittance falls below ``T_STOP``. Because every pass collects the K
nearest hits beyond the previous pass (ties broken by surfel index), the
blend order is identical to a single global depth sort.
"""
from dataclasses import dataclass

import numba as nb
import numpy as np

from .sh import sh_basis
from .vecmath import check_unit

K_BUFFER = 16
T_STOP = 0.03
MIN_RESPONSE = 1.0 / 255.0
SIGMA_CUTOFF = 3.0
DEFAULT_T_MIN = 1e-4
LEAF_SIZE = 4
N_BINS = 16
MAX_SAH_DEPTH = 48
_STACK = 128
_BLOCK = 64  # rays per parallel work item; scratch buffers are allocated once per block

MODES = ("radiance", "normal", "albedo", "rough", "depth", "transmittance")


@dataclass
class Hit:
    index: int
    t: float
    response: float
    u: float
    v: float


@dataclass
class TraceResult:
    value: np.ndarray
    transmittance: float
    hit_count: int


@dataclass
class Bvh:
    node_min: np.ndarray
    node_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    start: np.ndarray
    count: np.ndarray
    prims: np.ndarray
    prim_min: np.ndarray
    prim_max: np.ndarray

    @property
    def n_nodes(self):
        return len(self.left)

    def candidates(self, origins, dirs):
        """Boolean ``(rays, surfels)`` mask of surfels in leaves whose box each ray enters."""
        o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
        out = np.zeros((len(o), len(self.prims)), dtype=np.bool_)
        _candidates_kernel(o, d, self.node_min, self.node_max, self.left, self.right, self.start, self.count,
                           self.prims, out)
        return out


def proxy_bounds(scene):
    """Axis-aligned boxes around each surfel's 3-sigma rectangle (its two proxy triangles)."""
    ext = SIGMA_CUTOFF * (scene.scales[:, :1] * np.abs(scene.tu) + scene.scales[:, 1:] * np.abs(scene.tv))
    pad = 1e-9 + 1e-7 * np.max(ext, axis=1, keepdims=True)
    return scene.p - ext - pad, scene.p + ext + pad


def build_bvh(scene):
    """Binned-SAH BVH over surfel proxy boxes, at most ``LEAF_SIZE`` surfels per leaf."""
    bmin, bmax = proxy_bounds(scene)
    if len(scene) == 0:
        z = np.zeros((1, 3))
        one = np.full(1, -1, np.int64)
        return Bvh(z, z.copy(), one, one.copy(), np.zeros(1, np.int64), np.zeros(1, np.int64),
                   np.zeros(0, np.int64), bmin, bmax)
    arrays = _build_kernel(np.ascontiguousarray(bmin), np.ascontiguousarray(bmax), LEAF_SIZE, N_BINS)
    return Bvh(*arrays, prim_min=bmin, prim_max=bmax)


@nb.njit(cache=True)
def _area(lo, hi):
    dx, dy, dz = hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]
    return dx * dy + dy * dz + dz * dx


@nb.njit(cache=True)
def _build_kernel(bmin, bmax, leaf_size, n_bins):
    n = bmin.shape[0]
    cen = 0.5 * (bmin + bmax)
    prims = np.arange(n)
    cap = 2 * n + 1
    node_min = np.empty((cap, 3))
    node_max = np.empty((cap, 3))
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    start = np.zeros(cap, np.int64)
    count = np.zeros(cap, np.int64)
    st_node = np.empty(cap, np.int64)
    st_s = np.empty(cap, np.int64)
    st_e = np.empty(cap, np.int64)
    st_depth = np.empty(cap, np.int64)
    st_node[0], st_s[0], st_e[0], st_depth[0] = 0, 0, n, 0
    sp = 1
    n_nodes = 1
    bin_cnt = np.zeros(n_bins, np.int64)
    bin_lo = np.empty((n_bins, 3))
    bin_hi = np.empty((n_bins, 3))
    lo_acc = np.empty(3)
    hi_acc = np.empty(3)
    left_cost = np.empty(n_bins)
    while sp > 0:
        sp -= 1
        node, s, e, depth = st_node[sp], st_s[sp], st_e[sp], st_depth[sp]
        lo = np.full(3, np.inf)
        hi = np.full(3, -np.inf)
        clo = np.full(3, np.inf)
        chi = np.full(3, -np.inf)
        for j in range(s, e):
            q = prims[j]
            for a in range(3):
                lo[a] = min(lo[a], bmin[q, a])
                hi[a] = max(hi[a], bmax[q, a])
                clo[a] = min(clo[a], cen[q, a])
                chi[a] = max(chi[a], cen[q, a])
        node_min[node] = lo
        node_max[node] = hi
        cnt = e - s
        if cnt <= leaf_size:
            start[node] = s
            count[node] = cnt
            continue
        best_cost = np.inf
        best_axis = -1
        best_split = -1
        # past MAX_SAH_DEPTH fall back to median splits so traversal stacks stay bounded
        for a in range(3 if depth < MAX_SAH_DEPTH else 0):
            extent = chi[a] - clo[a]
            if extent <= 1e-12:
                continue
            bin_cnt[:] = 0
            bin_lo[:] = np.inf
            bin_hi[:] = -np.inf
            for j in range(s, e):
                q = prims[j]
                b = min(int(n_bins * (cen[q, a] - clo[a]) / extent), n_bins - 1)
                bin_cnt[b] += 1
                for c in range(3):
                    bin_lo[b, c] = min(bin_lo[b, c], bmin[q, c])
                    bin_hi[b, c] = max(bin_hi[b, c], bmax[q, c])
            lo_acc[:] = np.inf
            hi_acc[:] = -np.inf
            acc = 0
            for b in range(n_bins - 1):
                acc += bin_cnt[b]
                for c in range(3):
                    lo_acc[c] = min(lo_acc[c], bin_lo[b, c])
                    hi_acc[c] = max(hi_acc[c], bin_hi[b, c])
                left_cost[b] = acc * _area(lo_acc, hi_acc) if acc > 0 else 0.0
            lo_acc[:] = np.inf
            hi_acc[:] = -np.inf
            acc = 0
            for b in range(n_bins - 1, 0, -1):
                acc += bin_cnt[b]
                for c in range(3):
                    lo_acc[c] = min(lo_acc[c], bin_lo[b, c])
                    hi_acc[c] = max(hi_acc[c], bin_hi[b, c])
                nl = cnt - acc
                if nl == 0 or acc == 0:
                    continue
                cost = left_cost[b - 1] + acc * _area(lo_acc, hi_acc)
                if cost < best_cost:
                    best_cost = cost
                    best_axis = a
                    best_split = b
        mid = s
        if best_axis >= 0:
            a = best_axis
            extent = chi[a] - clo[a]
            i, j = s, e - 1
            while i <= j:
                b = min(int(n_bins * (cen[prims[i], a] - clo[a]) / extent), n_bins - 1)
                if b < best_split:
                    i += 1
                else:
                    tmp = prims[i]
                    prims[i] = prims[j]
                    prims[j] = tmp
                    j -= 1
            mid = i
        if mid <= s or mid >= e:
            # coincident centroids: split the index range in half
            mid = (s + e) // 2
        lc, rc = n_nodes, n_nodes + 1
        n_nodes += 2
        left[node], right[node] = lc, rc
        st_node[sp], st_s[sp], st_e[sp], st_depth[sp] = rc, mid, e, depth + 1
        sp += 1
        st_node[sp], st_s[sp], st_e[sp], st_depth[sp] = lc, s, mid, depth + 1
        sp += 1
    return (node_min[:n_nodes].copy(), node_max[:n_nodes].copy(), left[:n_nodes].copy(), right[:n_nodes].copy(),
            start[:n_nodes].copy(), count[:n_nodes].copy(), prims)


@nb.njit(cache=True, inline="always")
def _slab(o, inv, lo, hi):
    t0 = -np.inf
    t1 = np.inf
    for a in range(3):
        ta = (lo[a] - o[a]) * inv[a]
        tb = (hi[a] - o[a]) * inv[a]
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
    return t0, t1


@nb.njit(cache=True, inline="always")
def _inverse(d, inv):
    for a in range(3):
        if abs(d[a]) > 1e-30:
            inv[a] = 1.0 / d[a]
        else:
            inv[a] = 1e30 if d[a] >= 0 else -1e30


@nb.njit(cache=True, inline="always")
def _intersect(o, d, t_min, p, n, tu, tv, su, sv, alpha):
    """Return ``(t, u, v, G)``; ``t < 0`` means no hit."""
    denom = n[0] * d[0] + n[1] * d[1] + n[2] * d[2]
    if abs(denom) < 1e-9:
        return -1.0, 0.0, 0.0, 0.0
    t = (n[0] * (p[0] - o[0]) + n[1] * (p[1] - o[1]) + n[2] * (p[2] - o[2])) / denom
    if t <= t_min:
        return -1.0, 0.0, 0.0, 0.0
    x0 = o[0] + t * d[0] - p[0]
    x1 = o[1] + t * d[1] - p[1]
    x2 = o[2] + t * d[2] - p[2]
    u = (x0 * tu[0] + x1 * tu[1] + x2 * tu[2]) / su
    v = (x0 * tv[0] + x1 * tv[1] + x2 * tv[2]) / sv
    if abs(u) > SIGMA_CUTOFF or abs(v) > SIGMA_CUTOFF:
        return -1.0, 0.0, 0.0, 0.0
    g = np.exp(-0.5 * (u * u + v * v))
    if alpha * g < MIN_RESPONSE:
        return -1.0, 0.0, 0.0, 0.0
    return t, u, v, g


@nb.njit(cache=True)
def _gather(o, d, inv, t_min, last_t, last_i, exclude, P, N, TU, TV, S, A,
            node_min, node_max, left, right, start, count, prims,
            buf_t, buf_i, buf_g, st_node, st_t0):
    """Fill the buffers with the K nearest hits whose (t, index) key exceeds (last_t, last_i)."""
    k_cap = buf_t.shape[0]
    cnt = 0
    t0, t1 = _slab(o, inv, node_min[0], node_max[0])
    if t1 < t0 or t1 < t_min or t1 < last_t:
        return 0
    st_node[0] = 0
    st_t0[0] = t0
    sp = 1
    while sp > 0:
        sp -= 1
        node = st_node[sp]
        if cnt == k_cap and st_t0[sp] > buf_t[k_cap - 1]:
            continue
        if left[node] < 0:
            for j in range(start[node], start[node] + count[node]):
                q = prims[j]
                if q == exclude:
                    continue
                t, u, v, g = _intersect(o, d, t_min, P[q], N[q], TU[q], TV[q], S[q, 0], S[q, 1], A[q])
                if t < 0.0:
                    continue
                if t < last_t or (t == last_t and q <= last_i):
                    continue
                if cnt == k_cap and (t > buf_t[k_cap - 1] or (t == buf_t[k_cap - 1] and q > buf_i[k_cap - 1])):
                    continue
                if cnt < k_cap:
                    cnt += 1
                m = cnt - 1
                while m > 0 and (buf_t[m - 1] > t or (buf_t[m - 1] == t and buf_i[m - 1] > q)):
                    buf_t[m] = buf_t[m - 1]
                    buf_i[m] = buf_i[m - 1]
                    buf_g[m] = buf_g[m - 1]
                    m -= 1
                buf_t[m] = t
                buf_i[m] = q
                buf_g[m] = g
            continue
        a, b = left[node], right[node]
        ta0, ta1 = _slab(o, inv, node_min[a], node_max[a])
        tb0, tb1 = _slab(o, inv, node_min[b], node_max[b])
        hit_a = ta1 >= ta0 and ta1 >= t_min and ta1 >= last_t
        hit_b = tb1 >= tb0 and tb1 >= t_min and tb1 >= last_t
        if hit_a and hit_b:
            if ta0 <= tb0:
                st_node[sp], st_t0[sp] = b, tb0
                st_node[sp + 1], st_t0[sp + 1] = a, ta0
            else:
                st_node[sp], st_t0[sp] = a, ta0
                st_node[sp + 1], st_t0[sp + 1] = b, tb0
            sp += 2
        elif hit_a:
            st_node[sp], st_t0[sp] = a, ta0
            sp += 1
        elif hit_b:
            st_node[sp], st_t0[sp] = b, tb0
            sp += 1
    return cnt


@nb.njit(cache=True, parallel=True)
def _records_kernel(O, D, t_min, exclude, P, N, TU, TV, S, A,
                    node_min, node_max, left, right, start, count, prims,
                    out_i, out_t, out_g, out_tb, out_n, out_T):
    cap = out_i.shape[1]
    n_ray = O.shape[0]
    for b in nb.prange((n_ray + _BLOCK - 1) // _BLOCK):
        buf_t = np.empty(K_BUFFER)
        buf_i = np.empty(K_BUFFER, np.int64)
        buf_g = np.empty(K_BUFFER)
        st_node = np.empty(_STACK, np.int64)
        st_t0 = np.empty(_STACK)
        inv = np.empty(3)
        for r in range(b * _BLOCK, min((b + 1) * _BLOCK, n_ray)):
            o, d = O[r], D[r]
            _inverse(d, inv)
            T = 1.0
            last_t = -np.inf
            last_i = -1
            nrec = 0
            done = False
            while not done:
                cnt = _gather(o, d, inv, t_min, last_t, last_i, exclude[r], P, N, TU, TV, S, A,
                              node_min, node_max, left, right, start, count, prims,
                              buf_t, buf_i, buf_g, st_node, st_t0)
                for k in range(cnt):
                    if nrec < cap:
                        out_i[r, nrec] = buf_i[k]
                        out_t[r, nrec] = buf_t[k]
                        out_g[r, nrec] = buf_g[k]
                        out_tb[r, nrec] = T
                    nrec += 1
                    T *= 1.0 - A[buf_i[k]] * buf_g[k]
                    if T < T_STOP:
                        done = True
                        break
                if cnt < K_BUFFER:
                    break
                last_t = buf_t[K_BUFFER - 1]
                last_i = buf_i[K_BUFFER - 1]
            out_n[r] = nrec
            out_T[r] = T


@nb.njit(cache=True, parallel=True)
def _radiance_kernel(O, D, t_min, P, N, TU, TV, S, A, SH,
                     node_min, node_max, left, right, start, count, prims, out_rgb, out_T):
    n_ray = O.shape[0]
    for b in nb.prange((n_ray + _BLOCK - 1) // _BLOCK):
        buf_t = np.empty(K_BUFFER)
        buf_i = np.empty(K_BUFFER, np.int64)
        buf_g = np.empty(K_BUFFER)
        st_node = np.empty(_STACK, np.int64)
        st_t0 = np.empty(_STACK)
        basis = np.empty(16)
        inv = np.empty(3)
        for r in range(b * _BLOCK, min((b + 1) * _BLOCK, n_ray)):
            o, d = O[r], D[r]
            _basis_into(-d[0], -d[1], -d[2], basis)
            _inverse(d, inv)
            T = 1.0
            c0 = 0.0
            c1 = 0.0
            c2 = 0.0
            last_t = -np.inf
            last_i = -1
            done = False
            while not done:
                cnt = _gather(o, d, inv, t_min, last_t, last_i, -1, P, N, TU, TV, S, A,
                              node_min, node_max, left, right, start, count, prims,
                              buf_t, buf_i, buf_g, st_node, st_t0)
                for k in range(cnt):
                    q = buf_i[k]
                    r0 = 0.0
                    r1 = 0.0
                    r2 = 0.0
                    for m in range(16):
                        r0 += basis[m] * SH[q, m, 0]
                        r1 += basis[m] * SH[q, m, 1]
                        r2 += basis[m] * SH[q, m, 2]
                    a = A[q] * buf_g[k]
                    w = T * a
                    c0 += w * max(r0, 0.0)
                    c1 += w * max(r1, 0.0)
                    c2 += w * max(r2, 0.0)
                    T *= 1.0 - a
                    if T < T_STOP:
                        done = True
                        break
                if cnt < K_BUFFER:
                    break
                last_t = buf_t[K_BUFFER - 1]
                last_i = buf_i[K_BUFFER - 1]
            out_rgb[r, 0] = c0
            out_rgb[r, 1] = c1
            out_rgb[r, 2] = c2
            out_T[r] = T


@nb.njit(cache=True)
def _basis_into(x, y, z, out):
    xx, yy, zz = x * x, y * y, z * z
    out[0] = 0.28209479177387814
    out[1] = -0.4886025119029199 * y
    out[2] = 0.4886025119029199 * z
    out[3] = -0.4886025119029199 * x
    out[4] = 1.0925484305920792 * x * y
    out[5] = -1.0925484305920792 * y * z
    out[6] = 0.31539156525252005 * (2.0 * zz - xx - yy)
    out[7] = -1.0925484305920792 * x * z
    out[8] = 0.5462742152960396 * (xx - yy)
    out[9] = -0.5900435899266435 * y * (3.0 * xx - yy)
    out[10] = 2.890611442640554 * x * y * z
    out[11] = -0.4570457994644658 * y * (4.0 * zz - xx - yy)
    out[12] = 0.3731763325901154 * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[13] = -0.4570457994644658 * x * (4.0 * zz - xx - yy)
    out[14] = 1.445305721320277 * z * (xx - yy)
    out[15] = -0.5900435899266435 * x * (xx - 3.0 * yy)


@nb.njit(cache=True, parallel=True)
def _candidates_kernel(O, D, node_min, node_max, left, right, start, count, prims, out):
    for r in nb.prange(O.shape[0]):
        stack = np.empty(_STACK, np.int64)
        o = O[r]
        inv = np.empty(3)
        _inverse(D[r], inv)
        stack[0] = 0
        sp = 1
        while sp > 0:
            sp -= 1
            node = stack[sp]
            t0, t1 = _slab(o, inv, node_min[node], node_max[node])
            if t1 < t0 or t1 < 0.0:
                continue
            if left[node] < 0:
                for j in range(start[node], start[node] + count[node]):
                    out[r, prims[j]] = True
            else:
                stack[sp] = left[node]
                stack[sp + 1] = right[node]
                sp += 2


@nb.njit(cache=True, parallel=True)
def _composite_kernel(offsets, a, colors, out):
    for r in nb.prange(len(offsets) - 1):
        T = 1.0
        for h in range(offsets[r], offsets[r + 1]):
            w = T * a[h]
            for c in range(colors.shape[1]):
                out[r, c] += w * colors[h, c]
            T *= 1.0 - a[h]


@nb.njit(cache=True, parallel=True)
def _composite_backward_kernel(offsets, a, t_before, t_final, colors, d_val, d_T, d_colors, d_a):
    nc = colors.shape[1]
    for r in nb.prange(len(offsets) - 1):
        suffix = np.zeros(nc)
        for h in range(offsets[r + 1] - 1, offsets[r] - 1, -1):
            w = t_before[h] * a[h]
            inv = 1.0 / (1.0 - a[h])
            g = -d_T[r] * t_final[r] * inv
            for c in range(nc):
                g += d_val[r, c] * (t_before[h] * colors[h, c] - suffix[c] * inv)
                d_colors[h, c] = d_val[r, c] * w
                suffix[c] += w * colors[h, c]
            d_a[h] = g


class HitRecords:
    """Blended hits of a batch of rays in compressed rows (``offsets`` delimit each ray).

    ``t_before`` is the transmittance in front of each hit, ``a`` the effective
    opacity ``alpha * G`` and ``transmittance`` the final value per ray.
    """

    def __init__(self, origins, dirs, offsets, surfel, t, response, t_before, transmittance, opacity):
        self.origins = origins
        self.dirs = dirs
        self.offsets = offsets
        self.surfel = surfel
        self.t = t
        self.response = response
        self.t_before = t_before
        self.transmittance = transmittance
        self.a = opacity[surfel] * response
        self.ray = np.repeat(np.arange(len(dirs)), np.diff(offsets))

    @property
    def n_rays(self):
        return len(self.dirs)

    @property
    def weights(self):
        return self.t_before * self.a

    @property
    def hit_counts(self):
        return np.diff(self.offsets)

    def composite(self, colors):
        colors = np.ascontiguousarray(colors, dtype=np.float64)
        squeeze = colors.ndim == 1
        colors = colors.reshape(len(self.a), 1 if squeeze else colors.shape[-1])
        out = np.zeros((self.n_rays, colors.shape[1]))
        _composite_kernel(self.offsets, self.a, colors, out)
        return out[:, 0] if squeeze else out

    def composite_backward(self, colors, d_value, d_transmittance=None):
        """Adjoints of per-hit colors and of per-hit effective opacity."""
        colors = np.ascontiguousarray(colors, dtype=np.float64)
        colors = colors.reshape(len(self.a), 1 if colors.ndim == 1 else colors.shape[-1])
        d_value = np.ascontiguousarray(d_value, dtype=np.float64).reshape(self.n_rays, colors.shape[1])
        d_T = np.zeros(self.n_rays) if d_transmittance is None else np.ascontiguousarray(d_transmittance, float)
        d_colors = np.zeros_like(colors)
        d_a = np.zeros(len(self.a))
        _composite_backward_kernel(self.offsets, self.a, self.t_before, self.transmittance, colors, d_value, d_T,
                                   d_colors, d_a)
        return d_colors, d_a

    def opacity_gradient(self, d_a, n_surfels):
        """Scatter per-hit ``d/d(alpha*G)`` onto surfel opacities."""
        return np.bincount(self.surfel, weights=d_a * self.response, minlength=n_surfels)


def _geometry(scene):
    return (np.ascontiguousarray(scene.p), np.ascontiguousarray(scene.normals), np.ascontiguousarray(scene.tu),
            np.ascontiguousarray(scene.tv), np.ascontiguousarray(scene.scales), np.ascontiguousarray(scene.opacity))


def _tree(bvh):
    return bvh.node_min, bvh.node_max, bvh.left, bvh.right, bvh.start, bvh.count, bvh.prims


def trace_rays(scene, bvh, origins, dirs, t_min=DEFAULT_T_MIN, exclude=None, cap=64):
    """Trace a batch of rays and return their blended hits as ``HitRecords``."""
    o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(d)
    ex = np.full(n, -1, np.int64) if exclude is None else np.ascontiguousarray(np.broadcast_to(exclude, n),
                                                                                dtype=np.int64)
    geom, tree = _geometry(scene), _tree(bvh)
    rows = np.arange(n)
    out_i = np.empty((n, cap), np.int64)
    out_t = np.empty((n, cap))
    out_g = np.empty((n, cap))
    out_tb = np.empty((n, cap))
    out_n = np.empty(n, np.int64)
    out_T = np.empty(n)
    _records_kernel(o, d, float(t_min), ex, *geom, *tree, out_i, out_t, out_g, out_tb, out_n, out_T)
    over = rows[out_n > cap]
    if len(over):
        big = int(out_n[over].max())
        bi = np.empty((len(over), big), np.int64)
        bt, bg, btb = np.empty((len(over), big)), np.empty((len(over), big)), np.empty((len(over), big))
        bn, bT = np.empty(len(over), np.int64), np.empty(len(over))
        _records_kernel(o[over], d[over], float(t_min), ex[over], *geom, *tree, bi, bt, bg, btb, bn, bT)
    counts = out_n.copy()
    offsets = np.zeros(n + 1, np.int64)
    np.cumsum(counts, out=offsets[1:])
    keep = np.arange(cap)[None, :] < np.minimum(counts, cap)[:, None]
    surfel, t, g, tb = out_i[keep], out_t[keep], out_g[keep], out_tb[keep]
    if len(over):
        # splice the long rays back in ray order
        parts_i, parts_t, parts_g, parts_tb = [], [], [], []
        short_off = np.zeros(n + 1, np.int64)
        np.cumsum(np.minimum(counts, cap), out=short_off[1:])
        over_pos = {int(r): k for k, r in enumerate(over)}
        for r in range(n):
            if r in over_pos:
                k = over_pos[r]
                m = bn[k]
                parts_i.append(bi[k, :m]); parts_t.append(bt[k, :m])
                parts_g.append(bg[k, :m]); parts_tb.append(btb[k, :m])
            else:
                s, e = short_off[r], short_off[r + 1]
                parts_i.append(surfel[s:e]); parts_t.append(t[s:e])
                parts_g.append(g[s:e]); parts_tb.append(tb[s:e])
        surfel, t, g, tb = (np.concatenate(x) for x in (parts_i, parts_t, parts_g, parts_tb))
    return HitRecords(o, d, offsets, surfel, t, g, tb, out_T, scene.opacity)


def intersect_splat(origin, direction, surfel, t_min=DEFAULT_T_MIN):
    """Ray/surfel intersection; returns a ``Hit`` (index -1) or ``None``."""
    o = np.asarray(origin, dtype=np.float64)
    d = check_unit(direction)
    n = np.cross(surfel.tu, surfel.tv)
    t, u, v, g = _intersect(o, d, float(t_min), np.asarray(surfel.p, float), n, np.asarray(surfel.tu, float),
                            np.asarray(surfel.tv, float), float(surfel.s[0]), float(surfel.s[1]),
                            float(surfel.alpha))
    if t < 0:
        return None
    return Hit(-1, t, g, u, v)


def hit_colors(scene, records, mode):
    """Per-hit quantity blended in ``mode``; radiance is SH toward the ray origin, clamped at 0."""
    s = records.surfel
    if mode == "radiance":
        basis = sh_basis(-records.dirs)[records.ray]
        return np.maximum(np.einsum("hk,hkc->hc", basis, scene.sh[s]), 0.0)
    if mode == "normal":
        return scene.normals[s]
    if mode == "albedo":
        return scene.albedo[s]
    if mode == "rough":
        return scene.roughness[s][:, None]
    if mode == "depth":
        return records.t[:, None]
    if mode == "transmittance":
        return np.zeros((len(s), 1))
    raise ValueError(f"unknown trace mode {mode!r}; expected one of {MODES}")


def blend(scene, records, mode):
    """Blended value per ray; depth is normalized by the total blend weight."""
    val = records.composite(hit_colors(scene, records, mode))
    if mode == "depth":
        wsum = 1.0 - records.transmittance
        val = np.where(wsum[:, None] >= 1e-8, val / np.maximum(wsum, 1e-300)[:, None], 0.0)
    return val


def trace(origin, direction, scene, bvh, mode="radiance", t_min=DEFAULT_T_MIN):
    """Trace one ray; returns accumulated value, final transmittance and hit count."""
    d = check_unit(direction)
    rec = trace_rays(scene, bvh, np.reshape(origin, (1, 3)), d.reshape(1, 3), t_min)
    val = blend(scene, rec, mode)[0]
    return TraceResult(val, float(rec.transmittance[0]), int(rec.hit_counts[0]))


@dataclass
class RenderResult:
    value: np.ndarray
    alpha: np.ndarray
    records: HitRecords = None


def render_radiance(scene, bvh, origins, dirs, t_min=0.0):
    """Fast path: blended clamped SH radiance and transmittance without hit records."""
    o = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    rgb = np.empty((len(d), 3))
    T = np.empty(len(d))
    _radiance_kernel(o, d, float(t_min), *_geometry(scene), np.ascontiguousarray(scene.sh), *_tree(bvh), rgb, T)
    return rgb, T


def render_image(camera, scene, bvh, mode="radiance", keep_records=False):
    """One primary ray per pixel center; ``alpha`` is ``1 - T`` per pixel."""
    o, d = camera.rays()
    h, w = d.shape[:2]
    if mode == "radiance" and not keep_records:
        rgb, T = render_radiance(scene, bvh, o, d)
        return RenderResult(rgb.reshape(h, w, 3), (1.0 - T).reshape(h, w))
    rec = trace_rays(scene, bvh, o, d, t_min=0.0)
    val = blend(scene, rec, mode)
    return RenderResult(val.reshape(h, w, -1), (1.0 - rec.transmittance).reshape(h, w),
                        rec if keep_records else None)
