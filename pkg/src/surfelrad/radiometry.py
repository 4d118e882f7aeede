"""Monte Carlo rendering-equation estimates at surfels and the radiometric-consistency loss.

Incident radiance along a secondary ray is ``T * L_env + L_trace``: the
environment is seen through whatever transmittance the traced surfels leave,
and the surfels themselves contribute their (SH) radiance as indirect light.
Every estimator here keeps what its reverse pass needs, and gradients are
accumulated by hand into a dict of arrays shaped like the scene parameters.
"""
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .cubemap import direction_to_index
from .sh import sh_basis
from .shading import brdf_geometry, ggx_specular, shade_splitsum, shade_splitsum_backward
from .tracer import DEFAULT_T_MIN, trace_rays
from .vecmath import check_unit, dot, normalize, scatter_rows, to_world

RAY_OFFSET = 1e-4
INDIRECT_MODES = ("surfel", "splitsum", "none")


@dataclass(frozen=True)
class RadConfig:
    n_g: int = 256
    n_s: int = 64
    lam_rad: float = 0.2
    seed: int = 0
    specular: bool = True
    camera_dirs: bool = True
    detach_surfel: bool = False
    detach_pbr: bool = False

    def __post_init__(self):
        if self.n_g < 1 or self.n_s < 1:
            raise ValueError("n_g and n_s must be at least 1")
        if not self.lam_rad >= 0:
            raise ValueError("lam_rad must be non-negative")


# desk-scale default plus the two sample budgets quoted for full-size runs
PRESETS = {
    "desk": RadConfig(),
    "paper": RadConfig(n_g=4096, n_s=64),
    "table": RadConfig(n_g=2048, n_s=64),
}


def sample_hemisphere(n, u1, u2):
    """Uniform direction about ``n`` from two uniforms; pdf is ``1 / (2 pi)``."""
    n = np.asarray(n, dtype=np.float64)
    z = np.asarray(u1, dtype=np.float64)
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = 2.0 * np.pi * np.asarray(u2, dtype=np.float64)
    local = np.stack(np.broadcast_arrays(r * np.cos(phi), r * np.sin(phi), z), -1)
    d = to_world(local, n)
    return d, np.full(d.shape[:-1], 1.0 / (2.0 * np.pi))


def hemisphere_directions(n, *keys):
    """Keyed uniform hemisphere directions; the same keys always give the same rays."""
    return sample_hemisphere(n, rng.uniform(*keys, 0), rng.uniform(*keys, 1))[0]


class IncidentBatch:
    """Incident radiance along ``dirs[p, j]`` from shading points ``origins[p]``.

    ``exclude[p]`` names the surfel each point lies on so its own splat is
    skipped. ``indirect`` picks what traced surfels contribute: their SH
    radiance, split-sum shading of their blended attributes, or nothing.
    """

    def __init__(self, scene, bvh, origins, normals, exclude, dirs, direct=True, indirect="surfel", tables=None):
        if indirect not in INDIRECT_MODES:
            raise ValueError(f"indirect must be one of {INDIRECT_MODES}")
        self.scene = scene
        self.shape = dirs.shape[:-1]
        self.dirs = dirs
        self.direct = direct
        self.indirect = indirect
        n_pts, n_dir = self.shape
        o = np.asarray(origins) + RAY_OFFSET * np.asarray(normals)
        o = np.repeat(o, n_dir, axis=0)
        d = dirs.reshape(-1, 3)
        ex = np.repeat(np.asarray(exclude, dtype=np.int64), n_dir)
        self.records = rec = trace_rays(scene, bvh, o, d, t_min=DEFAULT_T_MIN, exclude=ex)
        self.T = rec.transmittance
        self.env_idx = direction_to_index(d, scene.env.res)
        self.L_dir = scene.env.flat()[self.env_idx] if direct else np.zeros((len(d), 3))
        if indirect == "surfel":
            self.basis = sh_basis(-d)[rec.ray]
            self.raw = np.einsum("hk,hkc->hc", self.basis, scene.sh[rec.surfel])
            self.colors = np.maximum(self.raw, 0.0)
            self.L_trace = rec.composite(self.colors)
        elif indirect == "splitsum":
            s = rec.surfel
            wsum = np.maximum(1.0 - self.T, 1e-8)[:, None]
            nrm = normalize(rec.composite(scene.normals[s]) + 1e-12)
            alb = rec.composite(scene.albedo[s]) / wsum
            rough = rec.composite(scene.roughness[s]) / wsum[:, 0]
            hit = (1.0 - self.T) >= 1e-8
            shaded = np.zeros((len(d), 3))
            if np.any(hit):
                shaded[hit] = shade_splitsum(nrm[hit], np.clip(alb[hit], 0, 1), np.clip(rough[hit], 0, 1),
                                             -d[hit], tables)
            self.L_trace = (1.0 - self.T)[:, None] * shaded
        else:
            self.L_trace = np.zeros((len(d), 3))
        self.L_i = (self.T[:, None] * self.L_dir + self.L_trace).reshape(self.shape + (3,))

    def backward(self, d_L, grads):
        """Accumulate ``dLoss/dparams`` given ``dLoss/dL_i`` of shape ``(P, S, 3)``."""
        d_L = d_L.reshape(-1, 3)
        n = len(self.scene)
        if self.direct:
            env = grads["env"].reshape(-1, 3)
            scatter_rows(env, self.env_idx, self.T[:, None] * d_L)
        if self.indirect != "surfel":
            # split-sum and no-indirect modes are used for rendering only
            return grads
        rec = self.records
        d_T = np.sum(d_L * self.L_dir, axis=1)
        d_colors, d_a = rec.composite_backward(self.colors, d_L, d_T)
        d_raw = np.where(self.raw > 0, d_colors, 0.0)
        scatter_rows(grads["sh"], rec.surfel, self.basis[:, :, None] * d_raw[:, None, :])
        grads["opacity"] += rec.opacity_gradient(d_a, n)
        return grads


class ShadingBatch:
    """Monte Carlo outgoing radiance ``(2 pi / S) sum_j f_r L_i cos`` for a set of shading points.

    Point ``k`` uses the material of ``surfel[k]`` and the incident samples of
    row ``rows[k]`` of ``incident``; several outgoing directions may share one row.
    """

    def __init__(self, scene, surfel, normals, wo, incident, rows=None, specular=True):
        self.scene = scene
        self.surfel = np.asarray(surfel, dtype=np.int64)
        self.incident = incident
        self.rows = np.arange(len(self.surfel)) if rows is None else np.asarray(rows, dtype=np.int64)
        self.specular = specular
        n = np.asarray(normals)[:, None]
        wi = incident.dirs[self.rows]
        L = incident.L_i[self.rows]
        n_dir = wi.shape[1]
        valid, n_l, n_v, n_h, v_h = brdf_geometry(n, np.asarray(wo)[:, None], wi)
        self.weight = np.where(valid, n_l, 0.0) * (2.0 * np.pi / n_dir)
        self.albedo = scene.albedo[self.surfel]
        if specular:
            fs, dfs = ggx_specular(scene.roughness[self.surfel][:, None], n_h, n_l, n_v, v_h, with_grad=True)
            self.fs, self.dfs = np.where(valid, fs, 0.0), np.where(valid, dfs, 0.0)
        else:
            self.fs = self.dfs = np.zeros(valid.shape)
        self.irr = np.einsum("pj,pjc->pc", self.weight, L)
        self.diffuse = self.albedo / np.pi * self.irr
        self.spec = np.einsum("pj,pjc->pc", self.fs * self.weight, L)
        self.value = self.diffuse + self.spec
        self._L = L

    def backward(self, d_value, grads, incident_grads=True):
        n = len(self.scene)
        scatter_rows(grads["albedo"], self.surfel, d_value * self.irr / np.pi)
        d_rough = np.einsum("pj,pjc,pc->p", self.dfs * self.weight, self._L, d_value)
        grads["roughness"] += np.bincount(self.surfel, weights=d_rough, minlength=n)
        if incident_grads:
            d_L = (self.albedo[:, None, :] / np.pi + self.fs[..., None]) * self.weight[..., None] \
                * d_value[:, None, :]
            d_rows = np.zeros(self.incident.L_i.shape)
            scatter_rows(d_rows, self.rows, d_L)
            self.incident.backward(d_rows, grads)
        return grads


def incident_radiance(x, wi, scene, bvh, exclude=-1):
    """Incident radiance at ``x`` along ``wi``: ``(L_i, T, L_trace)``.

    ``T`` is the transmittance left by traced surfels, i.e. the visibility
    of the environment; ``1 - T`` is the occlusion.
    """
    x = np.asarray(x, dtype=np.float64).reshape(-1, 3)
    wi = check_unit(wi).reshape(len(x), -1, 3)
    batch = IncidentBatch(scene, bvh, x, np.zeros_like(x), np.broadcast_to(exclude, len(x)), wi)
    shape = wi.shape[:-1]
    return batch.L_i, batch.T.reshape(shape), batch.L_trace.reshape(shape + (3,))


@dataclass
class PbrEstimate:
    value: np.ndarray
    diffuse: np.ndarray
    specular: np.ndarray
    batch: ShadingBatch = field(default=None, repr=False)


def incident_directions(normals, n_s, *keys):
    """``(P, n_s, 3)`` keyed hemisphere directions; ``keys`` broadcast over points."""
    j = np.arange(n_s)
    keys = [np.asarray(k)[..., None] for k in keys]
    return hemisphere_directions(np.asarray(normals)[:, None], *keys, j)


def pbr_radiance(scene, bvh, surfel, wo, n_s=64, seed=0, iteration=0, specular=True, direct=True,
                 indirect="surfel"):
    """Monte Carlo PBR radiance leaving surfel(s) ``surfel`` toward ``wo``.

    Rays start at the surfel center, pushed off along its normal.
    """
    idx = np.atleast_1d(np.asarray(surfel, dtype=np.int64))
    wo = check_unit(np.asarray(wo, dtype=np.float64).reshape(-1, 3))
    wo = np.broadcast_to(wo, (len(idx), 3))
    n = scene.normals[idx]
    dirs = incident_directions(n, n_s, seed, iteration, rng.IN_DIR, idx)
    inc = IncidentBatch(scene, bvh, scene.p[idx], n, idx, dirs, direct, indirect)
    sb = ShadingBatch(scene, idx, n, wo, inc, specular=specular)
    return PbrEstimate(sb.value, sb.diffuse, sb.spec, sb)


def residual(scene, bvh, surfel, wo, **kwargs):
    """Unclamped SH radiance minus the Monte Carlo PBR radiance toward ``wo``."""
    idx = np.atleast_1d(np.asarray(surfel, dtype=np.int64))
    wo = np.broadcast_to(check_unit(np.asarray(wo, dtype=np.float64).reshape(-1, 3)), (len(idx), 3))
    lg = np.einsum("pk,pkc->pc", sh_basis(wo), scene.sh[idx])
    return lg - pbr_radiance(scene, bvh, idx, wo, **kwargs).value


@dataclass
class RadiometrySampleSet:
    """Surfels drawn for one step and the outgoing directions evaluated at each.

    ``rows[m]`` is the slot (index into ``surfels``) that direction ``wo[m]`` belongs to.
    """

    surfels: np.ndarray
    rows: np.ndarray
    wo: np.ndarray

    @property
    def n_dirs(self):
        return len(self.rows)


def draw_samples(scene, cfg, iteration, camera_centers=()):
    """One random outgoing direction per drawn surfel, plus one toward a chosen camera."""
    k = np.arange(cfg.n_g)
    n_surf = len(scene)
    slots = np.minimum((rng.uniform(cfg.seed, iteration, rng.PICK_SURFEL, k) * n_surf).astype(np.int64), n_surf - 1)
    n = scene.normals[slots]
    rows = [k]
    wos = [hemisphere_directions(n, cfg.seed, iteration, rng.OUT_DIR, k)]
    if cfg.camera_dirs and len(camera_centers):
        cam = int(rng.uniform(cfg.seed, iteration, rng.CAMERA) * len(camera_centers))
        to_cam = normalize(np.asarray(camera_centers[min(cam, len(camera_centers) - 1)]) - scene.p[slots])
        behind = dot(n, to_cam) <= 0
        fallback = hemisphere_directions(n, cfg.seed, iteration, rng.OUT_DIR, k + cfg.n_g)
        rows.append(k)
        wos.append(np.where(behind[:, None], fallback, to_cam))
    return RadiometrySampleSet(slots, np.concatenate(rows), np.concatenate(wos))


@dataclass
class LossEval:
    """A scalar loss value and a reverse pass that adds ``scale * dLoss/dparams`` into ``grads``."""

    value: float
    backward: object
    parts: dict = field(default_factory=dict)


def radiometric_loss(scene, bvh, cfg, iteration, camera_centers=(), estimator="mc", tables=None, samples=None):
    """Mean L1 (over directions and channels) of ``L_G(wo) - L_PBR(wo)`` at drawn surfels.

    ``estimator="splitsum"`` replaces the traced Monte Carlo estimate with
    split-sum shading against ``tables`` (no inter-reflection).
    """
    s = draw_samples(scene, cfg, iteration, camera_centers) if samples is None else samples
    surf = s.surfels[s.rows]
    basis = sh_basis(s.wo)
    lg = np.einsum("pk,pkc->pc", basis, scene.sh[surf])
    n = scene.normals[surf]
    if estimator == "mc":
        slot_n = scene.normals[s.surfels]
        dirs = incident_directions(slot_n, cfg.n_s, cfg.seed, iteration, rng.IN_DIR, np.arange(len(s.surfels)))
        inc = IncidentBatch(scene, bvh, scene.p[s.surfels], slot_n, s.surfels, dirs)
        sb = ShadingBatch(scene, surf, n, s.wo, inc, rows=s.rows, specular=cfg.specular)
        pbr = sb.value
    elif estimator == "splitsum":
        pbr = shade_splitsum(n, scene.albedo[surf], scene.roughness[surf], s.wo, tables, specular=cfg.specular)
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    res = lg - pbr
    m = res.size
    value = float(np.abs(res).sum() / m)

    def backward(grads, scale=1.0):
        g = np.sign(res) * (scale / m)
        if not cfg.detach_surfel:
            scatter_rows(grads["sh"], surf, basis[:, :, None] * g[:, None, :])
        if cfg.detach_pbr:
            return grads
        if estimator == "mc":
            sb.backward(-g, grads)
        else:
            d_alb, d_rough, d_env = shade_splitsum_backward(n, scene.albedo[surf], scene.roughness[surf], s.wo,
                                                            tables, -g, specular=cfg.specular)
            scatter_rows(grads["albedo"], surf, d_alb)
            grads["roughness"] += np.bincount(surf, weights=d_rough, minlength=len(scene))
            grads["env"] += d_env.reshape(grads["env"].shape)
        return grads

    return LossEval(value, backward, {"residual": res, "samples": s})
