"""Image renders through the tracer, each with a reverse pass into parameter gradients.

Shaded modes shade every blended hit of a primary ray and alpha-blend the
shaded colors, the same way SH radiance is blended.
"""
from dataclasses import dataclass

import numpy as np

from . import rng
from .cubemap import direction_to_index
from .radiometry import IncidentBatch, ShadingBatch, incident_directions
from .sh import sh_basis
from .shading import irradiance_operator, shade_splitsum, shade_splitsum_backward
from .tracer import render_radiance, trace_rays
from .vecmath import dot, scatter_rows

RENDER_MODES = ("surfel", "pbr-mc", "pbr-splitsum", "normal", "albedo", "rough", "depth")
_ATTRIBUTES = {"normal": "normals", "albedo": "albedo", "rough": "roughness"}


@dataclass
class ImageRender:
    value: np.ndarray
    alpha: np.ndarray
    records: object = None
    _backward: object = None

    def backward(self, d_value, grads, d_alpha=None):
        """Add ``dLoss/dparams`` for an upstream image gradient ``d_value`` (and optional ``d_alpha``)."""
        if self._backward is None:
            return grads
        h, w = self.alpha.shape
        d_T = None if d_alpha is None else -np.asarray(d_alpha, dtype=np.float64).reshape(h * w)
        self._backward(np.asarray(d_value, dtype=np.float64).reshape(h * w, -1), d_T, grads)
        return grads


def primary_hits(scene, bvh, camera):
    o, d = camera.rays()
    return trace_rays(scene, bvh, o.reshape(-1, 3), d.reshape(-1, 3), t_min=0.0)


def _finish(camera, rec, colors, backward_colors, grads_fn=None):
    """Composite per-hit colors and wrap a reverse pass through the blend."""
    h, w = camera.height, camera.width
    val = rec.composite(colors)

    def backward(d_val, d_T, grads):
        d_colors, d_a = rec.composite_backward(colors, d_val, d_T)
        grads["opacity"] += rec.opacity_gradient(d_a, len(grads["opacity"]))
        backward_colors(d_colors, grads)

    return ImageRender(val.reshape(h, w, -1), (1.0 - rec.transmittance).reshape(h, w), rec, backward)


def render_surfel(scene, bvh, camera, need_grad=True):
    """Blended SH radiance toward the camera (the "surfel" render)."""
    if not need_grad:
        o, d = camera.rays()
        rgb, T = render_radiance(scene, bvh, o, d)
        return ImageRender(rgb.reshape(camera.height, camera.width, 3), (1.0 - T).reshape(camera.height, camera.width))
    rec = primary_hits(scene, bvh, camera)
    basis = sh_basis(-rec.dirs)[rec.ray]
    raw = np.einsum("hk,hkc->hc", basis, scene.sh[rec.surfel])

    def back(d_colors, grads):
        d_raw = np.where(raw > 0, d_colors, 0.0)
        scatter_rows(grads["sh"], rec.surfel, basis[:, :, None] * d_raw[:, None, :])

    return _finish(camera, rec, np.maximum(raw, 0.0), back)


def render_attribute(scene, bvh, camera, mode):
    """Blended normal, albedo, roughness or (normalized) depth."""
    rec = primary_hits(scene, bvh, camera)
    if mode == "depth":
        wsum = 1.0 - rec.transmittance
        val = rec.composite(rec.t)
        val = np.where(wsum >= 1e-8, val / np.maximum(wsum, 1e-300), 0.0)
        return ImageRender(val.reshape(camera.height, camera.width, 1), wsum.reshape(camera.height, camera.width),
                           rec)
    name = _ATTRIBUTES[mode]
    colors = getattr(scene, name)[rec.surfel]
    colors = colors[:, None] if colors.ndim == 1 else colors

    def back(d_colors, grads):
        if name == "albedo":
            scatter_rows(grads["albedo"], rec.surfel, d_colors)
        elif name == "roughness":
            grads["roughness"] += np.bincount(rec.surfel, weights=d_colors[:, 0], minlength=len(scene))

    return _finish(camera, rec, colors, back)


def render_pbr_splitsum(scene, bvh, camera, tables, specular=True):
    """Split-sum shading of every blended hit."""
    rec = primary_hits(scene, bvh, camera)
    s = rec.surfel
    n, wo = scene.normals[s], -rec.dirs[rec.ray]
    colors = shade_splitsum(n, scene.albedo[s], scene.roughness[s], wo, tables, specular=specular)

    def back(d_colors, grads):
        d_alb, d_rough, d_env = shade_splitsum_backward(n, scene.albedo[s], scene.roughness[s], wo, tables,
                                                        d_colors, specular=specular)
        scatter_rows(grads["albedo"], s, d_alb)
        grads["roughness"] += np.bincount(s, weights=d_rough, minlength=len(scene))
        grads["env"] += d_env.reshape(grads["env"].shape)

    return _finish(camera, rec, colors, back)


def shade_hits(scene, bvh, rec, n_s, seed, iteration, direct=True, indirect="surfel", specular=True, tables=None):
    """Monte Carlo PBR color of every hit in ``rec`` (points on the hit surfels, viewed along the ray)."""
    s = rec.surfel
    x = rec.origins[rec.ray] + rec.t[:, None] * rec.dirs[rec.ray]
    n = scene.normals[s]
    dirs = incident_directions(n, n_s, seed, iteration, rng.VIEW, rec.ray, s)
    inc = IncidentBatch(scene, bvh, x, n, s, dirs, direct=direct, indirect=indirect, tables=tables)
    return ShadingBatch(scene, s, n, -rec.dirs[rec.ray], inc, specular=specular)


def render_pbr_mc(scene, bvh, camera, n_s=64, seed=0, iteration=0, direct=True, indirect="surfel", specular=True,
                  tables=None, need_grad=True, max_rays=1 << 18):
    """Monte Carlo PBR render; ``direct``/``indirect`` isolate the two incident-light terms.

    With ``need_grad=False`` hits are shaded in chunks of at most ``max_rays``
    secondary rays to bound memory.
    """
    rec = primary_hits(scene, bvh, camera)
    if need_grad:
        sb = shade_hits(scene, bvh, rec, n_s, seed, iteration, direct, indirect, specular, tables)
        return _finish(camera, rec, sb.value, lambda d_colors, grads: sb.backward(d_colors, grads))
    colors = np.zeros((len(rec.surfel), 3))
    chunk = max(1, max_rays // max(n_s, 1))
    for start in range(0, len(rec.surfel), chunk):
        sub = _HitSlice(rec, slice(start, start + chunk))
        colors[start:start + chunk] = shade_hits(scene, bvh, sub, n_s, seed, iteration, direct, indirect, specular,
                                                 tables).value
    val = rec.composite(colors)
    return ImageRender(val.reshape(camera.height, camera.width, 3),
                       (1.0 - rec.transmittance).reshape(camera.height, camera.width), rec)


class _HitSlice:
    """A contiguous run of hits viewed with the fields ``shade_hits`` reads."""

    def __init__(self, rec, sl):
        self.origins, self.dirs = rec.origins, rec.dirs
        self.surfel, self.t, self.ray = rec.surfel[sl], rec.t[sl], rec.ray[sl]


def render_light(scene, bvh, camera, tables):
    """Blended irradiance-map lookup at viewer-facing hit normals (diffuse incident light)."""
    rec = primary_hits(scene, bvh, camera)
    n = scene.normals[rec.surfel]
    wo = -rec.dirs[rec.ray]
    n = np.where((dot(n, wo) < 0)[:, None], -n, n)
    idx = direction_to_index(n, tables.res)
    colors = tables.irradiance.reshape(-1, 3)[idx]

    def back(d_colors, grads):
        d_irr = np.zeros((6 * tables.res ** 2, 3))
        scatter_rows(d_irr, idx, d_colors)
        grads["env"] += (irradiance_operator(tables.res).T @ d_irr).reshape(grads["env"].shape)

    return _finish(camera, rec, colors, back)


def render(scene, bvh, camera, mode, tables=None, n_s=64, seed=0, specular=True, need_grad=False):
    """Dispatch on a render mode name from ``RENDER_MODES``."""
    if mode == "surfel":
        return render_surfel(scene, bvh, camera, need_grad=need_grad)
    if mode == "pbr-mc":
        return render_pbr_mc(scene, bvh, camera, n_s=n_s, seed=seed, specular=specular, need_grad=need_grad)
    if mode == "pbr-splitsum":
        return render_pbr_splitsum(scene, bvh, camera, tables, specular=specular)
    if mode in ("normal", "albedo", "rough", "depth"):
        return render_attribute(scene, bvh, camera, mode)
    raise ValueError(f"unknown render mode {mode!r}; expected one of {', '.join(RENDER_MODES)}")
