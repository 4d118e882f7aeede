"""Adam over registered parameter classes, the two training stages and relighting by finetuning.

Geometry never changes during optimization, so one BVH serves a whole run.
"""
import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng
from .config import RunConfig
from .losses import (STAGE_TERMS, distortion_loss, edge_aware_smooth_grad, edge_aware_smooth_loss, light_prior_grad,
                     normal_depth_loss, recon_loss_grad, sparsity_loss_grad, stage_objective, term_weight)
from .radiometry import radiometric_loss
from .render import render_attribute, render_light, render_pbr_mc, render_pbr_splitsum, render_surfel
from .scene import ALPHA_MAX, ALPHA_MIN, PARAM_CLASSES, param_array, save_scene, zero_grads
from .shading import precompute_splitsum
from .tracer import build_bvh

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
DIVERGENCE_LIMIT = 1e6
REINIT_VALUE = 0.5
CHECKPOINT_MAGIC = b"RGSOPT1\n"
TRAIN_VIEW = 7  # rng stream for choosing the training view


class NumericalError(RuntimeError):
    """Non-finite gradient or diverging loss; ``checkpoint`` names the last good state, if any."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


@dataclass
class ParamView:
    name: str
    value: np.ndarray
    grad: np.ndarray
    lr: float

    def project(self):
        v = self.value
        if self.name in ("albedo", "roughness"):
            np.clip(v, 0.0, 1.0, out=v)
        elif self.name == "opacity":
            np.clip(v, ALPHA_MIN, ALPHA_MAX, out=v)
        elif self.name == "env":
            np.maximum(v, 0.0, out=v)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def like(cls, arr):
        return cls(np.zeros_like(arr), np.zeros_like(arr))


def param_views(scene, grads, rates, trainable):
    return [ParamView(k, param_array(scene, k), grads[k], rates[k]) for k in PARAM_CLASSES if k in trainable]


def adam_step(views, states):
    """One bias-corrected Adam update per view, then projection onto the valid range."""
    for view in views:
        st = states[view.name]
        st.step += 1
        g = view.grad
        st.m *= ADAM_BETA1
        st.m += (1 - ADAM_BETA1) * g
        st.v *= ADAM_BETA2
        st.v += (1 - ADAM_BETA2) * g * g
        mhat = st.m / (1 - ADAM_BETA1 ** st.step)
        vhat = st.v / (1 - ADAM_BETA2 ** st.step)
        view.value -= view.lr * mhat / (np.sqrt(vhat) + ADAM_EPS)
        view.project()


def check_gradients(grads):
    for name in PARAM_CLASSES:
        bad = ~np.isfinite(grads[name])
        if np.any(bad):
            idx = np.unravel_index(int(np.argmax(bad)), bad.shape)
            raise NumericalError(f"non-finite gradient in {name} at index {tuple(int(i) for i in idx)}")


@dataclass
class TrainSchedule:
    stage: str
    iterations: int
    trainable: tuple = PARAM_CLASSES
    terms: tuple = None

    def __post_init__(self):
        if self.stage not in STAGE_TERMS:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.stage == "relight" and tuple(self.trainable) != ("sh",):
            raise ValueError("the relight stage trains sh only")
        if self.terms is None:
            self.terms = tuple(STAGE_TERMS[self.stage])

    @classmethod
    def for_stage(cls, stage, cfg):
        trainable = ("sh",) if stage == "relight" else PARAM_CLASSES
        return cls(stage, cfg.iterations(stage), trainable)


@dataclass
class StepResult:
    components: dict
    total: float
    grads: dict = field(repr=False, default=None)


def _pick_view(scene, cfg, iteration):
    views = [k for k, im in enumerate(scene.images) if im is not None]
    if not views:
        return None
    return views[min(int(rng.uniform(cfg.seed, iteration, TRAIN_VIEW) * len(views)), len(views) - 1)]


def objective_step(scene, bvh, schedule, cfg, iteration, weights=None):
    """Evaluate every active loss term and accumulate the weighted gradient of the stage objective."""
    stage = schedule.stage
    weights = weights or cfg.weights(stage)
    terms = set(schedule.terms)
    grads = zero_grads(scene)
    comp = {}
    centers = [c.center for c in scene.cameras]
    rad_cfg = cfg.rad(stage)
    tables = None
    if stage != "relight" or "light" in terms:
        tables = precompute_splitsum(scene.env)
    view = _pick_view(scene, cfg, iteration) if stage != "relight" else None
    if view is not None:
        cam, ref = scene.cameras[view], scene.images[view]
        surf = render_surfel(scene, bvh, cam)
        if "recon" in terms:
            comp["recon"], d = recon_loss_grad(surf.value, ref)
            surf.backward(d * term_weight(stage, "recon", weights), grads)
        if "recon_pbr" in terms:
            if stage == "init":
                pbr = render_pbr_splitsum(scene, bvh, cam, tables, specular=cfg.specular)
            else:
                pbr = render_pbr_mc(scene, bvh, cam, n_s=cfg.n_s_render, seed=cfg.seed, iteration=iteration,
                                    specular=cfg.specular)
            comp["recon_pbr"], d = recon_loss_grad(pbr.value, ref)
            pbr.backward(d * term_weight(stage, "recon_pbr", weights), grads)
        rec = surf.records
        if "dist" in terms:
            comp["dist"] = distortion_loss(rec)
        if "normal" in terms or "nsmooth" in terms:
            # geometry-only terms: reported, no gradient (geometry is fixed)
            wsum = 1.0 - rec.transmittance
            depth = np.where(wsum >= 1e-8, rec.composite(rec.t) / np.maximum(wsum, 1e-300), 0.0)
            if "normal" in terms:
                comp["normal"] = normal_depth_loss(rec, depth, scene.normals[rec.surfel],
                                                   (cam.height, cam.width))
            if "nsmooth" in terms:
                nimg = rec.composite(scene.normals[rec.surfel]).reshape(cam.height, cam.width, 3)
                comp["nsmooth"] = edge_aware_smooth_loss(nimg, ref)
        for term, mode in (("albedo_smooth", "albedo"), ("rough_smooth", "rough")):
            if term in terms:
                img = render_attribute(scene, bvh, cam, mode)
                comp[term], d = edge_aware_smooth_grad(img.value, ref)
                img.backward(d * term_weight(stage, term, weights), grads)
        if "light" in terms:
            img = render_light(scene, bvh, cam, tables)
            comp["light"], d = light_prior_grad(img.value)
            img.backward(d * term_weight(stage, "light", weights), grads)
    if "sparsity" in terms:
        comp["sparsity"], d = sparsity_loss_grad(scene.opacity)
        grads["opacity"] += d * term_weight(stage, "sparsity", weights)
    if "rad" in terms:
        est = "splitsum" if stage == "init" else "mc"
        lr = radiometric_loss(scene, bvh, rad_cfg, iteration, centers, estimator=est, tables=tables)
        comp["rad"] = lr.value
        lr.backward(grads, term_weight(stage, "rad", weights))
    for k in terms:
        comp.setdefault(k, 0.0)
    total = stage_objective(stage, comp, weights)
    return StepResult(comp, total, grads)


def write_checkpoint(scene, states, iteration, path):
    """Scene JSON at ``path`` plus the optimizer state in ``<path>.opt``."""
    path = Path(path)
    save_scene(scene, path)
    with open(path.with_suffix(".opt"), "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", iteration, len(states)))
        for name in PARAM_CLASSES:
            if name not in states:
                continue
            st = states[name]
            enc = name.encode()
            f.write(struct.pack("<I", len(enc)) + enc)
            f.write(struct.pack("<IQ", st.step, st.m.size))
            f.write(np.ascontiguousarray(st.m, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(st.v, dtype="<f8").tobytes())
    return path


def read_checkpoint_state(path, scene):
    """Optimizer state written by ``write_checkpoint``; returns ``(iteration, states)``."""
    with open(Path(path).with_suffix(".opt"), "rb") as f:
        if f.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not an optimizer checkpoint")
        iteration, count = struct.unpack("<II", f.read(8))
        states = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", f.read(4))
            name = f.read(n).decode()
            step, size = struct.unpack("<IQ", f.read(12))
            shape = param_array(scene, name).shape
            m = np.frombuffer(f.read(8 * size), dtype="<f8").reshape(shape).copy()
            v = np.frombuffer(f.read(8 * size), dtype="<f8").reshape(shape).copy()
            states[name] = AdamState(m, v, step)
    return iteration, states


def reinitialize_materials(scene, value=REINIT_VALUE):
    scene.albedo[:] = value
    scene.roughness[:] = value
    scene.env.faces[:] = value
    return scene


@dataclass
class StageLog:
    columns: list
    rows: list = field(default_factory=list)

    def column(self, name):
        i = self.columns.index(name)
        return np.array([r[i] for r in self.rows])

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.columns)
            for r in self.rows:
                w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])


def run_stage(scene, schedule, cfg=None, bvh=None, log_path=None, checkpoint_path=None, reinit=None,
              progress=None):
    """Run ``schedule.iterations`` optimizer steps in place on ``scene``; returns ``(scene, log)``.

    Divergence (loss above 1e6 or non-finite) raises ``NumericalError``
    carrying the last checkpoint written, if any.
    """
    cfg = cfg or RunConfig()
    bvh = bvh or build_bvh(scene)
    reinit = cfg.reinit if reinit is None else reinit
    if reinit and schedule.stage in ("init", "inverse"):
        reinitialize_materials(scene)
    weights = cfg.weights(schedule.stage)
    rates = cfg.learning_rates()
    states = {k: AdamState.like(param_array(scene, k)) for k in schedule.trainable}
    log = StageLog(["iteration"] + list(schedule.terms) + ["total"])
    last_ckpt = None
    for it in range(schedule.iterations):
        step = objective_step(scene, bvh, schedule, cfg, it, weights)
        if not np.isfinite(step.total) or step.total > DIVERGENCE_LIMIT:
            raise NumericalError(f"loss diverged at iteration {it} (total={step.total!r})", last_ckpt)
        try:
            check_gradients(step.grads)
        except NumericalError as exc:
            raise NumericalError(f"{exc} at iteration {it}", last_ckpt) from None
        log.rows.append([it] + [step.components[k] for k in schedule.terms] + [step.total])
        adam_step(param_views(scene, step.grads, rates, schedule.trainable), states)
        if checkpoint_path and cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            last_ckpt = write_checkpoint(scene, states, it + 1, checkpoint_path)
        if progress:
            progress(it, step)
    if checkpoint_path:
        write_checkpoint(scene, states, schedule.iterations, checkpoint_path)
    if log_path:
        log.write_csv(log_path)
    return scene, log


def relight_finetune(scene, new_env, iters=None, cfg=None, bvh=None, log_path=None, checkpoint_path=None):
    """Swap in ``new_env`` and adapt only the SH radiances by minimizing the radiometric loss.

    Returns ``(scene, rad_curve)`` where the curve holds L_rad per iteration.
    """
    cfg = cfg or RunConfig()
    scene.env = new_env.copy()
    schedule = TrainSchedule("relight", cfg.iters_relight if iters is None else iters, ("sh",))
    scene, log = run_stage(scene, schedule, cfg, bvh, log_path, checkpoint_path, reinit=False)
    return scene, log.column("rad")
