"""End-to-end acceptance criteria, each at its stated tolerance.

Every test appends one PASS/FAIL line to ``ACCEPTANCE`` (printed in the
terminal summary) before asserting, so a failing criterion still reports
its measured numbers. Runtime bounds are checked on this machine as-is.
"""
import os
import subprocess
import sys
import time
from dataclasses import replace

import numba
import numpy as np
import pytest

from surfelrad import metrics, oracle, presets
from surfelrad.cli import main as cli_main
from surfelrad.config import RunConfig
from surfelrad.cubemap import EnvironmentCubemap
from surfelrad.losses import STAGE_TERMS
from surfelrad.optim import TrainSchedule, objective_step, relight_finetune, run_stage
from surfelrad.radiometry import pbr_radiance, radiometric_loss
from surfelrad.render import render_pbr_mc, render_surfel
from surfelrad.scene import PARAM_CLASSES, Camera, Scene, param_array
from surfelrad.shading import eval_brdf, precompute_splitsum, shade_splitsum
from surfelrad.sh import hemisphere_mean
from surfelrad.tracer import blend, build_bvh, render_radiance, trace_rays
from surfelrad.vecmath import normalize

from conftest import ACCEPTANCE, random_scene

pytestmark = pytest.mark.acceptance

# the box evaluation camera sits inside the opening so every pixel sees a wall
BOX_EVAL_CAMERA = dict(eye=[0, 0, -1.2], target=[0, 0, 0], up=[0, 1, 0], fov=40)


def record(number, ok, detail):
    ACCEPTANCE.append(f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {detail}")
    return ok


def furnace_surfel():
    return Scene([[0, 0, 0]], [[1, 0, 0]], [[0, 1, 0]], [[0.1, 0.1]], [0.9], np.zeros((1, 16, 3)), [[0.5] * 3],
                 [1.0], EnvironmentCubemap.constant(1.0, 8))


def test_c01_furnace_identity():
    scene = furnace_surfel()
    bvh = build_bvh(scene)
    pbr_radiance(scene, bvh, [0], [[0, 0, 1.0]], n_s=64)  # compile outside the timed call
    t0 = time.perf_counter()
    est = pbr_radiance(scene, bvh, [0], [[0, 0, 1.0]], n_s=4096, seed=11)
    dt = time.perf_counter() - t0
    err = float(np.max(np.abs(est.diffuse / 0.5 - 1)))
    ok = err < 0.02 and dt < 1.0
    assert record(1, ok, f"furnace diffuse radiance {est.diffuse[0].round(4)} rel err {err:.4f} (<0.02), "
                         f"{dt:.3f} s (<1 s)")


@pytest.fixture(scope="module")
def two_patch():
    pr = presets.two_patch()
    return pr, pr.surfel_scene(with_images=True, spp=64)


def test_c02_radiosity_fixed_point(two_patch):
    pr, base = two_patch
    scene = base.copy()
    bvh = build_bvh(scene)
    cfg = RunConfig(specular=False, lr_sh=0.01)
    t0 = time.perf_counter()
    run_stage(scene, TrainSchedule("relight", 3000, ("sh",)), cfg, bvh)
    dt = time.perf_counter() - t0
    ref = oracle.radiosity_reference(pr.patches, subdivisions=16)
    owner = oracle.surfel_owner(pr.patches, scene)
    diffuse = hemisphere_mean(scene.sh, scene.normals)
    errs = [float(np.max(np.abs(diffuse[owner == k].mean(axis=0) / ref.patch_mean(k) - 1))) for k in (0, 1)]
    ok = errs[1] < 0.05 and dt < 600
    assert record(2, ok, f"receiver radiance {diffuse[owner == 1].mean():.5f} vs radiosity "
                         f"{ref.patch_mean(1)[0]:.5f}, rel err {errs[1]:.4f} (<0.05; lit patch {errs[0]:.4f}), "
                         f"3000 iters in {dt:.0f} s (<600 s)")


@pytest.fixture(scope="module")
def box_fixed_point():
    """Box preset with SH trained to radiometric consistency under its own environment."""
    pr = presets.box()
    scene = pr.surfel_scene()
    bvh = build_bvh(scene)
    t0 = time.perf_counter()
    run_stage(scene, TrainSchedule("relight", 800, ("sh",)), RunConfig(specular=False, lr_sh=0.01, n_g=512), bvh)
    return pr, scene, bvh, time.perf_counter() - t0


def box_camera(res):
    c = BOX_EVAL_CAMERA
    return Camera.look_at(c["eye"], c["target"], c["up"], res, res, c["fov"])


def test_c03_interreflection(box_fixed_point):
    pr, scene, bvh, train_time = box_fixed_point
    cam = box_camera(64)
    t0 = time.perf_counter()
    ours = render_pbr_mc(scene, bvh, cam, n_s=128, direct=False, specular=False, need_grad=False).value
    dt = train_time + time.perf_counter() - t0
    ref, vis = oracle.path_trace_image(pr.patches, cam, spp=1024, bounces=8, seed=1, indirect_only=True)
    psnr = metrics.psnr(ours, ref)
    ok = psnr >= 30 and dt < 600 and vis.all()
    assert record(3, ok, f"box indirect-only PSNR {psnr:.2f} dB (>=30) at 64x64, train+render {dt:.0f} s (<600 s)")


def test_c04_gradients():
    scene = random_scene(40, seed=21, env_res=4, cameras=1, res=12)
    gen = np.random.default_rng(22)
    scene.images = [gen.uniform(0, 1, size=(12, 12, 3))]
    bvh = build_bvh(scene)
    # distortion and the normal terms only touch geometry, which is fixed, so they carry no gradient
    terms = tuple(t for t in STAGE_TERMS["inverse"] if t not in ("dist", "normal", "nsmooth"))
    schedule = TrainSchedule("inverse", 1, PARAM_CLASSES, terms)
    cfg = RunConfig(n_g=24, n_s=16, n_s_render=8)
    t0 = time.perf_counter()
    grads = objective_step(scene, bvh, schedule, cfg, 5).grads

    def objective():
        return objective_step(scene, bvh, schedule, cfg, 5).total

    worst, checked = 0.0, 0
    for name in PARAM_CLASSES:
        g = grads[name].reshape(-1)
        arr = param_array(scene, name)
        for k in gen.choice(np.flatnonzero(np.abs(g) > 1e-6), 20, replace=False):
            fd = oracle.finite_diff_gradient(objective, arr, k, step=1e-6)
            worst = max(worst, abs(g[k] - fd) / max(abs(fd), 1e-12))
            checked += 1
    dt = time.perf_counter() - t0
    ok = checked == 100 and worst < 1e-3 and dt < 300
    assert record(4, ok, f"{checked} parameters over {len(PARAM_CLASSES)} classes, worst rel err {worst:.2e} "
                         f"(<1e-3), {dt:.0f} s (<300 s)")


def stacked_scene(n=600, seed=5):
    """Faint surfels stacked along z so most rays cross far more than one buffer of hits."""
    gen = np.random.default_rng(seed)
    nrm = normalize(np.array([0, 0, 1.0]) + 0.3 * gen.normal(size=(n, 3)))
    tu = normalize(np.cross(nrm, gen.normal(size=(n, 3))))
    tv = np.cross(nrm, tu)
    p = np.c_[gen.uniform(-0.5, 0.5, (n, 2)), gen.uniform(0, 4, n)]
    return Scene(p, tu, tv, gen.uniform(0.2, 0.5, (n, 2)), gen.uniform(0.02, 0.12, n), gen.normal(size=(n, 16, 3)),
                 np.full((n, 3), 0.5), np.full(n, 0.5), EnvironmentCubemap.constant(1.0, 4))


def test_c05_tracer_equivalence():
    scene = stacked_scene()
    bvh = build_bvh(scene)
    gen = np.random.default_rng(6)
    m = 3000
    o = np.c_[gen.uniform(-0.4, 0.4, (m, 2)), gen.uniform(-1.0, 4.0, m)]
    d = normalize(np.c_[0.1 * gen.normal(size=(m, 2)), np.ones(m)])
    rec = trace_rays(scene, bvh, o, d, t_min=0.0)
    fast, fast_T = render_radiance(scene, bvh, o, d)
    val = blend(scene, rec, "radiance")
    many = np.flatnonzero(rec.hit_counts > 16)[:1000]
    few = np.flatnonzero((rec.hit_counts <= 16) & (rec.hit_counts > 0))
    worst, exact_few = 0.0, True
    for r in np.concatenate([many, few]):
        ref = oracle.sorted_blend_reference(scene, o[r], d[r])
        s, e = rec.offsets[r], rec.offsets[r + 1]
        worst = max(worst, float(np.abs(ref.radiance - val[r]).max()), float(np.abs(ref.radiance - fast[r]).max()))
        if rec.hit_counts[r] <= 16:
            exact_few &= (np.array_equal(ref.surfel, rec.surfel[s:e]) and np.array_equal(ref.t, rec.t[s:e])
                          and np.array_equal(ref.response, rec.response[s:e])
                          and np.array_equal(ref.radiance, fast[r]) and ref.transmittance == fast_T[r])
    ok = len(many) == 1000 and len(few) > 0 and worst < 1e-6 and exact_few
    assert record(5, ok, f"{len(many)} rays with >16 hits (max {rec.hit_counts.max()}): max channel diff "
                         f"{worst:.1e} (<1e-6); {len(few)} rays with <=16 hits bit-exact: {exact_few}")


def final_rad_loss(scene, bvh, cfg):
    rc = replace(cfg.rad("inverse"), n_g=1024, detach_surfel=False, detach_pbr=False, seed=999)
    centers = [c.center for c in scene.cameras]
    return float(np.mean([radiometric_loss(scene, bvh, rc, k, centers).value for k in range(10)]))


def test_c06_detach_ablations(two_patch):
    _, base = two_patch
    bvh = build_bvh(base)
    rows, ok = [], True
    for seed in range(3):
        final = {}
        for name, flags in (("full", {}), ("detach_LG", {"detach_surfel": True}), ("detach_PBR", {"detach_pbr": True})):
            scene = base.copy()
            cfg = RunConfig(specular=False, seed=seed, lr_sh=0.01, **flags)
            run_stage(scene, TrainSchedule("inverse", 300), cfg, bvh)
            final[name] = final_rad_loss(scene, bvh, cfg)
        ok &= final["full"] < final["detach_LG"] and final["full"] < final["detach_PBR"]
        rows.append(" ".join(f"{k}={v:.4f}" for k, v in final.items()))
    assert record(6, ok, "final L_rad after 300 inverse iters, full below both detached in every seed: "
                         + "; ".join(f"seed {s}: {r}" for s, r in enumerate(rows)))


def test_c07_splitsum_fidelity():
    env = EnvironmentCubemap.from_function(
        lambda d: 0.3 + 0.7 * np.maximum(d[..., 2:3], 0) * np.array([1.0, 0.9, 0.7])
        + 0.2 * np.maximum(d[..., 0:1], 0) * np.array([0.5, 0.6, 1.0]))
    tables = precompute_splitsum(env)
    n = np.array([0, 0, 1.0])
    albedo = np.full(3, 0.5)
    gen = np.random.default_rng(7)
    errs = []
    spec_errs = []
    for r in (0.2, 0.4, 0.7, 1.0):
        for nv in (0.2, 0.4, 0.7, 0.95):
            wo = np.array([np.sqrt(1 - nv * nv), 0.0, nv])
            N = 10_000
            u1, u2 = gen.uniform(size=N), gen.uniform(size=N)
            s = np.sqrt(1 - u1 ** 2)
            wi = np.stack([s * np.cos(2 * np.pi * u2), s * np.sin(2 * np.pi * u2), u1], -1)
            b = eval_brdf(np.broadcast_to(albedo, (N, 3)), np.full(N, r), np.broadcast_to(n, (N, 3)),
                          np.broadcast_to(wo, (N, 3)), wi)
            li = env.lookup(wi) * (u1 * 2 * np.pi)[:, None]  # cosine over the uniform pdf
            mc, mc_spec = (li * b.value).mean(0), (li * b.specular).mean(0)
            total, _, spec = shade_splitsum(n, albedo, r, wo, tables, with_parts=True)
            errs.append(np.mean(np.abs(total - mc) / mc))
            spec_errs.append(np.mean(np.abs(spec - mc_spec) / mc_spec))
    err = float(np.mean(errs))
    assert record(7, err < 0.10, f"4x4 (roughness, n.v) grid, albedo 0.5: mean rel L1 {err:.4f} (<0.10); "
                                 f"specular lobe alone {np.mean(spec_errs):.4f}")


def test_c08_relight_finetune(box_fixed_point):
    pr, fixed, bvh, _ = box_fixed_point
    scene = fixed.copy()
    # default SH rate: a larger step leaves Adam jittering around the new optimum on the L1 residual
    cfg = RunConfig(specular=False, n_g=512)
    scene, curve = relight_finetune(scene, pr.new_env, iters=800, cfg=cfg, bvh=bvh)
    windows = curve[: len(curve) // 50 * 50].reshape(-1, 50).mean(axis=1)
    frac = float(np.mean(np.diff(windows) < 0))
    cam = box_camera(64)
    surf = render_surfel(scene, bvh, cam, need_grad=False).value
    pbr = render_pbr_mc(scene, bvh, cam, n_s=1024, specular=False, need_grad=False).value
    psnr = metrics.psnr(surf, pbr)
    wide = Camera.look_at([0, 0, -2.0], [0, 0, 0], [0, 1, 0], 256, 256, 40)
    render_surfel(scene, bvh, wide, need_grad=False)
    times = []
    for _ in range(10):
        t0 = time.perf_counter()
        render_surfel(scene, bvh, wide, need_grad=False)
        times.append(time.perf_counter() - t0)
    ms = 1e3 * float(np.median(times))
    ok = psnr >= 30 and frac >= 0.8 and ms < 10 and len(scene) <= 50_000
    assert record(8, ok, f"surfel vs pbr-mc PSNR {psnr:.2f} dB (>=30); L_rad windows decreasing {frac:.2f} (>=0.8); "
                         f"surfel frame {ms:.1f} ms (<10) at 256x256, {len(scene)} surfels, "
                         f"{numba.get_num_threads()} thread(s) on {os.cpu_count()} core(s)")


def test_c09_monte_carlo_scaling():
    scene = furnace_surfel()
    bvh = build_bvh(scene)
    counts = np.array([64, 256, 1024])
    std = np.array([np.std([pbr_radiance(scene, bvh, [0], [[0, 0, 1.0]], n_s=n, seed=s, specular=False)
                            .value[0, 0] for s in range(100)], ddof=1) for n in counts])
    # least-squares fit of std = c / sqrt(N), then every point within 20% of the fit
    x = 1 / np.sqrt(counts)
    c = float(x @ std / (x @ x))
    dev = np.abs(std / (c * x) - 1)
    slope = float(np.polyfit(np.log(counts), np.log(std), 1)[0])
    ok = bool(np.all(dev < 0.2))
    assert record(9, ok, f"std {std.round(5)} at N_s {counts.tolist()}, max deviation from c/sqrt(N) "
                         f"{dev.max():.3f} (<0.2), log-log slope {slope:.3f}")


def test_c10_determinism(tmp_path):
    assert cli_main(["gen-scene", "--preset", "two-patch", "--out", str(tmp_path / "scene"), "--spp", "8"]) == 0
    logs = []
    for threads in (1, 4):
        out = tmp_path / f"t{threads}"
        env = dict(os.environ, NUMBA_NUM_THREADS=str(threads))
        for stage, scene in (("init", tmp_path / "scene" / "scene.json"), ("inverse", out / "init.json")):
            cmd = [sys.executable, "-m", "surfelrad.cli", "train", "--stage", stage, "--scene", str(scene),
                   "--out", str(out), "--iters", "20", "--set", "n_g=64", "--set", "n_s=16",
                   "--set", f"threads={threads}"]
            subprocess.run(cmd, env=env, check=True, capture_output=True)
        logs.append([(out / f"{s}_loss.csv").read_bytes() for s in ("init", "inverse")])
    ok = logs[0] == logs[1]
    assert record(10, ok, f"init+inverse loss logs with 1 and 4 threads byte-identical: {ok}")
