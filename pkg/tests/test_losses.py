import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from surfelrad.cubemap import EnvironmentCubemap
from surfelrad.losses import (STAGE_TERMS, LossWeights, distortion_loss, edge_aware_smooth_grad,
                              edge_aware_smooth_loss, light_prior_grad, light_prior_loss, normal_depth_loss,
                              recon_loss, recon_loss_grad, sparsity_loss, sparsity_loss_grad, ssim, stage_objective)
from surfelrad.scene import Camera, Scene
from surfelrad.tracer import HitRecords, build_bvh, render_image
from surfelrad.vecmath import normalize, tangent_frame


def fd_check(fn, x, grad, gen, count=8, h=1e-6, rel=1e-4):
    for k in gen.choice(x.size, count, replace=False):
        e = np.zeros(x.size)
        e[k] = h
        e = e.reshape(x.shape)
        fd = (fn(x + e) - fn(x - e)) / (2 * h)
        assert grad.reshape(-1)[k] == pytest.approx(fd, rel=rel, abs=1e-9)


def test_recon_identical_is_zero():
    img = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert recon_loss(img, img) == pytest.approx(0, abs=1e-12)


def test_recon_constant_offset():
    ref = np.random.default_rng(1).uniform(0, 0.8, size=(16, 16, 3))
    total = recon_loss(ref + 0.1, ref)
    l1_part = 0.8 * np.mean(np.abs(ref + 0.1 - ref))
    assert l1_part == pytest.approx(0.08, abs=1e-15)
    assert total >= 0.08


def test_recon_shape_mismatch():
    with pytest.raises(ValueError):
        recon_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


@pytest.mark.parametrize("shape", [(20, 24, 3), (13, 17, 1), (31, 15)])
def test_ssim_matches_skimage(shape):
    gen = np.random.default_rng(2)
    a = gen.uniform(size=shape)
    b = np.clip(a + gen.normal(scale=0.1, size=shape), 0, 1)
    kw = dict(gaussian_weights=True, sigma=1.5, use_sample_covariance=False, data_range=1.0)
    if len(shape) == 3:
        kw["channel_axis"] = -1
    ref = structural_similarity(a, b, **kw)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-5)


def test_recon_gradient_matches_fd():
    gen = np.random.default_rng(3)
    ref = gen.uniform(size=(12, 12, 3))
    img = ref + gen.normal(scale=0.2, size=ref.shape)
    _, g = recon_loss_grad(img, ref)
    fd_check(lambda x: recon_loss(x, ref), img, g, gen)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_recon_nonnegative_and_l1_symmetric(seed):
    gen = np.random.default_rng(seed)
    a, b = gen.uniform(size=(11, 11, 3)), gen.uniform(size=(11, 11, 3))
    assert recon_loss(a, b) >= 0
    assert np.mean(np.abs(a - b)) == np.mean(np.abs(b - a))


def records(weights_alpha, depths):
    """HitRecords for one ray with the given per-hit effective opacities and depths."""
    a = np.asarray(weights_alpha, float)
    tb = np.concatenate([[1.0], np.cumprod(1 - a)[:-1]])
    n = len(a)
    return HitRecords(np.zeros((1, 3)), np.array([[0, 0, 1.0]]), np.array([0, n]), np.arange(n),
                      np.asarray(depths, float), np.ones(n), tb, np.array([np.prod(1 - a)]), a)


def test_distortion_examples():
    assert distortion_loss(records([0.7], [3.0])) == 0
    two = records([0.5, 0.5], [1.0, 2.0])
    np.testing.assert_allclose(two.weights, [0.5, 0.25])
    assert distortion_loss(two) == pytest.approx(0.25)
    assert distortion_loss(records([0.3, 0.4, 0.2], [2.0, 2.0, 2.0])) == 0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 12))
def test_distortion_matches_pairwise_sum(seed, n):
    gen = np.random.default_rng(seed)
    a = gen.uniform(0.05, 0.6, n)
    z = np.sort(gen.uniform(0, 5, n))
    rec = records(a, z)
    w = rec.weights
    brute = np.sum(w[:, None] * w[None] * np.abs(z[:, None] - z[None]))
    assert distortion_loss(rec) == pytest.approx(brute, abs=1e-12)
    assert distortion_loss(rec) >= 0


def wall_scene(flip=False, tilt=0.0):
    g = np.linspace(-1.5, 1.5, 31)
    x, y = np.meshgrid(g, g)
    n = len(x.ravel())
    p = np.c_[x.ravel(), y.ravel(), np.zeros(n)]
    # normal toward the camera at z = -3 is -z: tu x tv = -z for tu = y, tv = x
    tu, tv = np.array([[0, 1.0, 0]] * n), np.array([[1.0, 0, 0]] * n)
    if flip:
        tu, tv = tv, tu
    scene = Scene(p, tu, tv, [[0.08, 0.08]] * n, np.full(n, 0.9), np.zeros((n, 16, 3)), np.full((n, 3), 0.5),
                  np.full(n, 0.5), EnvironmentCubemap.constant(1.0, 4))
    cam = Camera.look_at([0, 0, -3], [0, 0, 0], [0, 1, 0], 16, 16, 30)
    return scene, cam


def _nd_loss(scene, cam):
    bvh = build_bvh(scene)
    r = render_image(cam, scene, bvh, "depth", keep_records=True)
    rec = r.records
    return normal_depth_loss(rec, r.value[..., 0], scene.normals[rec.surfel], (cam.height, cam.width)), rec


def test_normal_depth_flat_wall_is_zero():
    loss, _ = _nd_loss(*wall_scene())
    assert loss == pytest.approx(0, abs=1e-9)


def test_normal_depth_flipped_wall():
    loss, rec = _nd_loss(*wall_scene(flip=True))
    # every valid pixel contributes 2 * sum of its blend weights
    per_pix = np.bincount(rec.ray, weights=rec.weights, minlength=rec.n_rays)
    assert loss == pytest.approx(2 * per_pix[per_pix > 0].mean(), rel=1e-3)


def sphere_scene(t):
    """Surfels on a unit sphere whose normals are blended from random (t=0) to analytic (t=1)."""
    gen = np.random.default_rng(0)
    n = 1500
    p = normalize(gen.normal(size=(n, 3)))
    wrong = normalize(gen.normal(size=(n, 3)))
    wrong[np.sum(wrong * p, -1) < 0] *= -1
    nrm = normalize((1 - t) * wrong + t * p + 1e-9)
    tu, tv = tangent_frame(nrm)
    return Scene(p, tu, tv, [[0.09, 0.09]] * n, np.full(n, 0.9), np.zeros((n, 16, 3)), np.full((n, 3), 0.5),
                 np.full(n, 0.5), EnvironmentCubemap.constant(1.0, 4))


def test_normal_depth_decreases_as_sphere_normals_correct():
    cam = Camera.look_at([0, 0, -4], [0, 0, 0], [0, 1, 0], 24, 24, 40)
    losses = [_nd_loss(sphere_scene(t), cam)[0] for t in np.linspace(0, 1, 5)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_edge_aware_examples():
    gen = np.random.default_rng(4)
    ref = gen.uniform(size=(10, 10, 3))
    assert edge_aware_smooth_loss(np.full((10, 10, 3), 0.3), ref) == 0
    feat = gen.uniform(size=(10, 10, 3))
    tv = (np.abs(np.diff(feat, axis=0)).mean(-1).sum() + np.abs(np.diff(feat, axis=1)).mean(-1).sum()) / 100
    assert edge_aware_smooth_loss(feat, np.zeros((10, 10, 3))) == pytest.approx(tv)
    step = np.zeros((10, 10, 3))
    step[:, 5:] = 1.0
    assert edge_aware_smooth_loss(step, 20 * step) < 1e-8
    assert edge_aware_smooth_loss(step, np.zeros_like(step)) > 0.09


def test_edge_aware_gradient_matches_fd():
    gen = np.random.default_rng(5)
    feat, ref = gen.uniform(size=(8, 9, 3)), gen.uniform(size=(8, 9, 3))
    _, g = edge_aware_smooth_grad(feat, ref)
    fd_check(lambda x: edge_aware_smooth_loss(x, ref), feat, g, gen)
    rough = gen.uniform(size=(8, 9))
    _, g1 = edge_aware_smooth_grad(rough, ref)
    fd_check(lambda x: edge_aware_smooth_loss(x, ref), rough, g1, gen)


def test_sparsity_examples():
    assert sparsity_loss([0.5]) == pytest.approx(-1.3863, abs=1e-4)
    assert sparsity_loss([1e-4]) == pytest.approx(np.log(1e-4) + np.log1p(-1e-4))
    assert sparsity_loss([1e-9]) == sparsity_loss([1e-4])
    assert sparsity_loss([1e-4]) == pytest.approx(-9.210, abs=1e-3)
    _, g = sparsity_loss_grad(np.array([0.2, 0.8]))
    # descending the loss pushes alpha toward the nearer extreme
    assert g[0] > 0 and g[1] < 0
    np.testing.assert_allclose(g, (1 / np.array([0.2, 0.8]) - 1 / np.array([0.8, 0.2])) / 2)


def test_light_prior_examples():
    assert light_prior_loss(np.full((4, 4, 3), 0.3)) == 0
    img = np.broadcast_to([0.2, 0.3, 0.4], (4, 4, 3))
    assert light_prior_loss(img) == pytest.approx(0.0667, abs=1e-4)
    assert light_prior_loss(2.5 * img) == pytest.approx(2.5 * light_prior_loss(img))


def test_light_prior_gradient_matches_fd():
    gen = np.random.default_rng(6)
    img = gen.uniform(size=(5, 6, 3))
    _, g = light_prior_grad(img)
    fd_check(light_prior_loss, img, g, gen)


def test_paper_weights():
    w = LossWeights()
    assert (w.dist, w.n, w.ns, w.m) == (1000, 0.05, 0.02, 0.05)
    assert (w.a_s, w.r_s, w.light) == (0.2, 0.1, 0.01)
    assert w.rad == 0.2
    r = LossWeights.relight()
    assert r.rad == 1.0 and stage_objective("relight", {"rad": 0.3, "recon": 5.0}, r) == 0.3


def test_stage_objective_bookkeeping():
    assert stage_objective("inverse", {}, LossWeights()) == 0
    gen = np.random.default_rng(7)
    comps = {k: float(gen.uniform()) for k in STAGE_TERMS["inverse"]}
    w = LossWeights()
    attrs = {"recon": 1.0, "recon_pbr": 1.0, "rad": w.rad, "dist": w.dist, "normal": w.n, "nsmooth": w.ns,
             "sparsity": w.m, "albedo_smooth": w.a_s, "rough_smooth": w.r_s, "light": w.light}
    assert stage_objective("inverse", comps, w) == pytest.approx(sum(attrs[k] * v for k, v in comps.items()),
                                                                abs=1e-9)
    init = sum(attrs[k] * comps[k] for k in STAGE_TERMS["init"])
    assert stage_objective("init", comps, w) == pytest.approx(init, abs=1e-9)
    with pytest.raises(ValueError):
        stage_objective("warmup", comps, w)


def test_negative_weight_rejected():
    with pytest.raises(ValueError):
        LossWeights(rad=-1)
