import numpy as np
import pytest

from surfelrad import presets
from surfelrad.oracle import surfel_owner
from surfelrad.scene import save_scene


def test_unknown_preset_lists_choices():
    with pytest.raises(KeyError, match="two-patch, furnace, box"):
        presets.get_preset("sponza")


@pytest.mark.parametrize("name", presets.PRESET_NAMES)
def test_presets_are_diffuse_and_fully_surfelized(name):
    pr = presets.get_preset(name)
    scene = pr.surfel_scene()
    assert not pr.specular
    assert np.all(surfel_owner(pr.patches, scene) >= 0)
    assert len(scene.cameras) == len(pr.cameras) and len(scene) < 50_000


def test_generation_is_seed_deterministic(tmp_path):
    pr = presets.furnace()
    a = pr.surfel_scene(with_images=True, spp=4, seed=3)
    b = pr.surfel_scene(with_images=True, spp=4, seed=3)
    c = pr.surfel_scene(with_images=True, spp=4, seed=4)
    for name, scene in (("a", a), ("b", b)):
        (tmp_path / name).mkdir()
        save_scene(scene, tmp_path / name / "scene.json")
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert not np.array_equal(a.images[0], c.images[0])


def test_furnace_reference_image_is_albedo():
    pr = presets.furnace()
    img = pr.surfel_scene(with_images=True, spp=256).images[0]
    seen = img[img.sum(-1) > 0]
    assert len(seen) > 100
    np.testing.assert_allclose(seen.mean(), 0.5, rtol=0.01)


def test_box_walls_are_colored():
    pr = presets.box()
    colors = [r.albedo for r in pr.patches.rects]
    assert colors[1][0] > colors[1][1] and colors[2][1] > colors[2][0]
