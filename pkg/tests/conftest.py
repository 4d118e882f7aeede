import numpy as np
import pytest

from surfelrad.cubemap import EnvironmentCubemap
from surfelrad.scene import Camera, Scene
from surfelrad.vecmath import normalize


def random_frames(gen, n):
    """Random orthonormal tangent pairs."""
    a = normalize(gen.normal(size=(n, 3)))
    b = normalize(np.cross(a, gen.normal(size=(n, 3))))
    return a, b


def random_scene(n=40, seed=0, extent=1.0, env_res=8, cameras=1, res=12):
    gen = np.random.default_rng(seed)
    tu, tv = random_frames(gen, n)
    env = EnvironmentCubemap(gen.uniform(0.2, 1.5, size=(6, env_res, env_res, 3)))
    cams = [Camera.look_at(gen.normal(size=3) * 0.3 + [0, 0, -3], [0, 0, 0], [0, 1, 0], res, res, 50)
            for _ in range(cameras)]
    return Scene(gen.uniform(-extent, extent, size=(n, 3)), tu, tv, gen.uniform(0.1, 0.3, size=(n, 2)),
                 gen.uniform(0.3, 0.95, size=n), gen.normal(scale=0.3, size=(n, 16, 3)),
                 gen.uniform(0.1, 0.9, size=(n, 3)), gen.uniform(0.2, 0.9, size=n), env, cams)


def single_surfel_scene(p=(0, 0, 0), tu=(1, 0, 0), tv=(0, 1, 0), s=(1, 1), alpha=0.5, sh=None, env=None):
    sh = np.zeros((16, 3)) if sh is None else sh
    env = env or EnvironmentCubemap.constant(0.0, 4)
    return Scene([p], [tu], [tv], [s], [alpha], [sh], [[0.5, 0.5, 0.5]], [0.5], env)


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
