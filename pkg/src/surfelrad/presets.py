"""Built-in test scenes: two facing patches, a furnace patch and an open colored box.

Each preset is a set of analytic rectangles (for the oracles), a dense
surfel version of them, training cameras and a second environment for
relighting. All presets are diffuse.
"""
from dataclasses import dataclass

import numpy as np

from .cubemap import EnvironmentCubemap
from .oracle import PatchScene, Rect, path_trace_image, surfelize
from .scene import Camera

PRESET_NAMES = ("two-patch", "furnace", "box")
TRAIN_RES = 32


@dataclass
class Preset:
    name: str
    patches: PatchScene
    cameras: list
    new_env: EnvironmentCubemap
    specular: bool = False

    def surfel_scene(self, with_images=False, spp=64, bounces=8, seed=0):
        images = None
        if with_images:
            images = [path_trace_image(self.patches, c, spp=spp, bounces=bounces, seed=seed + k)[0]
                      for k, c in enumerate(self.cameras)]
        return surfelize(self.patches, cameras=self.cameras, images=images)


def _ring_cameras(center, radius, height, count, res, fov, up=(0, 0, 1)):
    cams = []
    for k in range(count):
        phi = 2 * np.pi * (k + 0.5) / count
        eye = np.array(center) + np.array([radius * np.cos(phi), radius * np.sin(phi), height])
        cams.append(Camera.look_at(eye, center, up, res, res, fov))
    return cams


def two_patch():
    """Unit squares at z=0 (facing up) and z=1 (facing down); light only arrives from above."""
    bottom = Rect([0, 0, 0], [0.5, 0, 0], [0, 0.5, 0], albedo=0.8)
    top = Rect([0, 0, 1], [0, 0.5, 0], [0.5, 0, 0], albedo=0.8)
    env = EnvironmentCubemap.from_function(lambda d: np.where(d[..., 2:3] > 0, 1.0, 0.0) * np.ones(3))
    new_env = EnvironmentCubemap.from_function(lambda d: np.where(d[..., 2:3] > 0, 2.0, 0.0) * np.ones(3))
    cams = _ring_cameras(np.array([0, 0, 0.5]), 1.4, 0.0, 4, TRAIN_RES, 70)
    return Preset("two-patch", PatchScene([bottom, top], env), cams, new_env)


def furnace():
    """A single gray patch under a uniform white sky."""
    patch = Rect([0, 0, 0], [0.5, 0, 0], [0, 0.5, 0], albedo=0.5)
    cams = [Camera.look_at([0.3, 0.2, 2.0], [0, 0, 0], [0, 1, 0], TRAIN_RES, TRAIN_RES, 40)]
    return Preset("furnace", PatchScene([patch], EnvironmentCubemap.constant(1.0)), cams,
                  EnvironmentCubemap.constant(2.0))


def _box_env(d):
    front = np.maximum(-d[..., 2:3], 0.0)
    return 0.05 + 2.0 * front ** 2 * np.ones(3)


def _box_new_env(d):
    side = np.maximum(-0.6 * d[..., 2:3] + 0.8 * d[..., 0:1], 0.0)
    return 0.08 + 3.0 * side ** 2 * np.array([1.0, 0.85, 0.6])


def box():
    """Five walls of the unit cube around the origin, open toward -z; red left and green right walls.

    Walls overrun the closed seams by 0.1 so soft surfel edges do not leak light.
    """
    e = 0.1
    h, d = 0.5 + e, 0.5 + e / 2
    gray, red, green = np.full(3, 0.7), np.array([0.75, 0.15, 0.1]), np.array([0.1, 0.7, 0.15])
    zc = e / 2  # walls reach from the opening at z=-0.5 to z=0.5+e
    rects = [
        Rect([0, 0, 0.5], [0, h, 0], [h, 0, 0], albedo=gray),          # back, faces -z
        Rect([-0.5, 0, zc], [0, h, 0], [0, 0, d], albedo=red),         # left, faces +x
        Rect([0.5, 0, zc], [0, 0, d], [0, h, 0], albedo=green),        # right, faces -x
        Rect([0, -0.5, zc], [0, 0, d], [h, 0, 0], albedo=gray),        # floor, faces +y
        Rect([0, 0.5, zc], [h, 0, 0], [0, 0, d], albedo=gray),         # ceiling, faces -y
    ]
    env = EnvironmentCubemap.from_function(_box_env)
    cams = []
    for k, (dx, dy) in enumerate([(0, 0), (0.25, 0.2), (-0.25, 0.2), (0.25, -0.2), (-0.25, -0.2)]):
        cams.append(Camera.look_at([dx, dy, -2.0], [0, 0, 0], [0, 1, 0], TRAIN_RES, TRAIN_RES, 40))
    return Preset("box", PatchScene(rects, env), cams, EnvironmentCubemap.from_function(_box_new_env))


_BUILDERS = {"two-patch": two_patch, "furnace": furnace, "box": box}


def get_preset(name):
    if name not in _BUILDERS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    return _BUILDERS[name]()
