"""Surfels, cameras and scenes, plus the JSON scene format.

A scene stores its surfels as parallel arrays (one row per surfel); the
``Surfel`` record is the per-primitive view used for construction and I/O.
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cubemap import EnvironmentCubemap
from .imageio import read_env_pfm, read_pfm, write_env_pfm, write_pfm
from .sh import N_COEFFS

ALPHA_MIN = 1e-4
ALPHA_MAX = 1.0 - 1e-4
UNIT_TOL = 1e-6

# optimizable parameter classes, in a fixed order used by logs and checkpoints
PARAM_CLASSES = ("sh", "albedo", "roughness", "opacity", "env")


class SceneFormatError(ValueError):
    """A scene file is malformed or violates a scene invariant."""


@dataclass
class Surfel:
    p: np.ndarray
    tu: np.ndarray
    tv: np.ndarray
    s: np.ndarray
    alpha: float
    sh: np.ndarray = field(default_factory=lambda: np.zeros((N_COEFFS, 3)))
    albedo: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))
    rough: float = 0.5

    @property
    def normal(self):
        return surfel_normal(self)


def surfel_normal(s):
    """Unit normal ``t_u x t_v`` of a surfel."""
    return np.cross(np.asarray(s.tu, dtype=np.float64), np.asarray(s.tv, dtype=np.float64))


@dataclass
class Camera:
    """Pinhole camera; OpenCV axes (x right, y down, z forward)."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_from_cam: np.ndarray

    def __post_init__(self):
        self.world_from_cam = np.asarray(self.world_from_cam, dtype=np.float64).reshape(4, 4)
        r = self.world_from_cam[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=UNIT_TOL):
            raise ValueError("camera rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("camera focal lengths must be positive")

    @property
    def center(self):
        return self.world_from_cam[:3, 3].copy()

    @classmethod
    def look_at(cls, eye, target, up, width, height, fov_deg):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        m = np.eye(4)
        m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, down, fwd, eye
        f = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
        return cls(f, f, width / 2, height / 2, width, height, m)

    def rays(self):
        """Origins and unit directions through pixel centers, each ``(H, W, 3)``."""
        j, i = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        d = np.stack([(j - self.cx) / self.fx, (i - self.cy) / self.fy, np.ones_like(j)], -1)
        d = d @ self.world_from_cam[:3, :3].T
        d /= np.linalg.norm(d, axis=-1, keepdims=True)
        o = np.broadcast_to(self.world_from_cam[:3, 3], d.shape).copy()
        return o, d

    def to_json(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "w": self.width, "h": self.height,
                "world_from_cam": [float(v) for v in self.world_from_cam.ravel()]}


class Scene:
    """Surfel arrays, an environment cubemap and an optional camera set.

    Geometry (``p``, ``tu``, ``tv``, ``scales``) is fixed; the optimizer only
    writes ``sh``, ``albedo``, ``roughness``, ``opacity`` and ``env.faces``.
    """

    def __init__(self, p, tu, tv, scales, opacity, sh, albedo, roughness, env,
                 cameras=(), images=None):
        n = len(p)
        self.p = np.array(p, dtype=np.float64).reshape(n, 3)
        self.tu = np.array(tu, dtype=np.float64).reshape(n, 3)
        self.tv = np.array(tv, dtype=np.float64).reshape(n, 3)
        self.scales = np.array(scales, dtype=np.float64).reshape(n, 2)
        self.opacity = np.array(opacity, dtype=np.float64).reshape(n)
        self.sh = np.array(sh, dtype=np.float64).reshape(n, N_COEFFS, 3)
        self.albedo = np.array(albedo, dtype=np.float64).reshape(n, 3)
        self.roughness = np.array(roughness, dtype=np.float64).reshape(n)
        self.env = env
        self.cameras = list(cameras)
        self.images = list(images) if images is not None else [None] * len(self.cameras)
        self.normals = np.cross(self.tu, self.tv)

    @classmethod
    def from_surfels(cls, surfels, env, cameras=(), images=None):
        cols = {k: [getattr(s, k) for s in surfels] for k in ("p", "tu", "tv", "s", "alpha", "sh", "albedo", "rough")}
        n = len(surfels)
        return cls(np.reshape(cols["p"], (n, 3)), np.reshape(cols["tu"], (n, 3)), np.reshape(cols["tv"], (n, 3)),
                   np.reshape(cols["s"], (n, 2)), cols["alpha"], np.reshape(cols["sh"], (n, N_COEFFS, 3)),
                   np.reshape(cols["albedo"], (n, 3)), cols["rough"], env, cameras, images)

    def __len__(self):
        return len(self.p)

    def surfel(self, i):
        return Surfel(self.p[i].copy(), self.tu[i].copy(), self.tv[i].copy(), self.scales[i].copy(),
                      float(self.opacity[i]), self.sh[i].copy(), self.albedo[i].copy(), float(self.roughness[i]))

    def copy(self):
        return Scene(self.p, self.tu, self.tv, self.scales, self.opacity, self.sh, self.albedo, self.roughness,
                     self.env.copy(), self.cameras,
                     [None if im is None else im.copy() for im in self.images])

    def with_env(self, env):
        out = self.copy()
        out.env = env
        return out

    def validate(self):
        """Raise ``SceneFormatError`` naming the first offending surfel and field."""
        checks = (
            ("position", ~np.all(np.isfinite(self.p), axis=1)),
            ("tangent tu not unit", np.abs(np.linalg.norm(self.tu, axis=1) - 1) > UNIT_TOL),
            ("tangent tv not unit", np.abs(np.linalg.norm(self.tv, axis=1) - 1) > UNIT_TOL),
            ("tangents not orthogonal", np.abs(np.sum(self.tu * self.tv, axis=1)) > UNIT_TOL),
            ("scale not positive", ~np.all(self.scales > 0, axis=1)),
            ("opacity out of range", ~((self.opacity > 0) & (self.opacity < 1))),
            ("sh not finite", ~np.all(np.isfinite(self.sh.reshape(len(self), -1)), axis=1)),
            ("albedo out of range", ~np.all((self.albedo >= 0) & (self.albedo <= 1), axis=1)),
            ("roughness out of range", ~((self.roughness >= 0) & (self.roughness <= 1))),
        )
        for what, bad in checks:
            if np.any(bad):
                raise SceneFormatError(f"{what} at surfel {int(np.argmax(bad))}")
        if not np.all(np.isfinite(self.env.faces)) or np.any(self.env.faces < 0):
            raise SceneFormatError("environment map has negative or non-finite texels")
        return self


def param_array(scene, name):
    """The live array holding parameter class ``name`` (writes go straight into the scene)."""
    if name == "env":
        return scene.env.faces
    if name not in PARAM_CLASSES:
        raise KeyError(f"unknown parameter class {name!r}")
    return getattr(scene, name)


def zero_grads(scene):
    return {name: np.zeros_like(param_array(scene, name)) for name in PARAM_CLASSES}


def _reals(obj, key, n, index):
    val = obj.get(key)
    if val is None:
        raise SceneFormatError(f"missing field '{key}' at surfel {index}")
    if isinstance(val, (int, float)) and n == 1:
        val = [val]
    if not isinstance(val, list) or len(val) != n or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                                                             for v in val):
        raise SceneFormatError(f"field '{key}' must hold {n} numbers at surfel {index}")
    arr = np.array(val, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise SceneFormatError(f"non-finite value in field '{key}' at surfel {index}")
    return arr


def _parse_constant(token):
    raise SceneFormatError(f"non-finite number {token} in scene file")


def load_scene(path):
    """Read a scene JSON file (and the environment PFM it references)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(), parse_constant=_parse_constant)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(f"{path}: malformed JSON ({exc})") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("surfels"), list):
        raise SceneFormatError(f"{path}: expected an object with a 'surfels' list")
    rows = []
    for i, s in enumerate(doc["surfels"]):
        if not isinstance(s, dict):
            raise SceneFormatError(f"surfel {i} is not an object")
        rows.append((_reals(s, "p", 3, i), _reals(s, "tu", 3, i), _reals(s, "tv", 3, i), _reals(s, "s", 2, i),
                     _reals(s, "alpha", 1, i)[0], _reals(s, "sh", 3 * N_COEFFS, i).reshape(N_COEFFS, 3),
                     _reals(s, "albedo", 3, i), _reals(s, "rough", 1, i)[0]))
    if "env" not in doc:
        raise SceneFormatError(f"{path}: missing 'env'")
    env_path = path.parent / doc["env"]
    try:
        env = EnvironmentCubemap(read_env_pfm(env_path))
    except (OSError, ValueError) as exc:
        raise SceneFormatError(f"cannot read environment map {env_path}: {exc}") from exc
    cameras, images = [], []
    for k, c in enumerate(doc.get("cameras", [])):
        try:
            cameras.append(Camera(float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]), int(c["w"]),
                                  int(c["h"]), np.array(c["world_from_cam"], dtype=np.float64).reshape(4, 4)))
        except (KeyError, TypeError, ValueError) as exc:
            raise SceneFormatError(f"invalid camera {k}: {exc}") from exc
        images.append(read_pfm(path.parent / c["image"]) if c.get("image") else None)
    n = len(rows)
    cols = list(zip(*rows)) if rows else [[]] * 8
    scene = Scene(np.reshape(cols[0], (n, 3)), np.reshape(cols[1], (n, 3)), np.reshape(cols[2], (n, 3)),
                  np.reshape(cols[3], (n, 2)), cols[4], np.reshape(cols[5], (n, N_COEFFS, 3)),
                  np.reshape(cols[6], (n, 3)), cols[7], env, cameras, images)
    return scene.validate()


def save_scene(scene, path, env_name=None):
    """Write ``scene`` as JSON next to its environment PFM and reference images."""
    path = Path(path)
    env_name = env_name or path.stem + "_env.pfm"
    write_env_pfm(path.parent / env_name, scene.env.faces)
    surfels = []
    for i in range(len(scene)):
        surfels.append({
            "p": scene.p[i].tolist(), "tu": scene.tu[i].tolist(), "tv": scene.tv[i].tolist(),
            "s": scene.scales[i].tolist(), "alpha": float(scene.opacity[i]),
            "sh": scene.sh[i].ravel().tolist(), "albedo": scene.albedo[i].tolist(),
            "rough": float(scene.roughness[i]),
        })
    cams = []
    for k, cam in enumerate(scene.cameras):
        c = cam.to_json()
        img = scene.images[k] if k < len(scene.images) else None
        if img is not None:
            c["image"] = f"{path.stem}_view{k:02d}.pfm"
            write_pfm(path.parent / c["image"], img)
        cams.append(c)
    path.write_text(json.dumps({"surfels": surfels, "env": env_name, "cameras": cams}))
