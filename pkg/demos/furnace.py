"""Furnace check: a gray surfel under a white sky reflects its albedo, with 1/sqrt(N) noise.

    python demos/furnace.py
"""
import numpy as np

from surfelrad.cubemap import EnvironmentCubemap
from surfelrad.radiometry import pbr_radiance
from surfelrad.scene import Scene
from surfelrad.tracer import build_bvh


def main():
    scene = Scene([[0, 0, 0]], [[1, 0, 0]], [[0, 1, 0]], [[0.1, 0.1]], [0.9], np.zeros((1, 16, 3)),
                  [[0.5, 0.5, 0.5]], [1.0], EnvironmentCubemap.constant(1.0, 8))
    bvh = build_bvh(scene)
    print(" N_s   mean     std    std*sqrt(N)")
    for n_s in (16, 64, 256, 1024, 4096):
        vals = [pbr_radiance(scene, bvh, [0], [[0, 0, 1.0]], n_s=n_s, seed=s, specular=False).value[0, 0]
                for s in range(50)]
        print(f"{n_s:5d}  {np.mean(vals):.4f}  {np.std(vals):.4f}  {np.std(vals) * np.sqrt(n_s):.3f}")


if __name__ == "__main__":
    main()
