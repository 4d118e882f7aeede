"""Self-training on two facing patches: minimizing the radiometric residual over the SH
radiances alone drives them to the radiosity solution, including the patch that only
receives bounced light.

    python demos/two_patch_fixed_point.py --iters 1500
"""
import argparse
import time

import numpy as np

from surfelrad import oracle, presets
from surfelrad.config import RunConfig
from surfelrad.optim import TrainSchedule, run_stage
from surfelrad.sh import hemisphere_mean
from surfelrad.tracer import build_bvh


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=1500)
    ap.add_argument("--lr", type=float, default=0.01)
    args = ap.parse_args()

    pr = presets.two_patch()
    scene = pr.surfel_scene()
    bvh = build_bvh(scene)
    owner = oracle.surfel_owner(pr.patches, scene)
    ref = oracle.radiosity_reference(pr.patches, subdivisions=16)
    print(f"{len(scene)} surfels; radiosity: lit {ref.patch_mean(0)[0]:.4f}, receiver {ref.patch_mean(1)[0]:.4f}")

    def progress(it, step):
        if it % 250 == 0 or it == args.iters - 1:
            d = hemisphere_mean(scene.sh, scene.normals)
            print(f"iter {it:5d}  L_rad {step.components['rad']:.4f}  "
                  f"lit {d[owner == 0].mean():.4f}  receiver {d[owner == 1].mean():.4f}")

    t0 = time.time()
    run_stage(scene, TrainSchedule("relight", args.iters, ("sh",)),
              RunConfig(specular=False, lr_sh=args.lr), bvh, progress=progress)
    d = hemisphere_mean(scene.sh, scene.normals)
    err = d[owner == 1].mean(axis=0) / ref.patch_mean(1) - 1
    print(f"receiver relative error {np.abs(err).max():.3%} after {time.time() - t0:.0f} s")


if __name__ == "__main__":
    main()
