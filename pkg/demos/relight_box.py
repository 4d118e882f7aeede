"""Relight the colored box: fit SH radiance under the original sky, swap in a new
environment, finetune the SH only, and write the three render configurations side by side.

    python demos/relight_box.py --out demo_box --fit-iters 400 --relight-iters 500
"""
import argparse
from pathlib import Path

import numpy as np

from surfelrad import metrics, presets
from surfelrad.config import RunConfig
from surfelrad.imageio import write_png
from surfelrad.optim import TrainSchedule, relight_finetune, run_stage
from surfelrad.render import render_pbr_mc, render_pbr_splitsum, render_surfel
from surfelrad.scene import Camera
from surfelrad.shading import precompute_splitsum
from surfelrad.tracer import build_bvh


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="demo_box")
    ap.add_argument("--fit-iters", type=int, default=400)
    ap.add_argument("--relight-iters", type=int, default=500)
    ap.add_argument("--res", type=int, default=64)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    pr = presets.box()
    scene = pr.surfel_scene()
    bvh = build_bvh(scene)
    cfg = RunConfig(specular=False, lr_sh=0.01, n_g=512)
    cam = Camera.look_at([0, 0, -1.2], [0, 0, 0], [0, 1, 0], args.res, args.res, 40)

    run_stage(scene, TrainSchedule("relight", args.fit_iters, ("sh",)), cfg, bvh)
    write_png(out / "before_surfel.png", render_surfel(scene, bvh, cam, need_grad=False).value)

    # fit fast, then relight at the default SH rate so Adam settles instead of jittering
    relight_cfg = RunConfig(specular=False, n_g=512)
    scene, curve = relight_finetune(scene, pr.new_env, iters=args.relight_iters, cfg=relight_cfg, bvh=bvh)
    print("L_rad by 50-iteration window:", np.round(curve[: len(curve) // 50 * 50].reshape(-1, 50).mean(1), 4))

    surf = render_surfel(scene, bvh, cam, need_grad=False).value
    mc = render_pbr_mc(scene, bvh, cam, n_s=256, specular=False, need_grad=False).value
    ss = render_pbr_splitsum(scene, bvh, cam, precompute_splitsum(scene.env), specular=False).value
    for name, img in (("surfel_finetuned", surf), ("pbr_finetuned", mc), ("pbr_splitsum", ss)):
        write_png(out / f"{name}.png", img)
    print(f"PSNR surfel vs pbr-mc {metrics.psnr(surf, mc):.2f} dB, split-sum vs pbr-mc {metrics.psnr(ss, mc):.2f} dB")
    print(f"images in {out}/")


if __name__ == "__main__":
    main()
