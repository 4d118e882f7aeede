"""Command-line entry point: ``surfelrad {gen-scene,train,relight,render,eval}``.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure.
"""
import argparse
import json
import sys
import time
from pathlib import Path

from . import metrics
from .config import ConfigError, RunConfig, parse_overrides, read_config, write_config
from .cubemap import EnvironmentCubemap
from .imageio import read_env_pfm, read_pfm, write_env_pfm, write_pfm, write_png
from .optim import NumericalError, TrainSchedule, relight_finetune, run_stage
from .presets import PRESET_NAMES, get_preset
from .render import RENDER_MODES, render, render_pbr_mc
from .scene import Camera, SceneFormatError, load_scene, save_scene
from .shading import precompute_splitsum
from .tracer import build_bvh

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _config(args):
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = read_config(args.config, cfg)
    return parse_overrides(getattr(args, "set", None) or [], cfg)


def _apply_threads(cfg):
    import numba
    n = cfg.threads or numba.config.NUMBA_NUM_THREADS
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_scene(args):
    try:
        preset = get_preset(args.preset)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from None
    out = _out_dir(args.out)
    scene = preset.surfel_scene(with_images=True, spp=args.spp, seed=args.seed)
    save_scene(scene, out / "scene.json")
    write_env_pfm(out / "new_env.pfm", preset.new_env.faces)
    cfg = parse_overrides([f"specular={int(preset.specular)}", f"seed={args.seed}"])
    write_config(cfg, out / "config.txt")
    print(f"wrote {out / 'scene.json'} ({len(scene)} surfels, {len(scene.cameras)} views)")


def cmd_train(args):
    cfg = _config(args)
    if args.iters is not None:
        cfg = parse_overrides([f"iters_{args.stage}={args.iters}"], cfg)
    _apply_threads(cfg)
    scene = load_scene(args.scene)
    if not any(im is not None for im in scene.images):
        raise SceneFormatError(f"{args.scene}: training needs reference images on at least one camera")
    out = _out_dir(args.out)
    write_config(cfg, out / f"{args.stage}_config.txt")
    schedule = TrainSchedule.for_stage(args.stage, cfg)
    run_stage(scene, schedule, cfg, log_path=out / f"{args.stage}_loss.csv",
              checkpoint_path=out / f"{args.stage}.json")
    print(f"wrote {out / (args.stage + '.json')} and {out / (args.stage + '_loss.csv')}")


def cmd_relight(args):
    cfg = _config(args)
    if args.iters is not None:
        cfg = parse_overrides([f"iters_relight={args.iters}"], cfg)
    _apply_threads(cfg)
    scene = load_scene(args.scene)
    try:
        env = EnvironmentCubemap(read_env_pfm(args.env))
    except (OSError, ValueError) as exc:
        raise SceneFormatError(f"cannot read environment map {args.env}: {exc}") from exc
    out = _out_dir(args.out)
    write_config(cfg, out / "relight_config.txt")
    relight_finetune(scene, env, cfg=cfg, log_path=out / "relight_loss.csv", checkpoint_path=out / "relight.json")
    print(f"wrote {out / 'relight.json'} and {out / 'relight_loss.csv'}")


def _camera(scene, args):
    if not scene.cameras:
        raise SceneFormatError("scene has no cameras to render from")
    if not 0 <= args.camera < len(scene.cameras):
        raise UsageError(f"camera index {args.camera} out of range (scene has {len(scene.cameras)})")
    cam = scene.cameras[args.camera]
    if args.size:
        s = args.size / cam.width
        cam = Camera(cam.fx * s, cam.fy * s, cam.cx * s, cam.cy * s, args.size, int(round(cam.height * s)),
                     cam.world_from_cam)
    return cam


def cmd_render(args):
    cfg = _config(args)
    _apply_threads(cfg)
    scene = load_scene(args.scene)
    cam = _camera(scene, args)
    bvh = build_bvh(scene)
    need_tables = args.mode == "pbr-splitsum" or args.indirect == "splitsum"
    tables = precompute_splitsum(scene.env) if need_tables else None
    if args.mode == "surfel":
        render(scene, bvh, cam, "surfel")  # warm-up so the timing excludes compilation
    t0 = time.perf_counter()
    if args.mode == "pbr-mc":
        img = render_pbr_mc(scene, bvh, cam, n_s=cfg.n_s, seed=cfg.seed, direct=not args.no_direct,
                            indirect=args.indirect, specular=cfg.specular, tables=tables, need_grad=False)
    else:
        img = render(scene, bvh, cam, args.mode, tables=tables, n_s=cfg.n_s, seed=cfg.seed, specular=cfg.specular)
    ms = 1e3 * (time.perf_counter() - t0)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    value = img.value[..., 0] if img.value.shape[-1] == 1 else img.value
    write_pfm(out.with_suffix(".pfm"), value)
    shown = value * 0.5 + 0.5 if args.mode == "normal" else value
    write_png(out.with_suffix(".png"), shown)
    print(f"{args.mode}: {cam.width}x{cam.height} in {ms:.2f} ms -> {out.with_suffix('.pfm')}")


def cmd_eval(args):
    try:
        img, ref = read_pfm(args.image), read_pfm(args.ref)
    except (OSError, ValueError) as exc:
        raise SceneFormatError(str(exc)) from exc
    results = {}
    for m in args.metric:
        try:
            results[m] = metrics.compute(m, img, ref)
        except ValueError as exc:
            raise SceneFormatError(str(exc)) from exc
    width = max(len(m) for m in results)
    print(f"{'metric':<{width}}  value")
    for m, v in results.items():
        print(f"{m:<{width}}  {metrics.format_value(v)}")
    if args.json:
        Path(args.json).write_text(json.dumps({m: metrics.format_value(v) for m, v in results.items()}, indent=2))


def build_parser():
    p = _Parser(prog="surfelrad", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key=value run configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one configuration key")

    g = sub.add_parser("gen-scene", help="write a preset scene with path-traced reference images")
    g.add_argument("--preset", required=True, help=f"one of: {', '.join(PRESET_NAMES)}")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--spp", type=int, default=64)
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("train", help="run the init or inverse-rendering stage")
    t.add_argument("--stage", required=True, choices=("init", "inverse"))
    t.add_argument("--scene", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--iters", type=int)
    common(t)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("relight", help="finetune surfel radiance under a new environment map")
    r.add_argument("--scene", required=True)
    r.add_argument("--env", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--iters", type=int)
    common(r)
    r.set_defaults(func=cmd_relight)

    v = sub.add_parser("render", help="render one camera view to PFM and PNG")
    v.add_argument("--scene", required=True)
    v.add_argument("--mode", required=True, choices=RENDER_MODES)
    v.add_argument("--out", required=True, help="output path prefix")
    v.add_argument("--camera", type=int, default=0)
    v.add_argument("--size", type=int, help="override image width (height scales to match)")
    v.add_argument("--indirect", choices=("surfel", "splitsum", "none"), default="surfel",
                   help="indirect light source for pbr-mc")
    v.add_argument("--no-direct", action="store_true", help="drop environment light in pbr-mc")
    common(v)
    v.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="compare an image against a reference")
    e.add_argument("--metric", required=True, action="append", choices=metrics.METRICS)
    e.add_argument("--image", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--json")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"surfelrad: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SceneFormatError, FileNotFoundError, OSError) as exc:
        print(f"surfelrad: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        where = f" (last checkpoint: {exc.checkpoint})" if getattr(exc, "checkpoint", None) else ""
        print(f"surfelrad: numerical failure: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
