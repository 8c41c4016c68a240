"""Command-line entry point: ``dynsplat {synth,train,render,eval,ablate}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical abort.
Progress goes to stderr; results go to files (and a short summary to stdout).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .antialias import ConfigError, FilterConfig
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .datasets import SceneError, load_scene
from .imageio import ImageFormatError, write_pfm, write_png
from .metrics import MetricInputError, MetricReport
from .pipeline import render_model
from .synthetic import SyntheticSceneSpec, generate_synthetic
from .trainer import TrainingAborted, ablate, evaluate, format_table, train

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 2, 3

log = logging.getLogger("dynsplat")


class UsageError(Exception):
    pass


def _err(msg):
    print(f"error: {msg}", file=sys.stderr)


def _load_config(path, **overrides) -> TrainConfig:
    cfg = TrainConfig.load(path) if path else TrainConfig()
    over = {k: v for k, v in overrides.items() if v is not None}
    return cfg.replace(**over) if over else cfg


def _with_total_iters(cfg: TrainConfig, total):
    if total is None:
        return cfg
    # a short run still has to be a valid schedule: shrink the warm-up with it
    warm = cfg.warmup_iters if total > cfg.warmup_iters else max(0, total - 1)
    return cfg.replace(total_iters=total, warmup_iters=warm)


def parse_frames(text: str, n: int) -> list:
    """``"0,3,5-7"`` -> ``[0, 3, 5, 6, 7]``; ``"all"`` -> every frame."""
    if text.strip() == "all":
        return list(range(n))
    out = []
    for part in text.split(","):
        part = part.strip()
        try:
            if "-" in part:
                a, b = part.split("-", 1)
                out.extend(range(int(a), int(b) + 1))
            else:
                out.append(int(part))
        except ValueError:
            raise UsageError(f"bad frame list {text!r}") from None
    bad = [i for i in out if not 0 <= i < n]
    if bad:
        raise UsageError(f"frame index {bad[0]} out of range (scene has {n} frames)")
    return out


# ----------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    d = {}
    if args.spec:
        try:
            d = json.loads(Path(args.spec).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.spec}: line {e.lineno} column {e.colno}: {e.msg}") from e
        except OSError as e:
            raise ConfigError(f"cannot read spec: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError(f"{args.spec}: top level must be an object")
    if args.seed is not None:
        d["seed"] = args.seed
    spec = SyntheticSceneSpec.from_dict(d)
    out, _ = generate_synthetic(spec, args.out,
                                progress=lambda i, n: log.info("frame %d/%d", i + 1, n))
    lo, hi = spec.aabb
    print(f"wrote {spec.n_frames} frames ({spec.width}x{spec.height}) to {out}; aabb {list(lo)} {list(hi)}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load_config(args.config, seed=args.seed, workers=args.workers)
    cfg = _with_total_iters(cfg, args.total_iters)
    ds = load_scene(args.scene)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".csv")

    def progress(it, loss, p):
        if it % args.log_every == 0 or it == cfg.total_iters:
            log.info("iter %d/%d loss %.5f train PSNR %.2f", it, cfg.total_iters, loss, p)

    try:
        res = train(ds, cfg, log_path=log_path, progress=progress)
    except TrainingAborted as e:
        path = out.with_suffix(".aborted.ckpt")
        save_checkpoint(e.checkpoint, path)
        _err(f"{e}; last good state saved to {path}")
        return EXIT_ABORT
    save_checkpoint(res.checkpoint, out)
    final = res.history[-1]["psnr_train"] if res.history else float("nan")
    print(f"checkpoint {out}; metrics {log_path}; final train PSNR {final:.3f}")
    return EXIT_OK


def _load_ckpt(args):
    expect = _load_config(args.config).hash() if getattr(args, "config", None) else None
    return load_checkpoint(args.ckpt, expect_hash=expect,
                           allow_incompatible=getattr(args, "allow_incompatible", False))


def cmd_render(args):
    ck = _load_ckpt(args)
    ds = load_scene(args.scene, check_images=False)
    frames = parse_frames(args.frames, len(ds.frames))
    model = ck.model
    if args.no_filters:
        f = model.filters
        model.filters = FilterConfig(f.s3d, f.s2d, enable3d=False, enable2d=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    raster = model.raster(args.workers)
    for i in frames:
        fr = ds.frames[i]
        color, depth, _ = render_model(model, fr.camera, fr.time, raster=raster)
        write_png(out / f"{i:05d}.png", np.clip(color, 0, 1))
        write_pfm(out / f"{i:05d}.pfm", depth)
        log.info("rendered frame %d", i)
    print(f"rendered {len(frames)} frame(s) to {out}")
    return EXIT_OK


def cmd_eval(args):
    ck = _load_ckpt(args)
    ds = load_scene(args.scene)
    if not ds.indices(args.split):
        raise UsageError(f"split {args.split!r} is empty")
    rep: MetricReport = evaluate(ck.model, ds, args.split, raster=ck.model.raster(args.workers))
    if args.out:
        rep.write_csv(args.out)
    print(rep.summary())
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_config(args.config, seed=args.seed, workers=args.workers)
    cfg = _with_total_iters(cfg, args.total_iters)
    ds = load_scene(args.scene)
    rows = ablate(ds, cfg, progress=lambda mode, it, loss, p: (
        log.info("[%s] iter %d loss %.5f", mode, it, loss) if it % args.log_every == 0 else None))
    table = format_table(rows)
    if args.out:
        Path(args.out).write_text(table + "\n")
    print(table)
    return EXIT_OK


# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dynsplat", description=__doc__.splitlines()[0])
    ap.add_argument("-q", "--quiet", action="store_true", help="suppress progress on stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dynamic scene")
    s.add_argument("--spec", help="scene spec JSON (defaults when omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="fit a model to a scene")
    t.add_argument("--scene", required=True)
    t.add_argument("--config")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="metrics CSV (default: checkpoint path with .csv)")
    t.add_argument("--total-iters", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--workers", type=int)
    t.add_argument("--log-every", type=int, default=100)
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render frames from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--scene", required=True)
    r.add_argument("--frames", default="all")
    r.add_argument("--out", required=True)
    r.add_argument("--no-filters", action="store_true")
    r.add_argument("--config", help="refuse checkpoints trained with a different model config")
    r.add_argument("--allow-incompatible", action="store_true")
    r.add_argument("--workers", type=int, default=1)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--scene", required=True)
    e.add_argument("--split", default="test", choices=("train", "test", "all"))
    e.add_argument("--out", help="per-frame metrics CSV")
    e.add_argument("--config")
    e.add_argument("--allow-incompatible", action="store_true")
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train the four ablation modes and tabulate")
    a.add_argument("--scene", required=True)
    a.add_argument("--config")
    a.add_argument("--out", help="write the table here as well")
    a.add_argument("--total-iters", type=int)
    a.add_argument("--seed", type=int)
    a.add_argument("--workers", type=int)
    a.add_argument("--log-every", type=int, default=100)
    a.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, SceneError, CheckpointError, UsageError, ImageFormatError,
            MetricInputError, ValueError) as e:
        _err(e)
        return EXIT_USAGE
    except FileNotFoundError as e:
        _err(e)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
