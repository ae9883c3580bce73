"""Command-line interface: ``nerfa {train,render,eval,ablate,gradcheck,madds}``.

Exit codes: 0 success, 1 usage/config error, 2 IO/format error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from typing import List, Optional

from .checkpoint import FormatError, atomic_write, load_checkpoint, save_checkpoint, write_image
from .config import ConfigKeyError, RunConfig, load_config
from .gradcheck import format_results, run_all
from .model import ABLATION_VARIANTS, ModelConfig, NeRFAModel, count_madds
from .scene import Scene, ValidationError, generate_toy_scene, load_blender_dataset
from .train import NumericalError, evaluate, render_view, train, train_psnr

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("nerfa")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def load_scene(source: str, run: RunConfig) -> Scene:
    if source == "toy":
        return generate_toy_scene(run.scene_seed, run.toy_config())
    return load_blender_dataset(source, run.near, run.far)


def _train_cmd(args) -> int:
    run = load_config(args.config)
    scene = load_scene(args.scene, run)
    model = NeRFAModel(run.model_config())
    t0 = time.time()
    model, trainlog, state = train(model, scene, run.train_config())
    save_checkpoint(args.out, model, run, state)
    log_path = args.log or args.out + ".csv"
    atomic_write(log_path, trainlog.to_csv().encode())
    final = trainlog.records[-1].psnr if trainlog.records else float("nan")
    print(f"trained {run.variant} for {run.iterations} steps in {time.time() - t0:.1f}s; "
          f"train PSNR {final:.2f} dB -> {args.out}, {log_path}")
    return EXIT_OK


def _render_cmd(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    run = ckpt.config
    scene = load_scene(args.scene, run)
    views = scene.split(args.split) if args.split else scene.views
    if args.views > len(views):
        raise UsageError(f"requested {args.views} views but the scene has {len(views)}")
    os.makedirs(args.out_dir, exist_ok=True)
    for i, view in enumerate(views[:args.views]):
        img = render_view(ckpt.model, view.camera, run.near, run.far, run.n_r, run.n_p)
        path = os.path.join(args.out_dir, f"view_{i:03d}.png")
        write_image(img, path)
        print(path)
    return EXIT_OK


def _eval_cmd(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    run = ckpt.config
    scene = load_scene(args.scene, run)
    views = scene.split(args.split)
    if not views:
        raise UsageError(f"scene has no {args.split!r} views")
    rows = evaluate(ckpt.model, views, run.near, run.far, run.n_r, run.n_p)
    print(f"{'view':>4}  {'split':<5}  {'PSNR':>7}  {'SSIM':>6}")
    for r in rows:
        print(f"{r['view']:>4}  {r['split']:<5}  {r['psnr']:7.2f}  {r['ssim']:6.4f}")
    n = len(rows)
    print(f"{'mean':>4}  {'':<5}  {sum(r['psnr'] for r in rows) / n:7.2f}  "
          f"{sum(r['ssim'] for r in rows) / n:6.4f}")
    return EXIT_OK


def run_ablation(run: RunConfig, scene: Scene, variants=ABLATION_VARIANTS) -> List[dict]:
    rows = []
    for v in variants:
        cfg = run.replace(variant=v)
        model = NeRFAModel(cfg.model_config())
        t0 = time.time()
        model, trainlog, _ = train(model, scene, cfg.train_config())
        tc = cfg.train_config()
        val = scene.split("val") or scene.split("train")
        ev = evaluate(model, val, tc.near, tc.far, tc.n_r, tc.n_p)
        rows.append({
            "variant": v,
            "train_psnr": trainlog.records[-1].psnr if trainlog.records else train_psnr(model, scene, tc),
            "val_psnr": sum(r["psnr"] for r in ev) / len(ev),
            "val_ssim": sum(r["ssim"] for r in ev) / len(ev),
            "seconds": time.time() - t0,
        })
    return rows


_LABELS = {"nerfa": "NeRFA", "vania": "VaniA", "no_fm": "w/o FM", "no_rt": "w/o RT", "no_pt": "w/o PT"}


def _ablate_cmd(args) -> int:
    run = load_config(args.config) if args.config else RunConfig()
    if args.iterations is not None:
        run = run.replace(iterations=args.iterations)
    scene = load_scene("toy", run)
    rows = run_ablation(run, scene, args.variants or ABLATION_VARIANTS)
    print(f"{'model':<8}  {'train PSNR':>10}  {'val PSNR':>8}  {'val SSIM':>8}  {'time (s)':>8}")
    for r in rows:
        print(f"{_LABELS.get(r['variant'], r['variant']):<8}  {r['train_psnr']:10.2f}  "
              f"{r['val_psnr']:8.2f}  {r['val_ssim']:8.4f}  {r['seconds']:8.1f}")
    return EXIT_OK


def _gradcheck_cmd(args) -> int:
    results = run_all(args.seed)
    print(format_results(results))
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERIC


def _madds_cmd(args) -> int:
    cfg = ModelConfig(d=args.d, heads=1, layers=args.layers)
    print(f"{'N_p':>6}  {'N_r':>4}  {'global':>16}  {'ray':>14}  {'pixel':>12}  {'global/ray':>10}")
    for n_p in args.n_p:
        c = count_madds(cfg, n_p, args.n_r)
        print(f"{n_p:>6}  {args.n_r:>4}  {c['global']:>16,}  {c['ray']:>14,}  {c['pixel']:>12,}  "
              f"{c['global'] // c['ray']:>10}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nerfa", description="Seq2seq view synthesis with NeRF attention.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="TrainLog CSV path (default: <out>.csv)")
    t.add_argument("--scene", default="toy", help="'toy' or a Blender-format directory")
    t.set_defaults(func=_train_cmd)

    r = sub.add_parser("render", help="render views from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--scene", default="toy")
    r.add_argument("--views", type=int, default=1)
    r.add_argument("--split", choices=("train", "val", "test"))
    r.add_argument("--out-dir", default="renders")
    r.set_defaults(func=_render_cmd)

    e = sub.add_parser("eval", help="PSNR/SSIM of a checkpoint on a scene split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--scene", default="toy")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.set_defaults(func=_eval_cmd)

    a = sub.add_parser("ablate", help="train every ablation variant on the toy scene")
    a.add_argument("--config")
    a.add_argument("--iterations", type=int)
    a.add_argument("--variants", nargs="+", choices=ABLATION_VARIANTS)
    a.set_defaults(func=_ablate_cmd)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=_gradcheck_cmd)

    m = sub.add_parser("madds", help="attention multiply-add table")
    m.add_argument("--n-p", type=int, nargs="+", default=[2, 4, 8, 16, 128])
    m.add_argument("--n-r", type=int, default=64)
    m.add_argument("--d", type=int, default=64)
    m.add_argument("--layers", type=int, default=1)
    m.set_defaults(func=_madds_cmd)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise UsageError("nerfa: error: a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(message)s")
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except ConfigKeyError as exc:
        print(f"nerfa: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError, ValidationError) as exc:
        print(f"nerfa: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"nerfa: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
