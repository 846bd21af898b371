"""Command-line entry point: generate / train / eval / serialize-bench / gradcheck.

Every subcommand takes ``--config PATH`` pointing at a ``key = value`` file;
without it the full-recipe defaults apply.  Exit codes: 0 on success, 1 with a
one-line diagnostic on stderr for operational failures, 2 for usage errors.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .. import curves, nn
from ..augment import tta_config_for_count
from ..nn import autodiff as ad
from . import dataset as dataset_io
from . import train as train_mod
from .config import RunConfig, dump_config, load_config
from .metrics import append_metrics_csv, summary_table
from .scene import CLASS_NAMES, SceneSpec, generate_scene


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="segfusion", description="LiDAR/camera fusion segmentation harness"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="key = value config file")

    p = sub.add_parser("generate", parents=[common], help="write a synthetic dataset")
    p.add_argument("--out", type=Path, required=True, help="dataset directory")
    p.add_argument("--seed-offset", type=int, default=0, help="shift the scene seed block")

    p = sub.add_parser("train", parents=[common], help="train one stage")
    p.add_argument("--stage", choices=train_mod.STAGES, required=True)
    p.add_argument("--data", type=Path, required=True, help="dataset directory")
    p.add_argument("--out", type=Path, required=True, help="checkpoint/metrics directory")

    p = sub.add_parser("eval", parents=[common], help="evaluate a trained model")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--ckpt-dir", type=Path, required=True, help="directory with latest.json")
    p.add_argument("--stage", default="fusion", choices=train_mod.STAGES,
                   help="whose checkpoint to evaluate (default fusion)")
    p.add_argument("--head", default="main", choices=("main", "aux_lidar", "aux_camera"))
    p.add_argument("--tta", type=int, default=0, metavar="K",
                   help="average logits over K LiDAR transforms (0 = off, 1 = identity)")
    p.add_argument("--csv", type=Path, default=None, help="append metrics to this CSV")

    sub.add_parser("serialize-bench", parents=[common],
                   help="time the space-filling-curve codecs and report locality")

    sub.add_parser("gradcheck", parents=[common],
                   help="finite-difference spot checks of the core operations")

    p = sub.add_parser("dump-config", parents=[common], help="print the resolved configuration")
    return parser


def _load(args) -> RunConfig:
    return load_config(args.config) if args.config else RunConfig()


def _cmd_generate(args) -> int:
    cfg = _load(args)
    scenes = [
        generate_scene(
            SceneSpec(
                seed=cfg.seed * 1000 + args.seed_offset + i,
                num_points=cfg.scene_points,
                img_width=cfg.scene_width,
                img_height=cfg.scene_height,
            )
        )
        for i in range(cfg.num_scenes)
    ]
    dataset_io.save_dataset(scenes, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _load(args)
    scenes = dataset_io.load_dataset(args.data)
    model = train_mod.build_model(cfg)
    stage_cfg = train_mod.stage_config(cfg, args.stage)
    history = train_mod.run_stage(model, scenes, stage_cfg, cfg, args.out)
    if history:
        last = history[-1]
        print(
            f"stage {args.stage}: {len(history)} epochs, "
            f"final loss {last['loss']:.4f}, train mIoU {last['miou']:.2f}"
        )
    else:
        print(f"stage {args.stage}: no epochs configured, nothing trained")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load(args)
    scenes = dataset_io.load_dataset(args.data)
    manifest = train_mod.read_manifest(args.ckpt_dir)
    entry = manifest.get(args.stage)
    if entry is None:
        raise ValueError(f"no {args.stage} checkpoint under {args.ckpt_dir}")
    model = train_mod.build_model(cfg)
    nn.apply_checkpoint(model.parameters(), Path(args.ckpt_dir) / entry["checkpoint"])
    tta = tta_config_for_count(args.tta) if args.tta > 0 else None
    m = train_mod.evaluate_miou(model, scenes, cfg, tta=tta, head=args.head)
    print(summary_table(m, CLASS_NAMES))
    if args.csv:
        append_metrics_csv(args.csv, entry["epoch"], "eval", float("nan"), m, CLASS_NAMES)
    return 0


def _cmd_serialize_bench(args) -> int:
    cfg = _load(args)
    rng = np.random.default_rng(cfg.seed)
    n, bits = 20000, 10
    side = 1 << bits
    cells = rng.integers(0, side, size=(n, 3))
    print(f"{n} cells, {bits} bits per axis")
    for kind in cfg.curves:
        t0 = time.perf_counter()
        codes = curves.encode_cells(cells[:, 0], cells[:, 1], cells[:, 2], kind, bits)
        t_enc = time.perf_counter() - t0
        t0 = time.perf_counter()
        ix, iy, iz = curves.decode_cells(codes, kind, bits)
        t_dec = time.perf_counter() - t0
        if not (
            np.array_equal(ix, cells[:, 0])
            and np.array_equal(iy, cells[:, 1])
            and np.array_equal(iz, cells[:, 2])
        ):
            raise ValueError(f"{kind}: decode does not invert encode")
        order = np.argsort(codes, kind="stable")
        sorted_cells = cells[order]
        gap = np.abs(np.diff(sorted_cells, axis=0)).sum(axis=1).mean()
        print(
            f"{kind:13s} encode {t_enc * 1e3:7.2f} ms  decode {t_dec * 1e3:7.2f} ms  "
            f"mean neighbor L1 {gap:6.3f}"
        )
    # the inverse reading: code distance between spatially adjacent cells,
    # exhaustive on the small grid where that is cheap
    small = 3
    ax = np.arange(1 << small)
    ix, iy, iz = np.meshgrid(ax, ax, ax, indexing="ij")
    print(f"adjacent-cell |code gap| at {small} bits per axis (exhaustive):")
    for kind in cfg.curves:
        grid = np.empty((1 << small,) * 3, dtype=np.int64)
        grid[ix, iy, iz] = curves.encode_cells(
            ix.ravel(), iy.ravel(), iz.ravel(), kind, small
        ).reshape(grid.shape)
        diffs = np.concatenate(
            [np.abs(np.diff(grid, axis=a)).ravel() for a in range(3)]
        )
        print(
            f"{kind:13s} mean {diffs.mean():6.3f}  median {np.median(diffs):4.1f}  "
            f"max {diffs.max()}"
        )
    return 0


def _cmd_gradcheck(args) -> int:
    rng = np.random.default_rng(0)
    probe = nn.constant(rng.normal(size=(4, 5)))
    checks = [
        (
            "matmul+softmax",
            lambda x, w: ad.sum_(ad.mul(ad.softmax(ad.matmul(x, w), axis=-1), probe)),
            [rng.normal(size=(4, 3)), rng.normal(size=(3, 5))],
        ),
        (
            "layer_norm+gelu",
            lambda y, g, b: ad.sum_(ad.gelu(ad.layer_norm(y, g, b))),
            [rng.normal(size=(6, 8)), rng.normal(size=(8,)), rng.normal(size=(8,))],
        ),
        (
            "conv2d",
            lambda img, k: ad.sum_(ad.conv2d(img, k, stride=2, pad=1)),
            [rng.normal(size=(2, 5, 5)), rng.normal(size=(3, 2, 3, 3))],
        ),
    ]
    worst = 0.0
    for name, f, inputs in checks:
        report = nn.finite_diff_check(f, inputs, tol=1e-4)
        worst = max(worst, report.max_rel_err)
        print(f"{name:16s} max rel err {report.max_rel_err:.3e}")
    if worst > 1e-4:
        raise ValueError(f"gradient check failed: worst relative error {worst:.3e}")
    print("all gradient checks passed")
    return 0


def _cmd_dump_config(args) -> int:
    print(dump_config(_load(args)))
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "serialize-bench": _cmd_serialize_bench,
    "gradcheck": _cmd_gradcheck,
    "dump-config": _cmd_dump_config,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, FileNotFoundError, nn.OptimError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
