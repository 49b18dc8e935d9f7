"""Command-line entry point: ``retifuse {train,fuse,decompose,eval,grid,sweep}``.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import re
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import imgio
from .errors import ConfigError, EmptyDataset, FusionError, InvalidArgument
from .imgio import IMAGE_SUFFIXES
from .metrics import evaluate_directory
from .nets import load_checkpoint
from .pipeline import decompose_visible, fuse_pair, stretch

log = logging.getLogger("retifuse")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# CLI flag -> TrainConfig field
_TRAIN_FLAGS = {
    "lr": "learning_rate",
    "batch_size": "batch_size",
    "epochs": "epochs",
    "max_steps": "max_steps",
    "crop": "crop",
    "hidden": "hidden",
    "seed": "seed",
    "backbone": "backbone",
    "checkpoint_every": "checkpoint_every",
    "device": "device",
    "dtype": "dtype",
}


class UsageError(Exception):
    pass


def _parse_set(items: Sequence[str] | None) -> dict:
    import yaml

    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = yaml.safe_load(value)
    return out


def _overrides(args: argparse.Namespace) -> dict:
    out = {field: getattr(args, flag) for flag, field in _TRAIN_FLAGS.items() if hasattr(args, flag)}
    out.update(_parse_set(getattr(args, "set", None)))
    return out


def _announce(config) -> None:
    print("effective config:\n" + json.dumps(config.to_dict(), indent=2, sort_keys=True), file=sys.stderr)


def _load_bundle(path: str):
    bundle, _ = load_checkpoint(path)
    bundle.eval()
    return bundle


# -- subcommands -----------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    from .loss_d2s import FeatureExtractor
    from .trainer import load_config, train

    config = load_config(args.config, _overrides(args))
    _announce(config)
    manifest = imgio.scan_dataset(args.data_root)
    if args.subset:
        manifest = manifest.sample(args.subset, config.seed)
        log.info("training on a fixed subset of %d pairs", len(manifest))
    extractor = FeatureExtractor.load(config.backbone)

    def report(rec):
        if args.log_every and (rec.step + 1) % args.log_every == 0:
            log.info("step %d  total %.6g  decomp %.6g  d2s %.6g", rec.step + 1, rec.total,
                     rec.decomp["decomp_total"], rec.d2s["d2s_total"])

    result = train(config, manifest, args.out, extractor=extractor, resume=args.resume, on_step=report)
    print(f"checkpoint: {result.checkpoint}")
    return EXIT_OK


def cmd_fuse(args: argparse.Namespace) -> int:
    bundle = _load_bundle(args.ckpt)
    ir = imgio.load_image(args.ir, force_gray=True)
    if args.color_mode == "ycbcr":
        if bundle.channels != 1:
            raise InvalidArgument("--color-mode ycbcr needs a 1-channel checkpoint")
        vis_rgb = imgio.load_image(args.vis, force_gray=False)
        if vis_rgb.shape[2] == 1:
            vis_rgb = np.repeat(vis_rgb, 3, axis=2)
        ycc = imgio.rgb_to_ycbcr(vis_rgb)
        vis = ycc[..., :1]
    else:
        vis = imgio.load_image(args.vis, force_gray=bundle.channels == 1)
        if vis.shape[2] != bundle.channels:
            vis = np.repeat(vis, bundle.channels, axis=2)
    dtype = next(bundle.parameters()).dtype
    with torch.no_grad():
        fused = fuse_pair(bundle, imgio.to_tensor(vis, dtype), imgio.to_tensor(ir, dtype)).fused
        if args.stretch:
            fused = stretch(fused)
    plane = imgio.to_plane(fused)
    if args.color_mode == "ycbcr":
        ycc = ycc.copy()
        ycc[..., :1] = np.clip(plane, 0.0, 1.0)
        plane = np.clip(imgio.ycbcr_to_rgb(ycc), 0.0, 1.0)
    elif plane.shape[2] == 3:
        plane = imgio.to_gray(plane)
    imgio.save_image(plane, args.out)
    print(f"wrote {args.out} ({plane.shape[0]}x{plane.shape[1]}x{plane.shape[2]})")
    return EXIT_OK


def cmd_decompose(args: argparse.Namespace) -> int:
    bundle = _load_bundle(args.ckpt)
    vis = imgio.load_image(args.vis, force_gray=bundle.channels == 1)
    if vis.shape[2] != bundle.channels:
        vis = np.repeat(vis, bundle.channels, axis=2)
    dtype = next(bundle.parameters()).dtype
    with torch.no_grad():
        dec = decompose_visible(bundle, imgio.to_tensor(vis, dtype), args.decompose_input)
        recon = dec.illumination * dec.reflectance
        err = (recon - dec.projected).abs().mean().item()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, t in (("L", dec.illumination), ("R", dec.reflectance), ("i", dec.projected), ("LxR", recon)):
        imgio.save_image(imgio.to_plane(t), out / f"{name}.png")
    print(f"mean |LxR - i| = {err:.6f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    report = evaluate_directory(args.fused_dir, args.vis_dir, args.ir_dir)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    report.write(args.report)
    agg = report.aggregate
    print(f"{len(report.per_image)} images  " + "  ".join(f"{k}={v:.5f}" for k, v in agg.items()))
    return EXIT_OK


def _image_files(folder: Path) -> dict[str, Path]:
    if not folder.is_dir():
        raise EmptyDataset(f"not a directory: {folder}")
    files = {p.stem: p for p in sorted(folder.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    if not files:
        raise EmptyDataset(f"no images in {folder}")
    return files


def build_montage(dirs: Sequence[Path], labels: Sequence[str], pad: int = 4, label_h: int = 14):
    """One row per image stem, one column per directory.

    Cells are letterboxed onto black at the largest cell size; images are
    never resampled. Missing cells stay black.
    """
    from PIL import Image, ImageDraw

    columns = [_image_files(Path(d)) for d in dirs]
    stems = sorted(set().union(*columns))
    images = [[Image.open(col[s]).convert("RGB") if s in col else None for col in columns] for s in stems]
    cell_w = max(im.width for row in images for im in row if im is not None)
    cell_h = max(im.height for row in images for im in row if im is not None)
    width = len(columns) * (cell_w + pad) + pad
    height = label_h + len(stems) * (cell_h + pad) + pad
    canvas = Image.new("RGB", (width, height), (0, 0, 0))
    draw = ImageDraw.Draw(canvas)
    for c, label in enumerate(labels):
        draw.text((pad + c * (cell_w + pad), 1), label, fill=(255, 255, 255))
    for r, row in enumerate(images):
        for c, im in enumerate(row):
            if im is None:
                continue
            x0 = pad + c * (cell_w + pad) + (cell_w - im.width) // 2
            y0 = label_h + pad + r * (cell_h + pad) + (cell_h - im.height) // 2
            canvas.paste(im, (x0, y0))
    return canvas, stems


def cmd_grid(args: argparse.Namespace) -> int:
    dirs = [Path(d) for d in args.dirs.split(",") if d]
    labels = args.labels.split(",") if args.labels else [d.name for d in dirs]
    if len(labels) != len(dirs):
        raise UsageError(f"{len(labels)} labels for {len(dirs)} directories")
    canvas, stems = build_montage(dirs, labels)
    buf = io.BytesIO()
    canvas.save(buf, format="PNG")
    imgio.atomic_write_bytes(args.out, buf.getvalue())
    print(f"wrote {args.out}: {len(stems)} rows x {len(dirs)} columns")
    return EXIT_OK


_GRID_KEYS = {"gamma2": "gamma2", "wi": "w_i", "w_i": "w_i"}


def parse_grid(spec: str) -> dict[str, list[float]]:
    """``"gamma2=1.0,2.5,wi=2.0,3.0"`` -> ``{"gamma2": [1.0, 2.5], "w_i": [2.0, 3.0]}``."""
    parts = re.split(r"[,;]\s*(?=[A-Za-z_]\w*\s*=)", spec.strip())
    grid: dict[str, list[float]] = {}
    for part in parts:
        key, sep, values = part.partition("=")
        key = key.strip()
        if not sep or key not in _GRID_KEYS:
            raise UsageError(f"malformed grid spec {spec!r}: expected gamma2=a,b,...,wi=c,d,...")
        try:
            nums = [float(v) for v in values.split(",") if v.strip()]
        except ValueError as exc:
            raise UsageError(f"malformed grid spec {spec!r}: {exc}") from exc
        if not nums:
            raise UsageError(f"grid axis {key} has no values")
        grid[_GRID_KEYS[key]] = nums
    if set(grid) != {"gamma2", "w_i"}:
        raise UsageError(f"grid spec must set both gamma2 and wi, got {spec!r}")
    return grid


def cmd_sweep(args: argparse.Namespace) -> int:
    from .loss_d2s import FeatureExtractor
    from .trainer import ablation_sweep, load_config

    grid = parse_grid(args.grid)
    config = load_config(args.config, _overrides(args))
    _announce(config)
    train_manifest = imgio.scan_dataset(args.data_root)
    if args.subset:
        train_manifest = train_manifest.sample(args.subset, config.seed)
    eval_manifest = imgio.scan_dataset(args.eval_root) if args.eval_root else None
    rows = ablation_sweep(grid, config, train_manifest, args.out, eval_manifest,
                          FeatureExtractor.load(config.backbone))
    failed = [r for r in rows if r["status"] != "ok"]
    print(f"wrote {Path(args.out) / 'sweep.csv'}: {len(rows)} cells, {len(failed)} failed")
    return EXIT_RUNTIME if failed and len(failed) == len(rows) else EXIT_OK


# -- parser ------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML or JSON config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--hidden", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--device", choices=["cpu", "accelerator"])
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--backbone", help="pretrained, pretrained:<path> or random[:seed]")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="any config field, dotted for weights (d2s_weights.gamma2=1.5)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retifuse",
                                     description="Infrared/visible image fusion by Retinex decomposition.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the five networks")
    p.add_argument("--data-root", required=True, help="directory with ir/ and vis/")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--subset", type=int, help="train on N pairs drawn once from the seed")
    p.add_argument("--log-every", type=int, default=10)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("fuse", help="fuse one registered pair")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--ir", required=True)
    p.add_argument("--vis", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--color-mode", choices=["gray", "ycbcr"], default="gray")
    p.add_argument("--stretch", action="store_true", help="min-max stretch the output for display")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("decompose", help="write L, R, i and LxR for a visible image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vis", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--decompose-input", choices=["raw", "projected"], default="raw")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("eval", help="En/SD/MI/Nabf over matched directories")
    p.add_argument("--fused-dir", required=True)
    p.add_argument("--vis-dir", required=True)
    p.add_argument("--ir-dir", required=True)
    p.add_argument("--report", required=True, help=".csv or .json")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("grid", help="labelled comparison montage")
    p.add_argument("--dirs", required=True, help="comma-separated directories, one column each")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", help="comma-separated column labels")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("sweep", help="gamma2 x w_i ablation")
    p.add_argument("--grid", required=True, help="e.g. gamma2=1.0,2.5,wi=2.0,3.0")
    p.add_argument("--out", required=True)
    p.add_argument("--data-root", default=str(imgio.sample_data_root()))
    p.add_argument("--eval-root", help="dataset to evaluate on (defaults to --data-root)")
    p.add_argument("--subset", type=int, help="train each cell on N pairs drawn once from the seed")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"retifuse {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FusionError, OSError) as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
