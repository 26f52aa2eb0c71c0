"""``raydepth`` command line: synth, train, eval, infer, pointcloud, curves.

Exit codes: 0 success, 1 validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import ConfigError, RunConfig, config_from_dict, load_config, write_config
from .diffcore import CheckpointError, RngStream
from .evalmetrics import (
    EvalProtocol,
    EvaluationError,
    average_reports,
    depth_metrics,
    uncertainty_curve,
    write_curve_csv,
    write_reports_csv,
    write_reports_json,
)
from .fileio import FileFormatError, read_pfm, read_ppm, write_pfm, write_ply
from .geometry import GeometryError, merge_pointclouds, pixel_grid, read_intrinsics, unproject
from .network import DepthNet, predict_with_uncertainty
from .synthdata import Dataset, make_dataset
from .trainer import TrainingError, load_model, make_optimizer, train

log = logging.getLogger("raydepth")


class SchemaError(ValueError):
    pass


VALIDATION_ERRORS = (ConfigError, SchemaError, GeometryError, FileFormatError, CheckpointError, EvaluationError, FileNotFoundError)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        data = cfg.to_dict()
        data["seed"] = args.seed
        cfg = config_from_dict(data)
    return cfg


def _echo_config(out_dir: Path, cfg: RunConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_config(out_dir / "config.json", cfg)


def _protocol(args, cfg: RunConfig) -> EvalProtocol:
    p = cfg.protocol
    return EvalProtocol(
        min_depth=p.min_depth,
        max_depth=args.max_depth if args.max_depth is not None else p.max_depth,
        crop=args.crop if args.crop is not None else p.crop,
        median_scale=args.median_scale or p.median_scale,
    )


def _check_meta(path, meta: dict, cfg: RunConfig) -> None:
    plain = cfg.to_dict()
    expected = {"network": plain["network"], "fourier": plain["fourier"]}
    if json.loads(json.dumps(meta["config"])) != expected:
        raise SchemaError(f"checkpoint {path} was trained with a different network/fourier config")


def _load_checkpoint(path, cfg: RunConfig | None = None) -> DepthNet:
    model, _, _, meta = load_model(path)
    if cfg is not None:
        _check_meta(path, meta, cfg)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> None:
    cfg = _config(args)
    if args.samples is not None:
        data = cfg.to_dict()
        data["data"]["samples_per_family"] = args.samples
        cfg = config_from_dict(data)
    out = Path(args.out_dir)
    entries = make_dataset(cfg.data, cfg.seed, out)
    write_config(out / "config.json", cfg)
    counts = {}
    for _, label, split in entries:
        counts[(label, split)] = counts.get((label, split), 0) + 1
    print(f"wrote {len(entries)} samples to {out}")
    for (label, split), n in sorted(counts.items()):
        print(f"  {label}\t{split}\t{n}")


def cmd_train(args) -> None:
    cfg = _config(args)
    out = Path(args.out_dir)
    _echo_config(out, cfg)
    ds = Dataset(args.dataset)
    labels = set(cfg.train_labels)
    samples = [ds.load(e) for e in ds.select(split="train") if not labels or e[1] in labels]
    if not samples:
        raise SchemaError(f"no training samples with labels {sorted(labels)} in {args.dataset}")
    torch.manual_seed(cfg.seed)
    start_epoch = 0
    schedule = cfg.schedule
    if args.resume:
        model, optimizer, last_epoch, meta = load_model(args.resume, cfg.schedule)
        _check_meta(args.resume, meta, cfg)
        start_epoch = last_epoch + 1
        # the schedule's epoch count is the total; run only what is left
        schedule = dataclasses.replace(schedule, epochs=max(0, schedule.epochs - start_epoch))
    else:
        model = DepthNet(cfg.network, cfg.fourier)
        optimizer = make_optimizer(model, cfg.schedule)
    result = train(
        samples, model, schedule, cfg.augment, cfg.losses, cfg.seed, out,
        optimizer=optimizer, start_epoch=start_epoch,
    )
    print(f"trained {len(result.log)} epochs on {len(samples)} samples; checkpoint {out / 'checkpoint.ckpt'}")
    for row in result.log:
        print(f"  epoch {row['epoch']}: total {row['total']:.4f}  L_D {row['L_D']:.4f}  lr {row['lr']:.2e}")


def _predict(model, sample, samples: int, seed: int, index: int, noise: float = 0.0):
    from .augment import perturb_intrinsics

    K = sample.K
    if noise > 0:
        K = perturb_intrinsics(K, noise, RngStream(seed).child(7, index).numpy)
    gen = RngStream(seed).child(3, index).torch_generator()
    return predict_with_uncertainty(model, sample.image, K, samples, gen)


def cmd_eval(args) -> None:
    cfg = _config(args)
    model = _load_checkpoint(args.checkpoint, cfg if args.config else None)
    proto = _protocol(args, cfg)
    ds = Dataset(args.dataset)
    out = Path(args.out_dir)
    _echo_config(out, cfg)
    (out / "sigma").mkdir(exist_ok=True)
    tracks = {"metric": EvalProtocol(proto.min_depth, proto.max_depth, proto.crop, False)}
    if proto.median_scale:
        tracks["scaled"] = EvalProtocol(proto.min_depth, proto.max_depth, proto.crop, True)
    per_label: dict[str, dict[str, list]] = {}
    entries = ds.select(split=args.split) if args.split != "all" else ds.entries
    for i, entry in enumerate(entries):
        sample = ds.load(entry)
        um = _predict(model, sample, args.samples, cfg.seed, i, args.intrinsics_noise)
        write_pfm(out / "sigma" / f"{entry[0]}.pfm", um.std.astype(np.float32))
        for track, p in tracks.items():
            per_label.setdefault(entry[1], {}).setdefault(track, []).append(depth_metrics(um.mean, sample.depth, p))
    if not per_label:
        raise SchemaError(f"no samples in split {args.split!r}")
    reports = {}
    for label in sorted(per_label):
        for track, reps in per_label[label].items():
            reports[f"{label}/{track}"] = average_reports(reps)
    for track in tracks:
        reports[f"all/{track}"] = average_reports([r for lab in per_label.values() for r in lab[track]])
    write_reports_json(out / "report.json", reports)
    write_reports_csv(out / "report.csv", reports)
    for name, r in reports.items():
        print(f"{name}\tabs_rel {r.abs_rel:.4f}\trmse {r.rmse:.4f}\tdelta1 {r.delta1:.4f}\tn {r.count}")


def cmd_infer(args) -> None:
    model = _load_checkpoint(args.checkpoint)
    image = read_ppm(args.image)
    K, _ = read_intrinsics(args.intrinsics)
    if image.shape[:2] != K.shape:
        raise SchemaError(f"image is {image.shape[1]}x{image.shape[0]} but intrinsics describe {K.width}x{K.height}")
    gen = RngStream(args.seed).torch_generator()
    um = predict_with_uncertainty(model, image, K, args.samples, gen)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_pfm(out / "depth.pfm", um.mean.astype(np.float32))
    write_pfm(out / "sigma.pfm", um.std.astype(np.float32))
    print(f"wrote {out / 'depth.pfm'} and {out / 'sigma.pfm'} ({K.width}x{K.height}, {args.samples} samples)")


def pointcloud_from_depth(depth, K, image, sigma=None, fraction: float = 1.0):
    """Unproject valid pixels, optionally keeping only the lowest-sigma ``fraction`` of them."""
    from .evalmetrics import uncertainty_order

    valid = np.isfinite(depth) & (depth > 0)
    if sigma is not None and fraction < 1.0:
        order = uncertainty_order(np.nan_to_num(sigma, nan=np.inf), valid)
        keep = np.zeros(depth.size, dtype=bool)
        keep[order[: int(np.floor(fraction * len(order)))]] = True
        valid = keep.reshape(depth.shape)
    u, v = pixel_grid(*depth.shape)
    points = unproject(K, u[valid], v[valid], depth[valid])
    colors = np.round(np.clip(image[valid], 0, 1) * 255).astype(np.uint8)
    return points, colors


def cmd_pointcloud(args) -> None:
    n = len(args.depth)
    if len(args.intrinsics) != n or len(args.image) != n:
        raise SchemaError(f"got {n} depth maps, {len(args.intrinsics)} intrinsics and {len(args.image)} images")
    if args.sigma and len(args.sigma) != n:
        raise SchemaError(f"got {n} depth maps but {len(args.sigma)} sigma maps")
    if not (0 < args.filter_fraction <= 1):
        raise SchemaError("--filter-fraction must be in (0, 1]")
    clouds = []
    for i in range(n):
        depth = read_pfm(args.depth[i]).astype(np.float64)
        K, ext = read_intrinsics(args.intrinsics[i])
        image = read_ppm(args.image[i])
        sigma = read_pfm(args.sigma[i]).astype(np.float64) if args.sigma else None
        if depth.shape != K.shape or image.shape[:2] != K.shape or (sigma is not None and sigma.shape != K.shape):
            raise SchemaError(f"input {i}: depth, image, sigma and intrinsics sizes disagree")
        points, colors = pointcloud_from_depth(depth, K, image, sigma, args.filter_fraction)
        clouds.append((points, colors, ext))
    points, colors = merge_pointclouds(clouds)
    write_ply(args.out, points, colors)
    print(f"wrote {len(points)} vertices to {args.out}")


def cmd_curves(args) -> None:
    cfg = _config(args)
    model = _load_checkpoint(args.checkpoint, cfg if args.config else None)
    proto = _protocol(args, cfg)
    fractions = sorted({float(f) for f in args.fractions.split(",")}, reverse=True)
    ds = Dataset(args.dataset)
    entries = ds.select(split=args.split) if args.split != "all" else ds.entries
    per_fraction: dict[float, list] = {q: [] for q in fractions}
    for i, entry in enumerate(entries):
        sample = ds.load(entry)
        um = _predict(model, sample, args.samples, cfg.seed, i)
        for q, rep in uncertainty_curve(um.mean, um.std, sample.depth, proto, fractions):
            per_fraction[q].append(rep)
    if not entries:
        raise SchemaError(f"no samples in split {args.split!r}")
    rows = [(q, average_reports(per_fraction[q])) for q in fractions]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_curve_csv(out, rows)
    for q, r in rows:
        print(f"{q:.3f}\tabs_rel {r.abs_rel:.4f}\trmse {r.rmse:.4f}")


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _eval_flags(p):
    p.add_argument("--max-depth", type=float, default=None)
    p.add_argument("--crop", choices=["none", "garg"], default=None)
    p.add_argument("--median-scale", action="store_true")
    p.add_argument("--samples", type=int, default=1, help="latent samples per image")
    p.add_argument("--split", default="val", help="manifest split to evaluate, or 'all'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raydepth", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--samples", type=int, help="samples per camera family")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("dataset")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    _eval_flags(p)
    p.add_argument("--intrinsics-noise", type=float, default=0.0)
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict depth and sigma for one image")
    p.add_argument("--samples", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("intrinsics")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("pointcloud", help="unproject depth maps into a merged PLY")
    p.add_argument("--depth", nargs="+", required=True)
    p.add_argument("--intrinsics", nargs="+", required=True, help="intrinsics files; a 4th line holds extrinsics")
    p.add_argument("--image", nargs="+", required=True)
    p.add_argument("--sigma", nargs="+")
    p.add_argument("--filter-fraction", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pointcloud)

    p = sub.add_parser("curves", help="uncertainty filtering curve")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    _eval_flags(p)
    p.add_argument("--fractions", default="1.0,0.75,0.5,0.25")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("out")
    p.set_defaults(func=cmd_curves)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        args.func(args)
    except VALIDATION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
