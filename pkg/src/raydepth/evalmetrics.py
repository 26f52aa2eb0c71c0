"""Depth evaluation protocol: standard error/accuracy metrics, median scaling,
the Garg crop, uncertainty filtering curves and intrinsics-noise sweeps."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .augment import perturb_intrinsics
from .diffcore import RngStream
from .geometry import DepthMap, PinholeIntrinsics

GARG_ROWS = (0.40810811, 0.99189189)
GARG_COLS = (0.03594771, 0.96405229)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class EvalProtocol:
    min_depth: float = 1e-3
    max_depth: float = 80.0
    crop: str = "none"
    median_scale: bool = False

    def __post_init__(self):
        if not (0 <= self.min_depth < self.max_depth):
            raise ValueError(f"need 0 <= min_depth < max_depth, got {self.min_depth}, {self.max_depth}")
        if self.crop not in ("none", "garg"):
            raise ValueError(f"crop must be 'none' or 'garg', got {self.crop!r}")


@dataclass
class MetricReport:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    count: int
    median_scaled: bool = False
    scale: float = 1.0

    METRICS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")

    def as_dict(self) -> dict:
        return asdict(self)


def garg_crop(height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    r0, r1 = int(GARG_ROWS[0] * height), int(GARG_ROWS[1] * height)
    c0, c1 = int(GARG_COLS[0] * width), int(GARG_COLS[1] * width)
    mask[r0:r1, c0:c1] = True
    return mask


def evaluation_mask(gt: DepthMap, proto: EvalProtocol, extra: Optional[np.ndarray] = None) -> np.ndarray:
    mask = gt.mask & (gt.values >= proto.min_depth) & (gt.values <= proto.max_depth)
    if proto.crop == "garg":
        mask &= garg_crop(*gt.shape)
    if extra is not None:
        mask &= extra
    return mask


def median_scale(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, float]:
    """Scale ``pred`` by median(gt) / median(pred) over ``mask``."""
    if not np.any(mask):
        raise EvaluationError("median scaling needs at least one valid pixel")
    med_pred = float(np.median(pred[mask]))
    med_gt = float(np.median(gt[mask]))
    if med_pred <= 0 or med_gt <= 0:
        raise EvaluationError(f"median scaling needs positive medians, got pred {med_pred}, gt {med_gt}")
    factor = med_gt / med_pred
    return pred * factor, factor


def _metrics(pred: np.ndarray, gt: np.ndarray) -> dict:
    ratio = np.maximum(pred / gt, gt / pred)
    diff = pred - gt
    return {
        "abs_rel": float(np.mean(np.abs(diff) / gt)),
        "sq_rel": float(np.mean(diff**2 / gt)),
        "rmse": float(np.sqrt(np.mean(diff**2))),
        "rmse_log": float(np.sqrt(np.mean((np.log(pred) - np.log(gt)) ** 2))),
        "delta1": float(np.mean(ratio < 1.25)),
        "delta2": float(np.mean(ratio < 1.25**2)),
        "delta3": float(np.mean(ratio < 1.25**3)),
    }


def depth_metrics(pred, gt: DepthMap, proto: EvalProtocol = EvalProtocol(), extra_mask=None) -> MetricReport:
    """Metrics over gt-valid pixels inside the depth range (and crop / ``extra_mask``).

    With ``proto.median_scale`` predictions are median-scaled first; they are
    always clamped to ``[min_depth, max_depth]`` before comparison.
    """
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != gt.shape:
        raise EvaluationError(f"prediction shape {pred.shape} != ground truth {gt.shape}")
    mask = evaluation_mask(gt, proto, extra_mask)
    if not np.any(mask):
        raise EvaluationError("no valid pixels to evaluate")
    scale = 1.0
    if proto.median_scale:
        pred, scale = median_scale(pred, gt.values, mask)
    p = np.clip(pred[mask], max(proto.min_depth, 1e-12), proto.max_depth)
    values = _metrics(p, gt.values[mask])
    return MetricReport(**values, count=int(mask.sum()), median_scaled=proto.median_scale, scale=scale)


def average_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Per-sample metrics averaged with equal weight (pixel counts summed)."""
    if not reports:
        raise EvaluationError("no reports to average")
    values = {m: math.fsum(getattr(r, m) for r in reports) / len(reports) for m in MetricReport.METRICS}
    scale = math.fsum(r.scale for r in reports) / len(reports)
    return MetricReport(**values, count=sum(r.count for r in reports), median_scaled=reports[0].median_scaled, scale=scale)


def uncertainty_order(sigma: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Flat indices of valid pixels sorted by sigma, ties broken by pixel index."""
    flat = np.flatnonzero(mask)
    return flat[np.lexsort((flat, sigma.reshape(-1)[flat]))]


def uncertainty_curve(
    pred: np.ndarray,
    sigma: np.ndarray,
    gt: DepthMap,
    proto: EvalProtocol,
    fractions: Sequence[float],
) -> list[tuple[float, MetricReport]]:
    """Metrics over the ``floor(q N)`` lowest-sigma valid pixels for each fraction ``q``."""
    mask = evaluation_mask(gt, proto)
    order = uncertainty_order(np.asarray(sigma), mask)
    out = []
    for q in fractions:
        if not (0 < q <= 1):
            raise ValueError(f"fractions must lie in (0, 1], got {q}")
        keep = max(1, int(math.floor(q * len(order))))
        subset = np.zeros(mask.size, dtype=bool)
        subset[order[:keep]] = True
        out.append((q, depth_metrics(pred, gt, proto, subset.reshape(mask.shape))))
    return out


def intrinsics_noise_sweep(
    predict: Callable[[np.ndarray, PinholeIntrinsics], np.ndarray],
    samples: Sequence,
    levels: Sequence[float],
    proto: EvalProtocol,
    seed: int = 0,
) -> list[dict]:
    """Evaluate ``predict(image, K)`` with perturbed intrinsics at each noise level.

    Sample ``i`` draws its perturbation from the same stream at every level so
    levels differ only in noise magnitude.  Ground truth is never touched.
    Each entry holds ``level``, ``metric`` and ``scaled`` (median-scaled) reports.
    """
    metric_proto = EvalProtocol(proto.min_depth, proto.max_depth, proto.crop, False)
    scaled_proto = EvalProtocol(proto.min_depth, proto.max_depth, proto.crop, True)
    results = []
    for level in levels:
        if level < 0:
            raise ValueError("noise levels must be >= 0")
        metric, scaled = [], []
        for i, s in enumerate(samples):
            K = perturb_intrinsics(s.K, level, RngStream(seed).child(i).numpy)
            pred = predict(s.image, K)
            metric.append(depth_metrics(pred, s.depth, metric_proto))
            scaled.append(depth_metrics(pred, s.depth, scaled_proto))
        results.append({"level": level, "metric": average_reports(metric), "scaled": average_reports(scaled)})
    return results


# ---------------------------------------------------------------------------
# report files
# ---------------------------------------------------------------------------

REPORT_FIELDS = [f.name for f in fields(MetricReport)]


def write_reports_json(path, reports: dict) -> None:
    data = {name: (r.as_dict() if isinstance(r, MetricReport) else r) for name, r in reports.items()}
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def write_reports_csv(path, reports: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["name"] + REPORT_FIELDS)
        for name, r in reports.items():
            writer.writerow([name] + [_fmt(getattr(r, f)) for f in REPORT_FIELDS])


def write_curve_csv(path, rows: Sequence[tuple[float, MetricReport]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["fraction"] + list(MetricReport.METRICS) + ["count"])
        for q, r in rows:
            writer.writerow([_fmt(float(q))] + [_fmt(getattr(r, m)) for m in MetricReport.METRICS] + [r.count])
