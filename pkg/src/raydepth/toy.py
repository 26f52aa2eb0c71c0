"""Desk-scale zero-shot experiment: train on camera family A, evaluate on A and B.

Used by the acceptance suite.  Samples come from the same RNG streams that
``make_dataset`` uses, so the in-memory run matches ``raydepth synth`` +
``raydepth train`` on the same config.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .config import RunConfig
from .diffcore import RngStream
from .evalmetrics import EvalProtocol, MetricReport, average_reports, depth_metrics, intrinsics_noise_sweep, uncertainty_curve
from .network import DepthNet, predict_with_uncertainty
from .synthdata import RenderedSample, generate_samples
from .trainer import train

CURVE_FRACTIONS = (1.0, 0.75, 0.5, 0.25)
NOISE_LEVELS = (0.0, 0.05, 0.1, 0.2)


@dataclass
class ToySplits:
    train: list
    val: list
    test: list


@dataclass
class ToyRun:
    coords: str
    seed: int
    model: DepthNet
    log: list
    seconds: float
    val: Optional[MetricReport] = None
    test: Optional[MetricReport] = None
    extra: dict = field(default_factory=dict)


def toy_splits(cfg: RunConfig) -> ToySplits:
    """Train/val from the first family, the val split of the second family as test."""
    data = cfg.data
    if len(data.families) < 2:
        raise ValueError("the toy experiment needs two camera families")
    n = data.samples_per_family
    n_train = n - int(round(data.val_fraction * n))
    a, b = data.families[0], data.families[1]
    train_a = generate_samples(a, n_train, data.scene, cfg.seed, data.far, stream_key=0)
    val_a = generate_samples(a, n - n_train, data.scene, cfg.seed, data.far, stream_key=0, start=n_train)
    test_b = generate_samples(b, n - n_train, data.scene, cfg.seed, data.far, stream_key=1, start=n_train)
    return ToySplits(train_a, val_a, test_b)


def with_coords(cfg: RunConfig, coords: str, seed: Optional[int] = None) -> RunConfig:
    fourier = dataclasses.replace(cfg.fourier, coords=coords)
    return dataclasses.replace(cfg, fourier=fourier, seed=cfg.seed if seed is None else seed)


def build_model(cfg: RunConfig) -> DepthNet:
    torch.manual_seed(cfg.seed)
    return DepthNet(cfg.network, cfg.fourier)


def train_toy(cfg: RunConfig, splits: Optional[ToySplits] = None, out_dir=None) -> tuple[ToyRun, ToySplits]:
    splits = splits or toy_splits(cfg)
    model = build_model(cfg)
    start = time.perf_counter()
    result = train(splits.train, model, cfg.schedule, cfg.augment, cfg.losses, cfg.seed, out_dir)
    run = ToyRun(cfg.fourier.coords, cfg.seed, result.model, result.log, time.perf_counter() - start)
    return run, splits


def predictor(model: DepthNet, n_samples: int, seed: int):
    """``predict(image, K) -> mean depth`` drawing latents from a fixed-seed generator on every call."""

    def predict(image: np.ndarray, K) -> np.ndarray:
        gen = RngStream(seed).child(11).torch_generator()
        return predict_with_uncertainty(model, image, K, n_samples, gen).mean

    return predict


def evaluate(model: DepthNet, samples: Sequence[RenderedSample], proto: EvalProtocol, n_samples: int, seed: int) -> MetricReport:
    predict = predictor(model, n_samples, seed)
    return average_reports([depth_metrics(predict(s.image, s.K), s.depth, proto) for s in samples])


def curve(model: DepthNet, samples: Sequence[RenderedSample], proto: EvalProtocol, n_samples: int, seed: int, fractions=CURVE_FRACTIONS):
    """Per-sample uncertainty curves averaged over ``samples``; returns [(fraction, report)]."""
    per_fraction: dict = {q: [] for q in fractions}
    for i, s in enumerate(samples):
        gen = RngStream(seed).child(12, i).torch_generator()
        um = predict_with_uncertainty(model, s.image, s.K, n_samples, gen)
        for q, rep in uncertainty_curve(um.mean, um.std, s.depth, proto, fractions):
            per_fraction[q].append(rep)
    return [(q, average_reports(per_fraction[q])) for q in fractions]


def noise_sweep(model: DepthNet, samples: Sequence[RenderedSample], proto: EvalProtocol, n_samples: int, seed: int, levels=NOISE_LEVELS):
    return intrinsics_noise_sweep(predictor(model, n_samples, seed), samples, levels, proto, seed)
