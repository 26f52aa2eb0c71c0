"""Optimization loop: decoupled-weight-decay Adam, warmup/step-decay schedule,
strided query sampling and checkpointing."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .augment import AugmentConfig
from .diffcore import CheckpointError, RngStream, load_checkpoint, save_checkpoint
from .losses import LossWeights, kl_loss, normal_loss, smooth_l1, total_loss
from .network import DepthNet, forward_train
from .synthdata import RenderedSample

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "L_D", "L_N", "L_K", "total", "lr")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ScheduleConfig:
    lr_init: float = 1e-5
    lr_base: float = 1e-4
    warmup_epochs: int = 1
    decay_gamma: float = 0.8
    decay_every: int = 5
    epochs: int = 10
    batch_size: int = 4
    query_stride: int = 8
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if not (0 < self.decay_gamma <= 1):
            raise ValueError(f"decay_gamma must be in (0, 1], got {self.decay_gamma}")
        if self.lr_init <= 0 or self.lr_base <= 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.query_stride < 1 or self.decay_every < 1 or self.epochs < 0:
            raise ValueError("batch_size, query_stride, decay_every must be >= 1 and epochs >= 0")


class AdamW(torch.optim.Optimizer):
    """Adam with bias correction and weight decay applied directly to the weights.

    A step whose gradients contain NaN/inf is skipped entirely; ``step``
    returns False in that case.
    """

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4):
        if lr < 0:
            raise ValueError(f"invalid learning rate {lr}")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay))
        self.step_count = 0

    @torch.no_grad()
    def step(self, closure=None) -> bool:
        params = [p for g in self.param_groups for p in g["params"] if p.grad is not None]
        if any(not torch.isfinite(p.grad).all() for p in params):
            return False
        self.step_count += 1
        t = self.step_count
        for group in self.param_groups:
            lr, (b1, b2), eps, wd = group["lr"], group["betas"], group["eps"], group["weight_decay"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                state = self.state[p]
                if not state:
                    state["m"] = torch.zeros_like(p)
                    state["v"] = torch.zeros_like(p)
                m, v = state["m"], state["v"]
                m.mul_(b1).add_(p.grad, alpha=1 - b1)
                v.mul_(b2).addcmul_(p.grad, p.grad, value=1 - b2)
                m_hat = m / (1 - b1**t)
                v_hat = v / (1 - b2**t)
                if wd:
                    p.mul_(1 - lr * wd)
                p.sub_(lr * m_hat / (v_hat.sqrt() + eps))
        return True

    def set_lr(self, lr: float) -> None:
        for group in self.param_groups:
            group["lr"] = lr


def lr_at(epoch: int, step_in_epoch: int, steps_per_epoch: int, cfg: ScheduleConfig) -> float:
    """Linear warmup from ``lr_init`` to ``lr_base``, then ``gamma`` applied once per ``decay_every`` epochs."""
    if epoch < cfg.warmup_epochs:
        progress = (epoch + step_in_epoch / max(1, steps_per_epoch)) / cfg.warmup_epochs
        return cfg.lr_init + (cfg.lr_base - cfg.lr_init) * progress
    return cfg.lr_base * cfg.decay_gamma ** ((epoch - cfg.warmup_epochs) // cfg.decay_every)


def strided_queries(H: int, W: int, stride: int, rng: Optional[np.random.Generator]):
    """Regular ``ceil(H/s) x ceil(W/s)`` pixel grid with a random phase offset.

    The phase is drawn from ``[0, s)`` per axis, narrowed where needed so the
    last row/column stays inside the image.  Returns float ``(u, v)`` arrays.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    nh, nw = -(-H // stride), -(-W // stride)
    span_v = min(stride, H - stride * (nh - 1))
    span_u = min(stride, W - stride * (nw - 1))
    pv = int(rng.integers(span_v)) if rng is not None else 0
    pu = int(rng.integers(span_u)) if rng is not None else 0
    v, u = np.meshgrid(pv + stride * np.arange(nh, dtype=np.float64), pu + stride * np.arange(nw, dtype=np.float64), indexing="ij")
    return u, v


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def checkpoint_entries(model: DepthNet, optimizer: Optional[AdamW] = None, epoch: int = -1, extra: Optional[dict] = None) -> dict:
    entries = {}
    for name, p in sorted(model.named_parameters()):
        entries[f"param/{name}"] = p.detach().cpu().numpy().copy()
    meta = {"config": model.config_dict(), **(extra or {})}
    entries["meta/config"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    entries["state/epoch"] = np.array(epoch, dtype=np.int64)
    if optimizer is not None:
        entries["state/step"] = np.array(optimizer.step_count, dtype=np.int64)
        names = {id(p): n for n, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p)
                if state:
                    entries[f"optim/{names[id(p)]}/m"] = state["m"].cpu().numpy().copy()
                    entries[f"optim/{names[id(p)]}/v"] = state["v"].cpu().numpy().copy()
    return entries


def save_model(path, model: DepthNet, optimizer: Optional[AdamW] = None, epoch: int = -1, extra: Optional[dict] = None):
    save_checkpoint(path, checkpoint_entries(model, optimizer, epoch, extra))


def checkpoint_meta(entries) -> dict:
    return json.loads(bytes(entries["meta/config"]).decode("utf-8"))


def load_model(path, optimizer_cfg: Optional[ScheduleConfig] = None):
    """Rebuild a model (and optionally its optimizer) from a checkpoint file.

    Returns ``(model, optimizer_or_None, epoch, meta)``.
    """
    entries = load_checkpoint(path)
    meta = checkpoint_meta(entries)
    model = DepthNet.from_config_dict(meta["config"])
    params = dict(model.named_parameters())
    expected = {f"param/{n}" for n in params}
    stored = {k for k in entries if k.startswith("param/")}
    if expected != stored:
        raise CheckpointError(f"checkpoint parameters do not match config: missing {sorted(expected - stored)[:3]}, extra {sorted(stored - expected)[:3]}")
    with torch.no_grad():
        for name, p in params.items():
            arr = entries[f"param/{name}"]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"parameter {name}: checkpoint shape {arr.shape} != model {tuple(p.shape)}")
            p.copy_(torch.from_numpy(arr))
    optimizer = None
    if optimizer_cfg is not None:
        optimizer = make_optimizer(model, optimizer_cfg)
        optimizer.step_count = int(entries.get("state/step", np.array(0)))
        for name, p in params.items():
            if f"optim/{name}/m" in entries:
                optimizer.state[p] = {
                    "m": torch.from_numpy(entries[f"optim/{name}/m"].copy()),
                    "v": torch.from_numpy(entries[f"optim/{name}/v"].copy()),
                }
    return model, optimizer, int(entries["state/epoch"]), meta


def make_optimizer(model: DepthNet, cfg: ScheduleConfig) -> AdamW:
    return AdamW(model.parameters(), lr=cfg.lr_init, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def make_batches(samples: Sequence[RenderedSample], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffle, then chunk within same-resolution groups (kept in shuffled order)."""
    order = rng.permutation(len(samples))
    groups: dict[tuple, list[int]] = {}
    for i in order:
        groups.setdefault(samples[i].image.shape[:2], []).append(int(i))
    batches = []
    for idx in groups.values():
        batches.extend(idx[j : j + batch_size] for j in range(0, len(idx), batch_size))
    perm = rng.permutation(len(batches))
    return [batches[i] for i in perm]


def batch_losses(model: DepthNet, batch, schedule: ScheduleConfig, augment, weights: LossWeights, stream: RngStream):
    out = forward_train(model, batch, schedule.query_stride, stream.numpy, stream.torch_generator(), augment)
    mask = out.gt_mask
    l_d = smooth_l1(out.pred, np.where(mask, out.gt, 0.0), mask, weights.beta)
    dense = np.array([s.dense for s in batch])
    if dense.any() and out.pred.shape[1] > 1 and out.pred.shape[2] > 1:
        l_n, _ = normal_loss(out.pred[torch.from_numpy(dense)], out.gt[dense], mask[dense],
                             [K for K, d in zip(out.intrinsics, dense) if d], out.u, out.v)
    else:
        l_n = out.pred.sum() * 0.0
    l_k = kl_loss(out.latent.mean, out.latent.log_var)
    return l_d, l_n, l_k, total_loss(l_d, l_n, l_k, weights)


@dataclass
class TrainResult:
    model: DepthNet
    optimizer: AdamW
    log: list = field(default_factory=list)
    checkpoint: Optional[Path] = None


def train(
    samples: Sequence[RenderedSample],
    model: DepthNet,
    schedule: ScheduleConfig,
    augment: Optional[AugmentConfig],
    weights: LossWeights,
    seed: int,
    out_dir=None,
    optimizer: Optional[AdamW] = None,
    start_epoch: int = 0,
    extra_meta: Optional[dict] = None,
) -> TrainResult:
    """Run ``schedule.epochs`` epochs (counting from ``start_epoch``) over in-memory samples.

    Writes ``losses.csv`` and ``checkpoint.ckpt`` (plus ``epoch_NNN.ckpt``)
    into ``out_dir`` when given.
    """
    if len(samples) == 0:
        raise ValueError("training needs a non-empty dataset")
    optimizer = optimizer or make_optimizer(model, schedule)
    out_dir = Path(out_dir) if out_dir is not None else None
    result = TrainResult(model, optimizer)
    root = RngStream(seed)
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "losses.csv"
        if start_epoch == 0 or not log_path.exists():
            log_path.write_text(",".join(LOG_COLUMNS) + "\n")
        if start_epoch == 0:
            save_model(out_dir / "checkpoint.ckpt", model, optimizer, -1, extra_meta)
            result.checkpoint = out_dir / "checkpoint.ckpt"
    model.train()
    for epoch in range(start_epoch, start_epoch + schedule.epochs):
        batches = make_batches(samples, schedule.batch_size, root.child(0, epoch).numpy)
        sums = np.zeros(4)
        lr = schedule.lr_init
        for b, idx in enumerate(batches):
            lr = lr_at(epoch, b, len(batches), schedule)
            optimizer.set_lr(lr)
            stream = root.child(1, epoch, b)
            l_d, l_n, l_k, loss = batch_losses(model, [samples[i] for i in idx], schedule, augment, weights, stream)
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b} (seed {seed}, samples {idx})")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            if not optimizer.step():
                raise TrainingError(f"non-finite gradient at epoch {epoch}, batch {b} (seed {seed}, samples {idx})")
            sums += [l_d.item(), l_n.item(), l_k.item(), loss.item()]
        means = sums / len(batches)
        row = {"epoch": epoch, "L_D": means[0], "L_N": means[1], "L_K": means[2], "total": means[3], "lr": lr}
        result.log.append(row)
        log.info("epoch %d  L_D %.4f  L_N %.4f  L_K %.4f  total %.4f  lr %.2e", epoch, *means, lr)
        if out_dir is not None:
            with open(out_dir / "losses.csv", "a") as fh:
                fh.write(",".join(repr(float(row[c])) if c != "epoch" else str(epoch) for c in LOG_COLUMNS) + "\n")
            save_model(out_dir / f"epoch_{epoch:03d}.ckpt", model, optimizer, epoch, extra_meta)
            save_model(out_dir / "checkpoint.ckpt", model, optimizer, epoch, extra_meta)
            result.checkpoint = out_dir / "checkpoint.ckpt"
    model.eval()
    return result
