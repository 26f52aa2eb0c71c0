"""Training objectives: smooth-L1 depth, surface-normal cosine and latent KL terms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .geometry import PinholeIntrinsics, pixel_rays


@dataclass(frozen=True)
class LossWeights:
    normal: float = 0.2
    kl: float = 0.1
    beta: float = 1.0

    def __post_init__(self):
        if self.normal < 0 or self.kl < 0 or self.beta <= 0:
            raise ValueError(f"loss weights must be >= 0 and beta > 0, got {self}")


def _as_tensor(x, like: torch.Tensor) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(like.dtype)
    return torch.as_tensor(np.asarray(x), dtype=like.dtype)


def smooth_l1(pred: torch.Tensor, gt, mask, beta: float = 1.0) -> torch.Tensor:
    """Mean over valid pixels of 0.5 d^2 / beta (d < beta) or d - 0.5 beta, with d = |gt - pred|."""
    mask = torch.as_tensor(np.asarray(mask, dtype=bool)) if not isinstance(mask, torch.Tensor) else mask.bool()
    if int(mask.sum()) == 0:
        raise ValueError("smooth_l1 needs at least one valid pixel")
    diff = (pred - _as_tensor(gt, pred)).abs()[mask]
    per_pixel = torch.where(diff < beta, 0.5 * diff * diff / beta, diff - 0.5 * beta)
    return per_pixel.mean()


def grid_normals(depth: torch.Tensor, intrinsics: Sequence[PinholeIntrinsics], u: np.ndarray, v: np.ndarray):
    """Unnormalized forward-difference normals on a (B, h, w) grid of depths at pixels ``(u, v)``.

    Returns (B, h-1, w-1, 3).
    """
    rays = torch.as_tensor(np.stack([pixel_rays(K, u, v) for K in intrinsics]), dtype=depth.dtype)
    P = depth.unsqueeze(-1) * rays
    du = P[:, :-1, 1:] - P[:, :-1, :-1]
    dv = P[:, 1:, :-1] - P[:, :-1, :-1]
    return torch.linalg.cross(du, dv, dim=-1)


def normal_loss(
    pred: torch.Tensor,
    gt,
    gt_mask,
    intrinsics: Sequence[PinholeIntrinsics],
    u: np.ndarray,
    v: np.ndarray,
) -> tuple[torch.Tensor, int]:
    """(1 / 2N) sum(1 - cos) between predicted and ground-truth normals.

    ``pred``, ``gt`` and ``gt_mask`` are (B, h, w) over the pixel grid ``(u, v)``
    (shape (h, w)).  N counts pixels where both normals are defined.  Returns
    ``(loss, N)``; when N is 0 the loss is a zero that keeps the graph.
    """
    gt_t = _as_tensor(np.where(np.asarray(gt_mask), np.asarray(gt), 0.0) if not isinstance(gt, torch.Tensor) else gt, pred)
    mask = torch.as_tensor(np.asarray(gt_mask, dtype=bool)) if not isinstance(gt_mask, torch.Tensor) else gt_mask.bool()
    n_pred = grid_normals(pred, intrinsics, u, v)
    with torch.no_grad():
        n_gt = grid_normals(gt_t, intrinsics, u, v)
    len_pred = torch.linalg.vector_norm(n_pred, dim=-1)
    len_gt = torch.linalg.vector_norm(n_gt, dim=-1)
    valid = mask[:, :-1, :-1] & mask[:, :-1, 1:] & mask[:, 1:, :-1] & (len_gt > 0) & (len_pred > 0)
    count = int(valid.sum())
    if count == 0:
        return pred.sum() * 0.0, 0
    cos = (n_pred[valid] * n_gt[valid]).sum(-1) / (len_pred[valid] * len_gt[valid])
    return (1.0 - cos).sum() / (2.0 * count), count


def kl_loss(mean: torch.Tensor, log_var: torch.Tensor) -> torch.Tensor:
    """-(1 / 2N) sum(1 + s - mu^2 - exp(s)) over all latent entries."""
    return -0.5 * (1.0 + log_var - mean * mean - torch.exp(log_var)).mean()


def total_loss(depth_loss, normal_term, kl_term, weights: LossWeights):
    return depth_loss + weights.normal * normal_term + weights.kl * kl_term
