"""Geometric (Fourier ray) embeddings, image feature embeddings and encoder tokens."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffcore import ShapeError, concat, gelu
from .geometry import PinholeIntrinsics, ray_direction

COORD_KINDS = ("rays", "pixels")


@dataclass(frozen=True)
class FourierConfig:
    """Fourier layout: ``bands`` (even) split into sin/cos halves over log-spaced frequencies in [1, max_res/2].

    ``coords="rays"`` encodes unit viewing rays (3 components).  ``coords="pixels"``
    encodes image-normalized 2D pixel coordinates instead and exists only as the
    calibration-free baseline.
    """

    bands: int = 16
    max_res: float = 64.0
    coords: str = "rays"

    def __post_init__(self):
        if self.bands < 0 or self.bands % 2:
            raise ValueError(f"bands must be even and >= 0, got {self.bands}")
        if self.max_res < 2:
            raise ValueError(f"max_res must be >= 2, got {self.max_res}")
        if self.coords not in COORD_KINDS:
            raise ValueError(f"coords must be one of {COORD_KINDS}, got {self.coords!r}")

    @property
    def frequencies(self) -> np.ndarray:
        half = self.bands // 2
        if half == 0:
            return np.zeros(0)
        return np.logspace(0.0, np.log10(self.max_res / 2.0), half)

    @property
    def components(self) -> int:
        return 3 if self.coords == "rays" else 2

    @property
    def dim(self) -> int:
        return self.components * (self.bands + 1)


def _encode(values: np.ndarray, cfg: FourierConfig) -> np.ndarray:
    freqs = cfg.frequencies
    angles = np.pi * values[..., :, None] * freqs
    blocks = np.concatenate([values[..., :, None], np.sin(angles), np.cos(angles)], axis=-1)
    return blocks.reshape(*values.shape[:-1], -1)


def fourier_encode(direction, cfg: FourierConfig) -> np.ndarray:
    """Encode unit direction(s) of shape (..., 3) into (..., 3(F+1)) features.

    Per component: ``[c, sin(pi f_k c)..., cos(pi f_k c)...]``; blocks are
    concatenated x, y, z.
    """
    d = np.asarray(direction, dtype=np.float64)
    if d.shape[-1] != 3:
        raise ShapeError("fourier_encode", f"expected trailing dimension 3, got {d.shape}")
    if np.any(np.abs(np.linalg.norm(d, axis=-1) - 1.0) > 1e-6):
        raise ValueError("fourier_encode expects unit-length directions")
    return _encode(d, FourierConfig(cfg.bands, cfg.max_res, "rays"))


def pixel_coordinate_encode(u, v, width: int, height: int, cfg: FourierConfig) -> np.ndarray:
    """Fourier features of pixel coordinates normalized to [-1, 1] by the image size."""
    x = 2.0 * (np.asarray(u, dtype=np.float64) + 0.5) / width - 1.0
    y = 2.0 * (np.asarray(v, dtype=np.float64) + 0.5) / height - 1.0
    return _encode(np.stack(np.broadcast_arrays(x, y), axis=-1), cfg)


def geometric_embeddings(K: PinholeIntrinsics, u, v, cfg: FourierConfig) -> np.ndarray:
    """One embedding per pixel, order preserved; shape (..., cfg.dim)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.size == 0:
        return np.zeros(u.shape + (cfg.dim,))
    if cfg.coords == "pixels":
        return pixel_coordinate_encode(u, v, K.width, K.height, cfg)
    return fourier_encode(ray_direction(K, u, v), cfg)


class ImageEncoder(nn.Module):
    """Small stride-2 conv pyramid producing 1/4-resolution multi-scale features.

    The 1/8 and 1/16 maps are bilinearly upsampled to 1/4 and concatenated
    with the 1/4 map, giving ``sum(channels)`` output channels.
    """

    def __init__(self, channels: Sequence[int] = (8, 16, 32)):
        super().__init__()
        c4, c8, c16 = channels
        self.channels = tuple(channels)
        self.stem = nn.ModuleList([nn.Conv2d(3, c4, 3, 2, 1), nn.Conv2d(c4, c4, 3, 2, 1)])
        self.down8 = nn.ModuleList([nn.Conv2d(c4, c8, 3, 2, 1), nn.Conv2d(c8, c8, 3, 1, 1)])
        self.down16 = nn.ModuleList([nn.Conv2d(c8, c16, 3, 2, 1), nn.Conv2d(c16, c16, 3, 1, 1)])
        # He init keeps feature scale comparable to the embeddings they are concatenated with
        for conv in self.modules():
            if isinstance(conv, nn.Conv2d):
                nn.init.kaiming_normal_(conv.weight, nonlinearity="relu")
                nn.init.zeros_(conv.bias)

    @property
    def out_channels(self) -> int:
        return sum(self.channels)

    @staticmethod
    def _run(convs, x):
        for conv in convs:
            x = gelu(conv(x))
        return x

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """``image``: (B, 3, H, W) in [0, 1] -> (B, C, ceil(H/4), ceil(W/4))."""
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeError("image_encoder", f"expected (B,3,H,W), got {tuple(image.shape)}")
        if image.shape[2] < 8 or image.shape[3] < 8:
            raise ValueError(f"image must be at least 8x8, got {image.shape[2]}x{image.shape[3]}")
        f4 = self._run(self.stem, image)
        f8 = self._run(self.down8, f4)
        f16 = self._run(self.down16, f8)
        size = f4.shape[-2:]
        up8 = F.interpolate(f8, size=size, mode="bilinear", align_corners=False)
        up16 = F.interpolate(f16, size=size, mode="bilinear", align_corners=False)
        return torch.cat([f4, up8, up16], dim=1)


def bilinear_sample(fm: torch.Tensor, x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    """Sample a (B, C, h, w) feature map at continuous cell coordinates.

    ``x`` (column) and ``y`` (row) have shape (B, N); cell centers are at
    integer coordinates and positions are clamped to the map.  Returns (B, N, C).
    """
    B, C, h, w = fm.shape
    if x.shape != y.shape or x.dim() != 2 or x.shape[0] != B:
        raise ShapeError("bilinear_sample", f"coordinates {tuple(x.shape)} do not match batch {B}")
    x = x.to(fm.dtype).clamp(0, w - 1)
    y = y.to(fm.dtype).clamp(0, h - 1)
    x0 = torch.floor(x).long().clamp(max=w - 1)
    y0 = torch.floor(y).long().clamp(max=h - 1)
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    wx = (x - x0.to(fm.dtype)).unsqueeze(-1)
    wy = (y - y0.to(fm.dtype)).unsqueeze(-1)
    flat = fm.reshape(B, C, h * w).transpose(1, 2)

    def gather(yy, xx):
        index = (yy * w + xx).unsqueeze(-1).expand(-1, -1, C)
        return torch.gather(flat, 1, index)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def build_encoder_tokens(
    fm: torch.Tensor,
    intrinsics: Sequence[PinholeIntrinsics],
    u: np.ndarray,
    v: np.ndarray,
    cfg: FourierConfig,
) -> torch.Tensor:
    """Concatenate sampled image features with geometric embeddings.

    ``intrinsics`` are already rescaled to feature-map resolution and ``u, v``
    (shape (B, N)) are feature-map coordinates, possibly jittered.
    Returns (B, N, C + cfg.dim).
    """
    B = fm.shape[0]
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if len(intrinsics) != B or u.shape != v.shape or u.shape[0] != B:
        raise ShapeError("build_encoder_tokens", "batch size differs between features, intrinsics and pixels")
    image_part = bilinear_sample(fm, torch.from_numpy(u), torch.from_numpy(v))
    geo = np.stack([geometric_embeddings(K, u[b], v[b], cfg) for b, K in enumerate(intrinsics)])
    geo_part = torch.from_numpy(geo).to(fm.dtype)
    return concat([image_part, geo_part], dim=-1)


def query_embeddings(intrinsics: Sequence[PinholeIntrinsics], u, v, cfg: FourierConfig, dtype=torch.float32):
    """Decoder queries: geometric embeddings only, shape (B, N, cfg.dim)."""
    geo = np.stack([geometric_embeddings(K, np.asarray(u)[b], np.asarray(v)[b], cfg) for b, K in enumerate(intrinsics)])
    return torch.from_numpy(geo).to(dtype)
