"""Variational latent depth network.

Encoder tokens (image features + geometric embeddings) condition a learned
``N_l x 2 D_l`` latent array through one cross-attention layer and a stack
of self-attention blocks.  The result is split into a mean and a log-variance,
sampled with the reparameterization trick, and decoded per query from
geometric embeddings alone.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import augment as aug
from .diffcore import LayerNorm, ShapeError, dropout, gelu, softmax
from .embeddings import FourierConfig, ImageEncoder, build_encoder_tokens, query_embeddings
from .geometry import PinholeIntrinsics, rescale_intrinsics
from .synthdata import RenderedSample


@dataclass(frozen=True)
class NetworkConfig:
    n_latents: int = 64
    latent_dim: int = 64
    heads: int = 4
    self_layers: int = 3
    dropout: float = 0.1
    encoder_channels: tuple = (8, 16, 32)
    mlp_ratio: int = 2
    d_min: float = 0.1
    d_max: float = 80.0

    def __post_init__(self):
        object.__setattr__(self, "encoder_channels", tuple(self.encoder_channels))
        if self.latent_dim % self.heads:
            raise ValueError(f"latent_dim {self.latent_dim} must be divisible by heads {self.heads}")
        if self.n_latents < 1 or self.self_layers < 0:
            raise ValueError("n_latents must be >= 1 and self_layers >= 0")
        if not (0 <= self.dropout < 1):
            raise ValueError("dropout must be in [0, 1)")
        if not (0 < self.d_min < self.d_max):
            raise ValueError(f"need 0 < d_min < d_max, got {self.d_min}, {self.d_max}")

    @property
    def image_channels(self) -> int:
        return sum(self.encoder_channels)


def _init_linear(layer: nn.Linear) -> nn.Linear:
    nn.init.normal_(layer.weight, 0.0, 1.0 / math.sqrt(layer.in_features))
    if layer.bias is not None:
        nn.init.zeros_(layer.bias)
    return layer


class Attention(nn.Module):
    """Multi-head attention from ``q_dim`` queries onto ``kv_dim`` keys/values, output width ``q_dim``."""

    def __init__(self, q_dim: int, kv_dim: int, width: int, heads: int, rate: float = 0.0):
        super().__init__()
        if width % heads:
            raise ValueError(f"attention width {width} not divisible by {heads} heads")
        self.heads = heads
        self.rate = rate
        self.q = _init_linear(nn.Linear(q_dim, width))
        # key bias is redundant under softmax shift invariance
        self.k = _init_linear(nn.Linear(kv_dim, width, bias=False))
        self.v = _init_linear(nn.Linear(kv_dim, width))
        self.out = _init_linear(nn.Linear(width, q_dim))

    def forward(self, x_q, x_kv, generator=None):
        B, N, _ = x_q.shape
        M = x_kv.shape[1]
        h = self.heads
        q = self.q(x_q).view(B, N, h, -1).transpose(1, 2)
        k = self.k(x_kv).view(B, M, h, -1).transpose(1, 2)
        v = self.v(x_kv).view(B, M, h, -1).transpose(1, 2)
        weights = softmax(q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1]))
        weights = dropout(weights, self.rate, generator, self.training)
        mixed = (weights @ v).transpose(1, 2).reshape(B, N, -1)
        return self.out(mixed)


class MLP(nn.Module):
    def __init__(self, width: int, hidden: int, out: Optional[int] = None):
        super().__init__()
        self.fc1 = _init_linear(nn.Linear(width, hidden))
        self.fc2 = _init_linear(nn.Linear(hidden, out or width))

    def forward(self, x):
        return self.fc2(gelu(self.fc1(x)))


class CrossBlock(nn.Module):
    """Pre-norm cross-attention + MLP, both residual."""

    def __init__(self, q_dim: int, kv_dim: int, heads: int, mlp_ratio: int, rate: float):
        super().__init__()
        self.norm_q = LayerNorm(q_dim)
        self.norm_kv = LayerNorm(kv_dim)
        self.attn = Attention(q_dim, kv_dim, q_dim, heads, rate)
        self.norm_mlp = LayerNorm(q_dim)
        self.mlp = MLP(q_dim, mlp_ratio * q_dim)
        self.rate = rate

    def forward(self, x, context, generator=None):
        x = x + dropout(self.attn(self.norm_q(x), self.norm_kv(context), generator), self.rate, generator, self.training)
        return x + dropout(self.mlp(self.norm_mlp(x)), self.rate, generator, self.training)


class SelfBlock(CrossBlock):
    def __init__(self, width: int, heads: int, mlp_ratio: int, rate: float):
        super().__init__(width, width, heads, mlp_ratio, rate)

    def forward(self, x, context=None, generator=None):
        h = self.norm_q(x)
        x = x + dropout(self.attn(h, h, generator), self.rate, generator, self.training)
        return x + dropout(self.mlp(self.norm_mlp(x)), self.rate, generator, self.training)


@dataclass
class ConditionedLatent:
    mean: torch.Tensor
    log_var: torch.Tensor


@dataclass
class UncertaintyMap:
    mean: np.ndarray
    std: np.ndarray
    samples: Optional[np.ndarray] = None


class DepthNet(nn.Module):
    def __init__(self, cfg: NetworkConfig = NetworkConfig(), fourier: FourierConfig = FourierConfig()):
        super().__init__()
        self.cfg = cfg
        self.fourier = fourier
        D = cfg.latent_dim
        self.image_encoder = ImageEncoder(cfg.encoder_channels)
        self.token_dim = cfg.image_channels + fourier.dim
        self.query_dim = fourier.dim
        self.latents = nn.Parameter(torch.randn(cfg.n_latents, 2 * D) * 0.02)
        self.condition = CrossBlock(2 * D, self.token_dim, cfg.heads, cfg.mlp_ratio, cfg.dropout)
        self.process = nn.ModuleList(
            [SelfBlock(2 * D, cfg.heads, cfg.mlp_ratio, cfg.dropout) for _ in range(cfg.self_layers)]
        )
        self.latent_norm = LayerNorm(2 * D)
        self.query_in = _init_linear(nn.Linear(self.query_dim, D))
        self.decode = CrossBlock(D, D, cfg.heads, cfg.mlp_ratio, 0.0)
        self.head_norm = LayerNorm(D)
        self.head = MLP(D, cfg.mlp_ratio * D, 1)

    # -- stages --------------------------------------------------------------

    def encode_condition(self, tokens: torch.Tensor, generator=None) -> ConditionedLatent:
        """``tokens`` (B, N, token_dim) -> mean and log-variance, each (B, N_l, D_l)."""
        if tokens.dim() != 3 or tokens.shape[1] == 0:
            raise ValueError("encode_condition needs a non-empty (B, N, D) token tensor")
        if tokens.shape[-1] != self.token_dim:
            raise ShapeError("encode_condition", f"token dim {tokens.shape[-1]} != {self.token_dim}")
        x = self.latents.unsqueeze(0).expand(tokens.shape[0], -1, -1)
        x = self.condition(x, tokens, generator)
        for block in self.process:
            x = block(x, generator=generator)
        x = self.latent_norm(x)
        mean, log_var = x.chunk(2, dim=-1)
        return ConditionedLatent(mean, log_var)

    @staticmethod
    def sample_latent(c: ConditionedLatent, generator=None, sigma_scale: float = 1.0) -> torch.Tensor:
        """Reparameterized draw ``mean + exp(log_var / 2) * eps``; ``sigma_scale=0`` returns the mean."""
        if sigma_scale == 0:
            return c.mean
        eps = torch.randn(c.mean.shape, generator=generator, dtype=c.mean.dtype)
        return c.mean + sigma_scale * torch.exp(0.5 * c.log_var) * eps

    def decode_logits(self, z: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
        if queries.shape[-1] != self.query_dim:
            raise ShapeError("decode_depth", f"query dim {queries.shape[-1]} != {self.query_dim}")
        if z.shape[-1] != self.cfg.latent_dim:
            raise ShapeError("decode_depth", f"latent dim {z.shape[-1]} != {self.cfg.latent_dim}")
        h = self.query_in(queries)
        h = self.decode(h, z)
        return self.head(self.head_norm(h)).squeeze(-1)

    def depth_from_logits(self, a: torch.Tensor) -> torch.Tensor:
        return self.cfg.d_min + (self.cfg.d_max - self.cfg.d_min) * torch.sigmoid(a)

    def decode_depth(self, z: torch.Tensor, queries: torch.Tensor) -> torch.Tensor:
        """``z`` (B, N_l, D_l), ``queries`` (B, M, query_dim) -> depths (B, M) in (d_min, d_max)."""
        return self.depth_from_logits(self.decode_logits(z, queries))

    # -- token assembly ------------------------------------------------------

    def encoder_tokens(
        self,
        images: torch.Tensor,
        intrinsics: Sequence[PinholeIntrinsics],
        rng: Optional[np.random.Generator] = None,
        ray_jitter: bool = False,
        dropout_max: float = 0.0,
    ) -> torch.Tensor:
        """Image features at 1/4 resolution joined with embeddings from intrinsics rescaled to match."""
        fm = self.image_encoder(images)
        h, w = fm.shape[-2:]
        H, W = images.shape[-2:]
        fm_K = [rescale_intrinsics(K, w / W, h / H) for K in intrinsics]
        v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
        B = images.shape[0]
        u = np.broadcast_to(u.reshape(-1), (B, h * w)).copy()
        v = np.broadcast_to(v.reshape(-1), (B, h * w)).copy()
        if ray_jitter:
            u, v = aug.ray_jitter(u, v, rng)
        if dropout_max > 0:
            p = rng.uniform(0.0, dropout_max)
            keep = np.stack([aug.dropout_indices(h * w, rng, dropout_max, p) for _ in range(B)])
            u = np.take_along_axis(u, keep, axis=1)
            v = np.take_along_axis(v, keep, axis=1)
        return build_encoder_tokens(fm, fm_K, u, v, self.fourier)

    def queries(self, intrinsics: Sequence[PinholeIntrinsics], u, v) -> torch.Tensor:
        return query_embeddings(intrinsics, u, v, self.fourier, dtype=self.latents.dtype)

    # -- persistence ---------------------------------------------------------

    def config_dict(self) -> dict:
        return {"network": asdict(self.cfg), "fourier": asdict(self.fourier)}

    @classmethod
    def from_config_dict(cls, data: dict) -> "DepthNet":
        net = dict(data["network"])
        net["encoder_channels"] = tuple(net["encoder_channels"])
        return cls(NetworkConfig(**net), FourierConfig(**data["fourier"]))


def images_to_tensor(images: Sequence[np.ndarray], dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([np.asarray(im).transpose(2, 0, 1) for im in images])).to(dtype)


@dataclass
class TrainOutput:
    pred: torch.Tensor  # (B, h, w) depths on the strided query grid
    gt: np.ndarray  # (B, h, w)
    gt_mask: np.ndarray  # (B, h, w)
    u: np.ndarray  # (h, w) query pixel coordinates
    v: np.ndarray
    latent: ConditionedLatent
    intrinsics: list


def forward_train(
    model: DepthNet,
    batch: Sequence[RenderedSample],
    stride: int,
    rng: np.random.Generator,
    generator: Optional[torch.Generator] = None,
    augment: Optional[aug.AugmentConfig] = None,
) -> TrainOutput:
    """One training forward pass on a same-resolution batch.

    Augments (flip, color, resolution jitter per batch, ray jitter, embedding
    dropout), conditions the latent, draws one sample and decodes at a
    strided grid of full-resolution queries.
    """
    from .trainer import strided_queries

    samples = list(batch)
    if augment is not None and augment.enabled:
        samples = [aug.horizontal_flip(s, rng, augment.flip_prob) for s in samples]
        samples = [s.replace(image=aug.color_jitter(s.image, rng, augment.color_jitter)) for s in samples]
        H0, W0 = samples[0].image.shape[:2]
        size = aug.jitter_size(H0, W0, augment, rng)
        samples = [aug.resize_sample(s, *size) for s in samples]
    dtype = model.latents.dtype
    images = images_to_tensor([s.image for s in samples], dtype)
    use = augment is not None and augment.enabled
    tokens = model.encoder_tokens(
        images,
        [s.encoder_K for s in samples],
        rng,
        ray_jitter=use and augment.ray_jitter,
        dropout_max=augment.dropout_max if use else 0.0,
    )
    latent = model.encode_condition(tokens, generator)
    z = model.sample_latent(latent, generator)
    H, W = samples[0].depth.shape
    u, v = strided_queries(H, W, stride, rng)
    B = len(samples)
    intrinsics = [s.K for s in samples]
    q = model.queries(intrinsics, np.broadcast_to(u.reshape(-1), (B, u.size)), np.broadcast_to(v.reshape(-1), (B, v.size)))
    pred = model.decode_depth(z, q).view(B, *u.shape)
    ui, vi = u.astype(int), v.astype(int)
    gt = np.stack([s.depth.values[vi, ui] for s in samples])
    gt_mask = np.stack([s.depth.mask[vi, ui] for s in samples])
    return TrainOutput(pred, gt, gt_mask, u, v, latent, intrinsics)


@torch.no_grad()
def condition_image(model: DepthNet, image: np.ndarray, K: PinholeIntrinsics) -> ConditionedLatent:
    images = images_to_tensor([image], model.latents.dtype)
    return model.encode_condition(model.encoder_tokens(images, [K]))


@torch.no_grad()
def decode_full(model: DepthNet, z: torch.Tensor, K: PinholeIntrinsics, chunk: int = 8192) -> np.ndarray:
    """Decode every pixel of ``K``'s image from one latent sample (B = 1)."""
    v, u = np.meshgrid(np.arange(K.height, dtype=np.float64), np.arange(K.width, dtype=np.float64), indexing="ij")
    u, v = u.reshape(1, -1), v.reshape(1, -1)
    out = []
    for start in range(0, u.shape[1], chunk):
        q = model.queries([K], u[:, start : start + chunk], v[:, start : start + chunk])
        out.append(model.decode_depth(z, q)[0])
    return torch.cat(out).double().numpy().reshape(K.height, K.width)


def sample_statistics(samples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel mean and population standard deviation over axis 0."""
    samples = np.asarray(samples, dtype=np.float64)
    mean = samples.mean(axis=0)
    std = np.sqrt(((samples - mean) ** 2).mean(axis=0))
    return mean, std


@torch.no_grad()
def predict_with_uncertainty(
    model: DepthNet,
    image: np.ndarray,
    K: PinholeIntrinsics,
    n_samples: int = 10,
    generator: Optional[torch.Generator] = None,
    sigma_scale: float = 1.0,
) -> UncertaintyMap:
    """Condition once, decode ``n_samples`` latent draws at full resolution of ``K``."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    was_training = model.training
    model.eval()
    try:
        latent = condition_image(model, image, K)
        draws = np.stack(
            [decode_full(model, model.sample_latent(latent, generator, sigma_scale), K) for _ in range(n_samples)]
        )
    finally:
        model.train(was_training)
    mean, std = sample_statistics(draws)
    return UncertaintyMap(mean, std, draws)
