"""Encoder-level augmentations and the evaluation-time intrinsics perturbation.

Nothing here touches decoder information: ground-truth depth and the
decoder intrinsics ``sample.K`` pass through resizing and ray jitter
unchanged.  Every function draws randomness only from the generator it is
given.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import DepthMap, PinholeIntrinsics, rescale_intrinsics
from .synthdata import RenderedSample


@dataclass(frozen=True)
class AugmentConfig:
    resize_min: float = 0.25
    resize_max: float = 1.5
    size_multiple: int = 32
    dropout_max: float = 0.5
    flip_prob: float = 0.5
    color_jitter: tuple = (0.5, 0.5, 0.5, 0.1)
    ray_jitter: bool = True
    enabled: bool = True

    def __post_init__(self):
        if not (0 < self.resize_min <= self.resize_max):
            raise ValueError(f"need 0 < resize_min <= resize_max, got {self.resize_min}, {self.resize_max}")
        if not (0 <= self.dropout_max < 1):
            raise ValueError(f"dropout_max must be in [0, 1), got {self.dropout_max}")
        if self.size_multiple < 1:
            raise ValueError("size_multiple must be >= 1")


def resample_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize consistent with the intrinsics rescaling convention.

    Output pixel ``u'`` reads the source at ``(u' - 0.5) / r + 0.5`` (clamped).
    """
    H, W = image.shape[:2]
    r_h, r_w = height / H, width / W
    src_v = np.clip((np.arange(height) - 0.5) / r_h + 0.5, 0, H - 1)
    src_u = np.clip((np.arange(width) - 0.5) / r_w + 0.5, 0, W - 1)
    v0 = np.minimum(np.floor(src_v).astype(int), H - 1)
    u0 = np.minimum(np.floor(src_u).astype(int), W - 1)
    v1 = np.minimum(v0 + 1, H - 1)
    u1 = np.minimum(u0 + 1, W - 1)
    wv = (src_v - v0)[:, None, None]
    wu = (src_u - u0)[None, :, None]
    top = image[v0][:, u0] * (1 - wu) + image[v0][:, u1] * wu
    bottom = image[v1][:, u0] * (1 - wu) + image[v1][:, u1] * wu
    return top * (1 - wv) + bottom * wv


def jitter_size(H: int, W: int, cfg: AugmentConfig, rng: np.random.Generator, ratios=None) -> tuple[int, int]:
    """Independent height/width ratios rounded up to ``size_multiple``."""
    m = cfg.size_multiple
    if ratios is None:
        r_h = rng.uniform(cfg.resize_min, cfg.resize_max)
        r_w = rng.uniform(cfg.resize_min, cfg.resize_max)
    else:
        r_h, r_w = ratios
    new_h = max(m, int(math.ceil(r_h * H / m)) * m)
    new_w = max(m, int(math.ceil(r_w * W / m)) * m)
    return new_h, new_w


def resize_sample(sample: RenderedSample, height: int, width: int) -> RenderedSample:
    H, W = sample.image.shape[:2]
    if (height, width) == (H, W):
        return sample
    K = sample.encoder_K
    r_h, r_w = height / H, width / W
    resized = rescale_intrinsics(K, r_w, r_h)
    image = np.clip(resample_image(sample.image, height, width), 0.0, 1.0)
    return sample.replace(image=image, image_K=resized)


def resolution_jitter(sample: RenderedSample, cfg: AugmentConfig, rng: np.random.Generator, ratios=None) -> RenderedSample:
    """Resize the encoder image by random (or given ``(r_h, r_w)``) ratios and rescale its intrinsics."""
    H, W = sample.image.shape[:2]
    new_h, new_w = jitter_size(H, W, cfg, rng, ratios)
    return resize_sample(sample, new_h, new_w)


def ray_jitter(u: np.ndarray, v: np.ndarray, rng: np.random.Generator, enabled: bool = True):
    """Perturb pixel coordinates by independent U(-0.5, 0.5) noise."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if not enabled:
        return u, v
    return u + rng.uniform(-0.5, 0.5, size=u.shape), v + rng.uniform(-0.5, 0.5, size=v.shape)


def dropout_keep_count(n: int, p: float) -> int:
    return min(n, max(1, int(round((1.0 - p) * n))))


def dropout_indices(n: int, rng: np.random.Generator, dropout_max: float, p: float | None = None) -> np.ndarray:
    """Sorted indices of the tokens kept after dropping a proportion ``p ~ U(0, dropout_max)``."""
    if n < 1:
        raise ValueError("embedding dropout needs at least one token")
    if p is None:
        p = rng.uniform(0.0, dropout_max) if dropout_max > 0 else 0.0
    keep = dropout_keep_count(n, p)
    if keep == n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=keep, replace=False))


def embedding_dropout(tokens, rng: np.random.Generator, dropout_max: float, p: float | None = None):
    """Keep a random order-preserving subset of the rows of ``tokens``."""
    return tokens[dropout_indices(len(tokens), rng, dropout_max, p)]


def flip_intrinsics(K: PinholeIntrinsics) -> PinholeIntrinsics:
    return PinholeIntrinsics(K.fx, K.fy, (K.width - 1) - K.cx, K.cy, K.width, K.height)


def flip_sample(sample: RenderedSample) -> RenderedSample:
    depth = DepthMap(sample.depth.values[:, ::-1].copy(), sample.depth.mask[:, ::-1].copy())
    image_K = None if sample.image_K is None else flip_intrinsics(sample.image_K)
    return sample.replace(
        image=sample.image[:, ::-1].copy(), depth=depth, K=flip_intrinsics(sample.K), image_K=image_K
    )


def horizontal_flip(sample: RenderedSample, rng: np.random.Generator, flip_prob: float = 0.5) -> RenderedSample:
    if flip_prob > 0 and rng.random() < flip_prob:
        return flip_sample(sample)
    return sample


_LUMA = np.array([0.299, 0.587, 0.114])


def _hue_rotation(turns: float) -> np.ndarray:
    """Rotation of RGB space about the gray axis by ``turns`` full turns."""
    a = 2.0 * math.pi * turns
    k = np.ones(3) / math.sqrt(3.0)
    cross = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return math.cos(a) * np.eye(3) + math.sin(a) * cross + (1 - math.cos(a)) * np.outer(k, k)


def color_jitter(image: np.ndarray, rng: np.random.Generator, magnitudes=(0.5, 0.5, 0.5, 0.1), factors=None) -> np.ndarray:
    """Brightness, contrast, saturation and hue jitter; output clamped to [0, 1].

    ``factors`` = (brightness, contrast, saturation, hue_turns) overrides the
    random draw.  A factor of 1 (or a hue of 0) skips that step exactly.
    """
    b, c, s, h = magnitudes
    if factors is None:
        factors = (
            rng.uniform(1 - b, 1 + b) if b > 0 else 1.0,
            rng.uniform(1 - c, 1 + c) if c > 0 else 1.0,
            rng.uniform(1 - s, 1 + s) if s > 0 else 1.0,
            rng.uniform(-h, h) if h > 0 else 0.0,
        )
    bright, contrast, sat, hue = factors
    out = image
    if bright != 1.0:
        out = np.clip(out * bright, 0.0, 1.0)
    if contrast != 1.0:
        mean = float((out @ _LUMA).mean())
        out = np.clip(mean + (out - mean) * contrast, 0.0, 1.0)
    if sat != 1.0:
        gray = (out @ _LUMA)[..., None]
        out = np.clip(gray + (out - gray) * sat, 0.0, 1.0)
    if hue != 0.0:
        out = np.clip(out @ _hue_rotation(hue).T, 0.0, 1.0)
    return out


def perturb_intrinsics(K: PinholeIntrinsics, noise_level: float, rng: np.random.Generator) -> PinholeIntrinsics:
    """Multiply fx, fy, cx, cy by ``1 + eps`` with ``eps ~ N(0, noise_level^2)``.

    Draws that would make a focal length non-positive are resampled.
    """
    if noise_level < 0:
        raise ValueError("noise_level must be >= 0")
    if noise_level == 0:
        return K
    while True:
        eps = rng.normal(0.0, noise_level, size=4)
        fx, fy, cx, cy = np.array([K.fx, K.fy, K.cx, K.cy]) * (1.0 + eps)
        if fx > 0 and fy > 0:
            return PinholeIntrinsics(float(fx), float(fy), float(cx), float(cy), K.width, K.height)
