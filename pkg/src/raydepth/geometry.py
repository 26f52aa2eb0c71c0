"""Pinhole camera math: rays, projection, unprojection, intrinsics rescaling
and forward-difference surface normals.

Pixel centers sit at integer coordinates, so an image of width W spans
[-0.5, W - 0.5] horizontally.  Depth is always camera-frame z.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class GeometryError(ValueError):
    """Raised for invalid camera inputs (bad depth, points behind the camera)."""


@dataclass(frozen=True)
class PinholeIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"image size must be >= 1, got {self.width}x{self.height}")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def inverse(self) -> np.ndarray:
        # closed form of K^-1 for an upper-triangular pinhole matrix
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(frozen=True)
class Extrinsics:
    """Camera-to-world rigid transform."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise GeometryError(f"rotation must be 3x3, got {R.shape}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise GeometryError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation


@dataclass
class DepthMap:
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise GeometryError(
                f"depth values {self.values.shape} and mask {self.mask.shape} must be equal 2D shapes"
            )
        good = self.values[self.mask]
        if good.size and not (np.all(np.isfinite(good)) and np.all(good > 0)):
            raise GeometryError("valid depths must be finite and positive")

    @classmethod
    def from_array(cls, values: np.ndarray) -> "DepthMap":
        """Build a map whose mask marks finite, positive entries."""
        values = np.asarray(values, dtype=np.float64)
        mask = np.isfinite(values) & (values > 0)
        return cls(np.where(mask, values, 0.0), mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _homogeneous(u, v) -> np.ndarray:
    u, v = np.broadcast_arrays(np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64))
    return np.stack([u, v, np.ones_like(u)], axis=-1)


def pixel_rays(K: PinholeIntrinsics, u, v) -> np.ndarray:
    """Unnormalized K^-1 [u, v, 1] for arrays of pixel coordinates (z component is 1)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    x = (u - K.cx) / K.fx
    y = (v - K.cy) / K.fy
    return np.stack(np.broadcast_arrays(x, y, np.ones_like(x + y)), axis=-1)


def ray_direction(K: PinholeIntrinsics, u, v) -> np.ndarray:
    """Unit viewing direction(s) for pixel coordinates ``(u, v)``; vectorized over arrays."""
    r = pixel_rays(K, u, v)
    return r / np.linalg.norm(r, axis=-1, keepdims=True)


def unproject(K: PinholeIntrinsics, u, v, depth) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise GeometryError("unproject requires strictly positive depth")
    return pixel_rays(K, u, v) * depth[..., None]


def project(K: PinholeIntrinsics, points) -> np.ndarray:
    """Project camera-frame point(s) of shape (..., 3) to pixel coordinates (..., 2)."""
    P = np.asarray(points, dtype=np.float64)
    z = P[..., 2]
    if np.any(~(z > 0)):
        raise GeometryError("cannot project points at or behind the camera plane")
    u = K.fx * P[..., 0] / z + K.cx
    v = K.fy * P[..., 1] / z + K.cy
    return np.stack([u, v], axis=-1)


def rescale_intrinsics(K: PinholeIntrinsics, r_w: float, r_h: float) -> PinholeIntrinsics:
    """Intrinsics for an image resized by ``(r_w, r_h)`` that keep every viewing ray fixed.

    A pixel ``(u, v)`` of the source image corresponds to
    ``(r_w (u - 0.5) + 0.5, r_h (v - 0.5) + 0.5)`` in the resized one.
    """
    if r_w <= 0 or r_h <= 0:
        raise GeometryError(f"resize ratios must be positive, got {r_w}, {r_h}")
    return PinholeIntrinsics(
        fx=r_w * K.fx,
        fy=r_h * K.fy,
        cx=r_w * (K.cx - 0.5) + 0.5,
        cy=r_h * (K.cy - 0.5) + 0.5,
        width=max(1, int(round(r_w * K.width))),
        height=max(1, int(round(r_h * K.height))),
    )


def resized_pixel(u, v, r_w: float, r_h: float):
    """Map source pixel coordinates into an image resized by ``(r_w, r_h)``."""
    return r_w * (np.asarray(u, dtype=np.float64) - 0.5) + 0.5, r_h * (np.asarray(v, dtype=np.float64) - 0.5) + 0.5


def pixel_grid(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-major integer pixel grid as ``(u, v)`` arrays of shape (H, W)."""
    v, u = np.meshgrid(np.arange(height, dtype=np.float64), np.arange(width, dtype=np.float64), indexing="ij")
    return u, v


def surface_normals(D: DepthMap, K: PinholeIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Forward-difference normals for a whole depth map.

    Returns ``(normals, defined)`` where ``normals`` is (H, W, 3) and ``defined``
    marks pixels whose right and lower neighbours are valid and whose cross
    product is non-degenerate.  The last row and column never have normals.
    """
    H, W = D.shape
    u, v = pixel_grid(H, W)
    P = pixel_rays(K, u, v) * np.where(D.mask, D.values, 0.0)[..., None]
    normals = np.zeros((H, W, 3))
    defined = np.zeros((H, W), dtype=bool)
    if H < 2 or W < 2:
        return normals, defined
    du = P[:-1, 1:] - P[:-1, :-1]
    dv = P[1:, :-1] - P[:-1, :-1]
    n = np.cross(du, dv)
    length = np.linalg.norm(n, axis=-1)
    ok = D.mask[:-1, :-1] & D.mask[:-1, 1:] & D.mask[1:, :-1] & (length > 0)
    safe = np.where(ok, length, 1.0)
    normals[:-1, :-1] = np.where(ok[..., None], n / safe[..., None], 0.0)
    defined[:-1, :-1] = ok
    return normals, defined


def surface_normal(D: DepthMap, K: PinholeIntrinsics, u: int, v: int) -> Optional[np.ndarray]:
    """Unit normal at integer pixel ``(u, v)``, or ``None`` where it is undefined."""
    H, W = D.shape
    if not (0 <= u < W - 1 and 0 <= v < H - 1):
        return None
    if not (D.mask[v, u] and D.mask[v, u + 1] and D.mask[v + 1, u]):
        return None
    P = unproject(K, [u, u + 1, u], [v, v, v + 1], D.values[[v, v, v + 1], [u, u + 1, u]])
    n = np.cross(P[1] - P[0], P[2] - P[0])
    length = np.linalg.norm(n)
    if length == 0:
        return None
    return n / length


def merge_pointclouds(clouds: Sequence[tuple[np.ndarray, np.ndarray, Optional[Extrinsics]]]):
    """Move each (points, colors, extrinsics) cloud to the world frame and concatenate.

    No alignment or rescaling of any kind is applied.
    """
    all_points, all_colors = [], []
    for points, colors, ext in clouds:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        colors = np.asarray(colors).reshape(-1, 3)
        if len(points) != len(colors):
            raise GeometryError(f"cloud has {len(points)} points but {len(colors)} colors")
        all_points.append(points if ext is None else ext.apply(points))
        all_colors.append(colors)
    if not all_points:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.uint8)
    return np.concatenate(all_points), np.concatenate(all_colors)


def format_intrinsics(K: PinholeIntrinsics, extrinsics: Optional[Extrinsics] = None) -> str:
    lines = [f"{K.fx!r} {K.fy!r}", f"{K.cx!r} {K.cy!r}", f"{K.width} {K.height}"]
    if extrinsics is not None:
        values = list(extrinsics.rotation.reshape(-1)) + list(extrinsics.translation)
        lines.append(" ".join(repr(float(x)) for x in values))
    return "\n".join(lines) + "\n"


def parse_intrinsics(text: str) -> tuple[PinholeIntrinsics, Optional[Extrinsics]]:
    lines = [line.split() for line in text.splitlines() if line.strip()]
    if len(lines) not in (3, 4) or any(len(line) != 2 for line in lines[:3]):
        raise GeometryError("intrinsics text needs lines 'fx fy', 'cx cy', 'width height' and optional extrinsics")
    try:
        (fx, fy), (cx, cy) = (map(float, lines[0]), map(float, lines[1]))
        width, height = int(lines[2][0]), int(lines[2][1])
        K = PinholeIntrinsics(fx, fy, cx, cy, width, height)
        ext = None
        if len(lines) == 4:
            values = [float(x) for x in lines[3]]
            if len(values) != 12:
                raise GeometryError(f"extrinsics line needs 12 numbers, got {len(values)}")
            ext = Extrinsics(np.array(values[:9]).reshape(3, 3), np.array(values[9:]))
    except ValueError as exc:
        raise GeometryError(f"malformed intrinsics text: {exc}") from exc
    return K, ext


def read_intrinsics(path) -> tuple[PinholeIntrinsics, Optional[Extrinsics]]:
    return parse_intrinsics(Path(path).read_text())


def write_intrinsics(path, K: PinholeIntrinsics, extrinsics: Optional[Extrinsics] = None) -> None:
    Path(path).write_text(format_intrinsics(K, extrinsics))
