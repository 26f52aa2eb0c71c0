"""Procedural ray-cast scenes under configurable pinhole cameras, plus dataset IO.

Scene frame: x right, y down, z forward, origin at the camera center.  The
ground is the plane ``y = camera_height``.  The camera may be pitched down by
``SceneSpec.pitch`` radians about the x axis; rays are rotated into the scene
frame before intersection.  Depth is the camera-frame z of the first hit, which
equals the ray parameter because rays are cast as ``K^-1 [u, v, 1]`` and the
rotation preserves it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .diffcore import RngStream
from .fileio import FileFormatError, read_pfm, read_ppm, write_pfm, write_ppm
from .geometry import (
    DepthMap,
    Extrinsics,
    PinholeIntrinsics,
    pixel_grid,
    pixel_rays,
    read_intrinsics,
    write_intrinsics,
)

SKY_COLOR = np.array([0.55, 0.7, 0.9])


@dataclass(frozen=True)
class Plane:
    """Points X with ``normal . X + offset = 0``; ``normal`` faces the camera side."""

    normal: tuple
    offset: float
    albedo: tuple = (0.5, 0.5, 0.5)
    kind: str = "plane"

    def intersect(self, rays):
        n = np.asarray(self.normal, dtype=np.float64)
        denom = rays @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = -self.offset / denom
        t = np.where((np.abs(denom) > 1e-12) & (t > 0), t, np.inf)
        return t, np.broadcast_to(n, rays.shape)

    def surface_residual(self, points):
        return np.abs(points @ np.asarray(self.normal) + self.offset)


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: tuple = (0.5, 0.5, 0.5)
    kind: str = "sphere"

    def intersect(self, rays):
        c = np.asarray(self.center, dtype=np.float64)
        a = np.einsum("...i,...i->...", rays, rays)
        b = rays @ c
        disc = b * b - a * (c @ c - self.radius**2)
        root = np.sqrt(np.maximum(disc, 0.0))
        t = (b - root) / a
        t = np.where((disc >= 0) & (t > 0), t, np.inf)
        points = rays * np.where(np.isfinite(t), t, 0.0)[..., None]
        return t, (points - c) / self.radius

    def surface_residual(self, points):
        return np.abs(np.linalg.norm(points - np.asarray(self.center), axis=-1) - self.radius)


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


@dataclass(frozen=True)
class Box:
    """Box rotated by ``yaw`` radians about the vertical axis."""

    center: tuple
    half_extents: tuple
    yaw: float = 0.0
    albedo: tuple = (0.5, 0.5, 0.5)
    kind: str = "box"

    def intersect(self, rays):
        R = _yaw_matrix(self.yaw)
        h = np.asarray(self.half_extents, dtype=np.float64)
        origin = -(R.T @ np.asarray(self.center, dtype=np.float64))
        d = rays @ R  # R^T r for row vectors
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-h - origin) / d
            t2 = (h - origin) / d
        t_lo = np.nan_to_num(np.minimum(t1, t2), nan=-np.inf)
        t_hi = np.nan_to_num(np.maximum(t1, t2), nan=np.inf)
        t_near = t_lo.max(axis=-1)
        t_far = t_hi.min(axis=-1)
        hit = (t_near <= t_far) & (t_near > 0)
        axis = t_lo.argmax(axis=-1)
        local = np.zeros(rays.shape)
        sign = -np.sign(np.take_along_axis(d, axis[..., None], axis=-1))[..., 0]
        np.put_along_axis(local, axis[..., None], sign[..., None], axis=-1)
        return np.where(hit, t_near, np.inf), local @ R.T

    def surface_residual(self, points):
        R = _yaw_matrix(self.yaw)
        local = (points - np.asarray(self.center)) @ R
        q = np.abs(local) - np.asarray(self.half_extents)
        outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
        inside = np.minimum(q.max(axis=-1), 0.0)
        return np.abs(outside + inside)


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    light: tuple = (0.0, -0.8, -0.6)
    ambient: float = 0.3
    pitch: float = 0.0

    def camera_to_scene(self) -> np.ndarray:
        """Rotation taking camera-frame vectors to the scene frame (pitch down is positive)."""
        c, s = np.cos(self.pitch), np.sin(self.pitch)
        return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])


@dataclass(frozen=True)
class SceneParams:
    object_count: tuple = (1, 4)
    depth_range: tuple = (3.0, 25.0)
    lateral: float = 0.45
    radius_range: tuple = (0.4, 1.5)
    half_extent_range: tuple = (0.3, 1.2)
    camera_height: float = 1.5
    near_clearance: float = 0.5
    pitch_range: tuple = (0.0, 0.0)


@dataclass(frozen=True)
class CameraFamily:
    label: str
    focal_range: tuple
    resolutions: tuple = ((48, 64),)
    principal_jitter: float = 0.0

    def __post_init__(self):
        lo, hi = self.focal_range
        if not (lo > 0 and hi >= lo):
            raise ValueError(f"family {self.label!r}: focal_range needs 0 < f_lo <= f_hi, got {self.focal_range}")

    def draw(self, rng: np.random.Generator) -> PinholeIntrinsics:
        H, W = self.resolutions[int(rng.integers(len(self.resolutions)))]
        f = float(rng.uniform(*self.focal_range))
        j = self.principal_jitter
        cx = (W - 1) / 2.0 + float(rng.uniform(-j, j))
        cy = (H - 1) / 2.0 + float(rng.uniform(-j, j))
        return PinholeIntrinsics(f, f, cx, cy, int(W), int(H))


@dataclass
class RenderedSample:
    """Image, dense metric depth and intrinsics for one view.

    ``image_K`` is set once the image has been resized for encoding; depth and
    ``K`` (the decoder geometry) are never modified by resizing.
    """

    image: np.ndarray
    depth: DepthMap
    K: PinholeIntrinsics
    extrinsics: Optional[Extrinsics] = None
    dense: bool = True
    sample_id: str = ""
    label: str = ""
    image_K: Optional[PinholeIntrinsics] = None

    @property
    def encoder_K(self) -> PinholeIntrinsics:
        return self.image_K if self.image_K is not None else self.K

    def replace(self, **changes) -> "RenderedSample":
        return dataclasses.replace(self, **changes)


def ground_plane(height: float, albedo=(0.45, 0.42, 0.38)) -> Plane:
    return Plane(normal=(0.0, -1.0, 0.0), offset=float(height), albedo=tuple(albedo))


def generate_scene(rng: np.random.Generator, params: SceneParams = SceneParams()) -> SceneSpec:
    """Ground plane plus objects resting on it, rejection-sampled to keep clear of the camera and each other."""
    h = params.camera_height
    g = float(rng.uniform(0.3, 0.6))
    primitives = [ground_plane(h, (g, g * float(rng.uniform(0.85, 1.0)), g * float(rng.uniform(0.7, 0.95))))]
    placed: list[tuple[np.ndarray, float]] = []
    lo, hi = params.object_count
    count = int(rng.integers(lo, hi + 1))
    for _ in range(count):
        for _attempt in range(50):
            z = float(rng.uniform(*params.depth_range))
            x = float(rng.uniform(-params.lateral, params.lateral)) * z
            albedo = tuple(float(a) for a in rng.uniform(0.15, 0.95, size=3))
            if rng.random() < 0.5:
                r = float(rng.uniform(*params.radius_range))
                center = np.array([x, h - r, z])
                prim, bound = Sphere(tuple(center), r, albedo), r
            else:
                he = rng.uniform(*params.half_extent_range, size=3)
                center = np.array([x, h - he[1], z])
                prim = Box(tuple(center), tuple(float(e) for e in he), float(rng.uniform(0, np.pi / 2)), albedo)
                bound = float(np.linalg.norm(he))
            if np.linalg.norm(center) - bound < params.near_clearance:
                continue
            if any(np.linalg.norm(center - c) < bound + b for c, b in placed):
                continue
            placed.append((center, bound))
            primitives.append(prim)
            break
    light = np.array([rng.uniform(-0.5, 0.5), -1.0, rng.uniform(-0.8, 0.2)])
    light /= np.linalg.norm(light)
    pitch = float(rng.uniform(*params.pitch_range))
    return SceneSpec(tuple(primitives), tuple(float(x) for x in light), float(rng.uniform(0.25, 0.4)), pitch)


def cast_rays(scene: SceneSpec, rays: np.ndarray):
    """Nearest hits for rays of shape (..., 3).

    Returns ``(t, normals, ids)``: ray parameter (``inf`` on a miss), outward
    surface normal and primitive index (-1 on a miss).
    """
    shape = rays.shape[:-1]
    best_t = np.full(shape, np.inf)
    normals = np.zeros(shape + (3,))
    ids = np.full(shape, -1, dtype=np.int64)
    for i, prim in enumerate(scene.primitives):
        t, n = prim.intersect(rays)
        closer = t < best_t
        best_t = np.where(closer, t, best_t)
        normals = np.where(closer[..., None], n, normals)
        ids = np.where(closer, i, ids)
    return best_t, normals, ids


def render(scene: SceneSpec, K: PinholeIntrinsics, far: float = 60.0, return_ids: bool = False):
    """Ray-cast ``scene`` through every pixel of ``K``.

    Hits beyond ``far`` count as sky.  Colors are Lambertian with an ambient
    term and are quantized to 8-bit levels so PPM storage is lossless.
    """
    u, v = pixel_grid(K.height, K.width)
    rays = pixel_rays(K, u, v) @ scene.camera_to_scene().T
    t, normals, ids = cast_rays(scene, rays)
    valid = np.isfinite(t) & (t <= far)
    ids = np.where(valid, ids, -1)
    light = np.asarray(scene.light)
    shade = scene.ambient + (1.0 - scene.ambient) * np.maximum(0.0, normals @ light)
    albedo = np.array([p.albedo for p in scene.primitives] + [tuple(SKY_COLOR)])
    color = albedo[ids] * np.where(valid, shade, 1.0)[..., None]
    image = np.round(np.clip(color, 0.0, 1.0) * 255.0) / 255.0
    depth = DepthMap(np.where(valid, t, 0.0), valid)
    sample = RenderedSample(image=image, depth=depth, K=K)
    if return_ids:
        return sample, ids, normals
    return sample


def generate_sample(family: CameraFamily, params: SceneParams, stream: RngStream, far: float = 60.0) -> RenderedSample:
    rng = stream.numpy
    K = family.draw(rng)
    scene = generate_scene(rng, params)
    return render(scene, K, far).replace(label=family.label)


def generate_samples(
    family: CameraFamily,
    count: int,
    params: SceneParams = SceneParams(),
    seed: int = 0,
    far: float = 60.0,
    stream_key: int = 0,
    start: int = 0,
) -> list[RenderedSample]:
    """In-memory samples ``start .. start+count-1``; sample ``i`` depends only on ``(seed, stream_key, i)``.

    With ``stream_key`` equal to a family's position in ``DatasetConfig.families``
    these match the samples ``make_dataset`` writes for that family.
    """
    root = RngStream(seed).child(stream_key)
    out = []
    for i in range(start, start + count):
        s = generate_sample(family, params, root.child(i), far)
        out.append(s.replace(sample_id=f"{family.label}-{i:06d}"))
    return out


# ---------------------------------------------------------------------------
# on-disk datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetConfig:
    families: tuple
    samples_per_family: int = 100
    scene: SceneParams = SceneParams()
    val_fraction: float = 0.1
    far: float = 60.0


def write_sample(sample: RenderedSample, stem) -> None:
    """Write ``stem.ppm``, ``stem.pfm`` (float32, NaN where invalid) and ``stem.txt``."""
    stem = Path(stem)
    write_ppm(stem.with_suffix(".ppm"), sample.image)
    values = np.where(sample.depth.mask, sample.depth.values, np.nan).astype(np.float32)
    write_pfm(stem.with_suffix(".pfm"), values)
    write_intrinsics(stem.with_suffix(".txt"), sample.K, sample.extrinsics)


def read_sample(stem, label: str = "") -> RenderedSample:
    stem = Path(stem)
    image = read_ppm(stem.with_suffix(".ppm"))
    depth = DepthMap.from_array(read_pfm(stem.with_suffix(".pfm")).astype(np.float64))
    K, ext = read_intrinsics(stem.with_suffix(".txt"))
    if depth.shape != K.shape or image.shape[:2] != K.shape:
        raise FileFormatError(f"{stem}: image {image.shape[:2]}, depth {depth.shape} and intrinsics {K.shape} disagree")
    return RenderedSample(image=image, depth=depth, K=K, extrinsics=ext, sample_id=stem.name, label=label)


MANIFEST = "manifest.tsv"
MANIFEST_HEADER = "id\tlabel\tsplit"


def make_dataset(cfg: DatasetConfig, seed: int, root) -> list[tuple[str, str, str]]:
    """Render every family into ``root/samples`` and write ``root/manifest.tsv``."""
    if not cfg.families:
        raise ValueError("dataset needs at least one camera family")
    root = Path(root)
    (root / "samples").mkdir(parents=True, exist_ok=True)
    entries = []
    index = 0
    n = cfg.samples_per_family
    n_train = n - int(round(cfg.val_fraction * n))
    for f_idx, family in enumerate(cfg.families):
        stream = RngStream(seed).child(f_idx)
        for i in range(n):
            sample = generate_sample(family, cfg.scene, stream.child(i), cfg.far)
            sample_id = f"{index:06d}"
            write_sample(sample, root / "samples" / sample_id)
            entries.append((sample_id, family.label, "train" if i < n_train else "val"))
            index += 1
    lines = [MANIFEST_HEADER] + ["\t".join(e) for e in entries]
    (root / MANIFEST).write_text("\n".join(lines) + "\n")
    return entries


class Dataset:
    """Manifest-backed dataset directory; samples are read lazily."""

    def __init__(self, root):
        self.root = Path(root)
        lines = (self.root / MANIFEST).read_text().splitlines()
        if not lines or lines[0] != MANIFEST_HEADER:
            raise FileFormatError(f"{self.root / MANIFEST}: missing header {MANIFEST_HEADER!r}")
        self.entries = []
        for line in lines[1:]:
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise FileFormatError(f"manifest line {line!r} must have 3 tab-separated fields")
            self.entries.append(tuple(fields))

    @property
    def labels(self) -> list[str]:
        return sorted({label for _, label, _ in self.entries})

    def select(self, split: str | None = None, label: str | None = None) -> list[tuple[str, str, str]]:
        return [e for e in self.entries if (split is None or e[2] == split) and (label is None or e[1] == label)]

    def load(self, entry) -> RenderedSample:
        sample_id, label, _ = entry
        return read_sample(self.root / "samples" / sample_id, label=label)

    def samples(self, split: str | None = None, label: str | None = None) -> Iterator[RenderedSample]:
        for e in self.select(split, label):
            yield self.load(e)

    def __len__(self):
        return len(self.entries)
