"""PFM depth maps, binary PPM images and ASCII PLY point clouds."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


class FileFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        where = "" if offset is None else f" (byte {offset})"
        super().__init__(f"{message}{where}")
        self.offset = offset


_HEADER_TOKEN = re.compile(rb"\S+")


def _header_tokens(data: bytes, count: int, what: str) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens (skipping ``#`` comments).

    Returns the tokens and the offset just past the single whitespace byte
    that terminates the last one.
    """
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            end = data.find(b"\n", pos)
            pos = len(data) if end < 0 else end + 1
            continue
        m = _HEADER_TOKEN.match(data, pos)
        if m is None:
            raise FileFormatError(f"truncated {what} header", pos)
        tokens.append(m.group())
        pos = m.end()
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FileFormatError(f"malformed {what} header", pos)
    return tokens, pos + 1


def encode_pfm(depth: np.ndarray) -> bytes:
    """Single-channel little-endian PFM; rows stored bottom to top."""
    arr = np.asarray(depth, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"PFM writer expects a 2D array, got shape {arr.shape}")
    h, w = arr.shape
    return f"Pf\n{w} {h}\n-1.0\n".encode("ascii") + np.ascontiguousarray(arr[::-1]).tobytes()


def decode_pfm(data: bytes) -> np.ndarray:
    tokens, offset = _header_tokens(data, 4, "PFM")
    kind = tokens[0]
    if kind not in (b"Pf", b"PF"):
        raise FileFormatError(f"unknown PFM type {kind!r}", 0)
    channels = 1 if kind == b"Pf" else 3
    try:
        w, h = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError as exc:
        raise FileFormatError(f"bad PFM header value: {exc}", 0) from exc
    if w <= 0 or h <= 0 or scale == 0:
        raise FileFormatError("PFM dimensions must be positive and scale nonzero", 0)
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    need = w * h * channels * 4
    if len(data) - offset < need:
        raise FileFormatError(f"PFM payload truncated: need {need} bytes, have {len(data) - offset}", len(data))
    if len(data) - offset > need:
        raise FileFormatError("trailing bytes after PFM payload", offset + need)
    arr = np.frombuffer(data, dtype=dtype, count=w * h * channels, offset=offset)
    arr = arr.reshape(h, w, channels) if channels == 3 else arr.reshape(h, w)
    return arr[::-1].astype(np.float32)


def write_pfm(path, depth: np.ndarray) -> None:
    Path(path).write_bytes(encode_pfm(depth))


def read_pfm(path) -> np.ndarray:
    return decode_pfm(Path(path).read_bytes())


def encode_ppm(image: np.ndarray) -> bytes:
    """8-bit binary PPM; float images in [0, 1] are quantized with round-half-even."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"PPM writer expects an HxWx3 array, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w, _ = arr.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    """Returns an HxWx3 float64 image in [0, 1]."""
    tokens, offset = _header_tokens(data, 4, "PPM")
    if tokens[0] != b"P6":
        raise FileFormatError(f"only binary P6 PPM is supported, got {tokens[0]!r}", 0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FileFormatError(f"bad PPM header value: {exc}", 0) from exc
    if maxval != 255:
        raise FileFormatError(f"only maxval 255 is supported, got {maxval}", 0)
    need = w * h * 3
    if len(data) - offset != need:
        raise FileFormatError(f"PPM payload has {len(data) - offset} bytes, expected {need}", offset)
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=offset).reshape(h, w, 3)
    return arr.astype(np.float64) / 255.0


def write_ppm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def encode_ply(points: np.ndarray, colors: np.ndarray) -> bytes:
    """ASCII PLY 1.0 with float x,y,z and uchar red,green,blue per vertex."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors).reshape(-1, 3)
    if len(points) != len(colors):
        raise ValueError(f"{len(points)} points but {len(colors)} colors")
    if colors.dtype != np.uint8:
        colors = np.round(np.clip(colors, 0.0, 1.0) * 255.0).astype(np.uint8)
    header = (
        "ply\nformat ascii 1.0\n"
        f"element vertex {len(points)}\n"
        "property float x\nproperty float y\nproperty float z\n"
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
        "end_header\n"
    )
    rows = [
        f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}\n"
        for (x, y, z), (r, g, b) in zip(points.tolist(), colors.tolist())
    ]
    return (header + "".join(rows)).encode("ascii")


def write_ply(path, points: np.ndarray, colors: np.ndarray) -> None:
    Path(path).write_bytes(encode_ply(points, colors))


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Reader for the files written by :func:`write_ply`."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "ply":
        raise FileFormatError("not a PLY file", 0)
    if "end_header" not in lines:
        raise FileFormatError("PLY header has no end_header line")
    end = lines.index("end_header")
    counts = [int(line.split()[2]) for line in lines[:end] if line.startswith("element vertex")]
    if not counts:
        raise FileFormatError("PLY header has no vertex element")
    rows = lines[end + 1 : end + 1 + counts[0]]
    if len(rows) != counts[0]:
        raise FileFormatError(f"PLY declares {counts[0]} vertices, found {len(rows)}")
    fields = [line.split() for line in rows]
    if any(len(f) != 6 for f in fields):
        raise FileFormatError("PLY vertex rows must have 6 fields")
    body = np.array(fields, dtype=np.float64).reshape(-1, 6)
    return body[:, :3], body[:, 3:].astype(np.uint8)
