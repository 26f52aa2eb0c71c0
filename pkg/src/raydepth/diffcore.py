"""Differentiable substrate used by the network and the losses.

Arrays and reverse-mode gradients come from torch; this module pins down the
handful of ops whose exact definition matters (tanh GeLU, layer norm,
dropout driven by an explicit generator), adds shape checking that names the
failing op, and provides the pieces torch does not: a deterministic
parameter registry, seeded counter-based RNG streams, a finite-difference
gradient checker and a flat binary checkpoint container.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn


class ShapeError(ValueError):
    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

GELU_C = math.sqrt(2.0 / math.pi)
GELU_K = 0.044715


def gelu(x: torch.Tensor) -> torch.Tensor:
    """GeLU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    return 0.5 * x * (1.0 + torch.tanh(GELU_C * (x + GELU_K * x * x * x)))


def softmax(x: torch.Tensor) -> torch.Tensor:
    return torch.softmax(x, dim=-1)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if gain.shape[-1] != x.shape[-1] or bias.shape[-1] != x.shape[-1]:
        raise ShapeError("layer_norm", f"gain/bias width {gain.shape[-1]} does not match input {x.shape[-1]}")
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    return centered / torch.sqrt(var + eps) * gain + bias


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError("matmul", f"inner dimensions differ: {tuple(a.shape)} @ {tuple(b.shape)}")
    return a @ b


def bmm(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() != 3 or b.dim() != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ShapeError("bmm", f"incompatible batched shapes {tuple(a.shape)} and {tuple(b.shape)}")
    return torch.bmm(a, b)


def concat(tensors: Sequence[torch.Tensor], dim: int = -1) -> torch.Tensor:
    ref = list(tensors[0].shape)
    axis = dim % len(ref)
    for t in tensors[1:]:
        shape = list(t.shape)
        if len(shape) != len(ref) or any(s != r for i, (s, r) in enumerate(zip(shape, ref)) if i != axis):
            raise ShapeError("concat", f"shapes {tuple(tensors[0].shape)} and {tuple(t.shape)} differ off axis {dim}")
    return torch.cat(list(tensors), dim=dim)


def gather_rows(x: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    """Select rows along axis 1 of a (B, N, D) tensor with a (B, M) index."""
    if x.dim() != 3 or index.dim() != 2 or index.shape[0] != x.shape[0]:
        raise ShapeError("gather_rows", f"expected (B,N,D) and (B,M), got {tuple(x.shape)} and {tuple(index.shape)}")
    return torch.gather(x, 1, index.unsqueeze(-1).expand(-1, -1, x.shape[-1]))


def dropout(x: torch.Tensor, rate: float, generator: torch.Generator | None = None, training: bool = True):
    if not training or rate <= 0.0:
        return x
    keep = torch.rand(x.shape, generator=generator, dtype=x.dtype, device=x.device) >= rate
    return x * keep.to(x.dtype) / (1.0 - rate)


class LayerNorm(nn.Module):
    def __init__(self, width: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(width))
        self.bias = nn.Parameter(torch.zeros(width))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.gain, self.bias, self.eps)


# ---------------------------------------------------------------------------
# parameters and randomness
# ---------------------------------------------------------------------------


class ParameterRegistry(Mapping[str, torch.Tensor]):
    """Named trainable tensors, iterated in sorted-name order."""

    def __init__(self, named: Iterable[tuple[str, torch.Tensor]] = ()):
        self._params: dict[str, torch.Tensor] = {}
        for name, p in named:
            self.register(name, p)

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParameterRegistry":
        return cls(module.named_parameters())

    def register(self, name: str, tensor: torch.Tensor) -> None:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._params[name] = tensor

    def __getitem__(self, name):
        return self._params[name]

    def __iter__(self):
        return iter(sorted(self._params))

    def __len__(self):
        return len(self._params)


class RngStream:
    """Counter-based (Philox) random stream keyed by a seed and an optional path.

    ``RngStream(seed).child(i, j)`` is a pure function of ``(seed, i, j)`` so
    per-sample streams stay reproducible regardless of execution order.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self._seq = np.random.SeedSequence(self.seed, spawn_key=self.key)
        self.numpy = np.random.Generator(np.random.Philox(self._seq))

    def child(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(key))

    def torch_generator(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(int(self._seq.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)))
        return g


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(f: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], eps: float = 1e-5) -> float:
    """Max relative error between autograd and central differences over every input coordinate.

    ``f`` must return a scalar.  Inputs are perturbed in place one coordinate
    at a time (restored afterwards); relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    leaves = [x.detach().clone().requires_grad_(True) for x in inputs]
    out = f(*leaves)
    if out.numel() != 1:
        raise ShapeError("grad_check", f"function must be scalar, got shape {tuple(out.shape)}")
    grads = torch.autograd.grad(out, leaves, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for leaf, grad in zip(leaves, grads):
            analytic = torch.zeros_like(leaf) if grad is None else grad.contiguous()
            flat = leaf.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = f(*leaves).item()
                flat[i] = orig - eps
                f_minus = f(*leaves).item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = analytic.view(-1)[i].item()
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst


def module_grad_check(
    module: nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    eps: float = 1e-5,
    max_entries: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    include: Optional[Callable[[str], bool]] = None,
) -> dict[str, float]:
    """Per-parameter max relative error for a scalar loss closure over ``module``'s parameters.

    With ``max_entries`` only that many randomly chosen coordinates of each
    larger tensor are perturbed (drawn from ``rng``).  ``include`` filters
    parameter names.
    """
    params = ParameterRegistry.from_module(module)
    module.zero_grad(set_to_none=True)
    loss = loss_fn()
    if loss.numel() != 1:
        raise ShapeError("module_grad_check", "loss must be scalar")
    names = [n for n in params if include is None or include(n)]
    grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
    report = {}
    with torch.no_grad():
        for name, grad in zip(names, grads):
            p = params[name]
            analytic = torch.zeros_like(p) if grad is None else grad.contiguous()
            flat = p.data.view(-1)
            worst = 0.0
            coords = range(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                coords = (rng or np.random.default_rng(0)).choice(flat.numel(), size=max_entries, replace=False).tolist()
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = loss_fn().item()
                flat[i] = orig - eps
                f_minus = loss_fn().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * eps)
                a = analytic.view(-1)[i].item()
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-8))
            report[name] = worst
    return report


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

MAGIC = b"RAYDCKPT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2, np.dtype(np.uint8): 3}


def _as_numpy(value) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    arr = np.asarray(value)
    if arr.dtype not in _TAGS:
        raise CheckpointError(f"unsupported dtype {arr.dtype}")
    return arr


def encode_checkpoint(entries: Mapping[str, object]) -> bytes:
    """Serialize named arrays: header (magic, version, count) then one record per entry."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, value in entries.items():
        arr = _as_numpy(value)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BI", _TAGS[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_TAGS[arr.dtype]]).tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> "OrderedDict[str, np.ndarray]":
    def take(n):
        nonlocal offset
        if offset + n > len(data):
            raise CheckpointError(f"truncated checkpoint at byte {offset}")
        chunk = data[offset : offset + n]
        offset += n
        return chunk

    offset = 0
    if take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    entries: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        tag, rank = struct.unpack("<BI", take(5))
        if tag not in _DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for entry {name!r}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        dtype = _DTYPES[tag]
        count_values = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(take(count_values * dtype.itemsize), dtype=dtype).reshape(dims)
        entries[name] = arr.copy()
    if offset != len(data):
        raise CheckpointError(f"{len(data) - offset} trailing bytes after last entry")
    return entries


def save_checkpoint(path, entries: Mapping[str, object]) -> None:
    Path(path).write_bytes(encode_checkpoint(entries))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    return decode_checkpoint(Path(path).read_bytes())
