"""Tensor primitives, deterministic RNG, gradient checking and the binary tensor container.

Everything runs in float64 on CPU. Torch is the array/autograd carrier; the
operations here add the shape contracts, finiteness checks and conventions the
rest of the package relies on.
"""
from __future__ import annotations

import hashlib
import io
import math
import struct
from collections.abc import Callable, Iterable, Mapping, Sequence
from os import PathLike
from typing import BinaryIO

import numpy as np
import torch
import torch.nn.functional as F

from .errors import NumericalError, ShapeError

DTYPE = torch.float64

__all__ = [
    "DTYPE",
    "Rng",
    "attention",
    "bilinear_sample",
    "bilinear_sample_points",
    "check_finite",
    "conv2d",
    "grad_check",
    "grad_check_params",
    "group_norm",
    "load_tensor",
    "load_tensor_map",
    "read_tensor",
    "resize_bilinear",
    "save_tensor",
    "save_tensor_map",
    "write_tensor",
]


def check_finite(t: torch.Tensor, where: str = "tensor") -> torch.Tensor:
    if not bool(torch.isfinite(t).all()):
        raise NumericalError(f"non-finite values in {where}")
    return t


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


def _derive_key(seed: int, path: tuple) -> int:
    h = hashlib.blake2b(digest_size=16)
    h.update(repr((int(seed),) + tuple(path)).encode())
    return int.from_bytes(h.digest(), "little")


class Rng:
    """Counter-based (Philox) generator with labelled sub-streams.

    ``Rng(7).substream("source", 3)`` always yields the same stream regardless
    of what other streams were consumed, so per-item work can run in any order.
    """

    def __init__(self, seed: int, path: Sequence = ()):
        self.seed = int(seed)
        self.path = tuple(path)
        self._gen = np.random.Generator(np.random.Philox(key=_derive_key(self.seed, self.path)))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, path={self.path!r})"

    def substream(self, *labels) -> "Rng":
        return Rng(self.seed, self.path + tuple(labels))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def random(self, size=None):
        return self._gen.random(size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def bernoulli(self, p: float, size=None):
        return self._gen.random(size) < p

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal_tensor(self, shape: Sequence[int]) -> torch.Tensor:
        return torch.from_numpy(self._gen.standard_normal(tuple(shape))).to(DTYPE)


# ---------------------------------------------------------------------------
# Array operations
# ---------------------------------------------------------------------------


def conv2d(
    input: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> torch.Tensor:
    """Cross-correlation of ``[N,C,H,W]`` with ``[O,C,k,k]``.

    Output extents follow the usual floor rule, ``(H + 2p - k) // stride + 1``.
    """
    if input.dim() != 4 or weight.dim() != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {tuple(input.shape)}, {tuple(weight.shape)}")
    o, c, kh, kw = weight.shape
    if input.shape[1] != c:
        raise ShapeError(f"conv2d: input has {input.shape[1]} channels, weight expects {c}")
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {kh}x{kw}")
    if bias is not None and tuple(bias.shape) != (o,):
        raise ShapeError(f"conv2d: bias shape {tuple(bias.shape)} != ({o},)")
    h, w = input.shape[2:]
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError("conv2d: kernel larger than padded input")
    return F.conv2d(input, weight, bias, stride=stride, padding=padding)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Scaled dot-product attention over the last two axes.

    Leading batch axes are allowed. Returns ``(out, weights)`` with
    ``weights = softmax(q k^T / sqrt(d))``.
    """
    if k.shape[-2] == 0:
        raise ShapeError("attention: empty key set")
    d = q.shape[-1]
    if d == 0 or k.shape[-1] != d:
        raise ShapeError(f"attention: query dim {d} vs key dim {k.shape[-1]}")
    if v.shape[-2] != k.shape[-2]:
        raise ShapeError("attention: keys and values differ in length")
    logits = torch.matmul(q, k.transpose(-1, -2)) / math.sqrt(d)
    weights = torch.softmax(logits, dim=-1)
    return torch.matmul(weights, v), weights


def group_norm(
    x: torch.Tensor,
    groups: int,
    gamma: torch.Tensor | None = None,
    beta: torch.Tensor | None = None,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Group normalisation; ``gamma``/``beta`` of None mean the parameter-free form."""
    if x.dim() < 2:
        raise ShapeError("group_norm needs at least [N, C]")
    c = x.shape[1]
    if groups <= 0 or c % groups:
        raise ShapeError(f"group_norm: {groups} groups do not divide {c} channels")
    if eps <= 0:
        raise ValueError("eps must be positive")
    return F.group_norm(x, groups, gamma, beta, eps)


def bilinear_sample_points(fmap: torch.Tensor, xs: torch.Tensor, ys: torch.Tensor) -> torch.Tensor:
    """Bilinear reads from ``fmap[C,H,W]`` at continuous pixel coordinates.

    Pixel ``(i, j)`` has its centre at ``(j + 0.5, i + 0.5)``; reads beyond the
    outermost centres clamp to the border. Returns ``[C, *xs.shape]``.
    """
    _, h, w = fmap.shape
    u = (xs - 0.5).clamp(0.0, w - 1)
    v = (ys - 0.5).clamp(0.0, h - 1)
    x0 = torch.floor(u).long()
    y0 = torch.floor(v).long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)
    ax = u - x0.to(u.dtype)
    ay = v - y0.to(v.dtype)
    top = fmap[:, y0, x0] * (1 - ax) + fmap[:, y0, x1] * ax
    bottom = fmap[:, y1, x0] * (1 - ax) + fmap[:, y1, x1] * ax
    return top * (1 - ay) + bottom * ay


def bilinear_sample(fmap: torch.Tensor, x: float, y: float) -> torch.Tensor:
    xs = torch.tensor([float(x)], dtype=fmap.dtype)
    ys = torch.tensor([float(y)], dtype=fmap.dtype)
    return bilinear_sample_points(fmap, xs, ys)[:, 0]


def resize_bilinear(img: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Resize ``[C,H,W]`` or ``[N,C,H,W]`` with half-pixel-centre bilinear interpolation."""
    squeeze = img.dim() == 3
    x = img.unsqueeze(0) if squeeze else img
    if tuple(x.shape[-2:]) == tuple(size):
        out = x
    else:
        out = F.interpolate(x, size=tuple(size), mode="bilinear", align_corners=False)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def _rel_err(g_ad: float, g_fd: float) -> float:
    return abs(g_ad - g_fd) / max(1.0, abs(g_ad), abs(g_fd))


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    h: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``coords`` restricts the finite-difference sweep to those flat indices.
    """
    x0 = x.detach().to(DTYPE).clone()
    xr = x0.clone().requires_grad_(True)
    y = f(xr)
    if not bool(torch.isfinite(y)):
        raise NumericalError("grad_check: non-finite function value")
    (g,) = torch.autograd.grad(y, xr, allow_unused=True)
    g = torch.zeros_like(x0) if g is None else g.detach()
    check_finite(g, "grad_check analytic gradient")
    idx = range(x0.numel()) if coords is None else coords
    worst = 0.0
    flat = g.reshape(-1)
    with torch.no_grad():
        for i in idx:
            xp = x0.clone()
            xp.view(-1)[i] += h
            xm = x0.clone()
            xm.view(-1)[i] -= h
            fp, fm = float(f(xp)), float(f(xm))
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NumericalError("grad_check: non-finite value during finite differences")
            worst = max(worst, _rel_err(float(flat[i]), (fp - fm) / (2 * h)))
    return worst


def grad_check_params(
    loss_fn: Callable[[], torch.Tensor],
    params: Mapping[str, torch.Tensor],
    h: float = 1e-5,
    per_tensor: int | None = None,
    rng: Rng | None = None,
) -> dict[str, float]:
    """Per-parameter max relative gradient error for a closure over model parameters.

    Parameters are perturbed in place and restored exactly. With ``per_tensor``
    set, that many random coordinates are probed in each tensor.
    """
    names = list(params)
    tensors = [params[n] for n in names]
    for p in tensors:
        p.grad = None
    loss = loss_fn()
    if not bool(torch.isfinite(loss)):
        raise NumericalError("grad_check_params: non-finite loss")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    rng = rng or Rng(0, ("grad_check",))
    out: dict[str, float] = {}
    with torch.no_grad():
        for name, p, g in zip(names, tensors, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            n = flat.numel()
            if per_tensor is None or per_tensor >= n:
                idx = range(n)
            else:
                idx = rng.generator.choice(n, size=per_tensor, replace=False).tolist()
            worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                fp = float(loss_fn())
                flat[i] = orig - h
                fm = float(loss_fn())
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericalError(f"grad_check_params: non-finite loss perturbing {name}")
                worst = max(worst, _rel_err(float(g.reshape(-1)[i]), (fp - fm) / (2 * h)))
            out[name] = worst
    return out


# ---------------------------------------------------------------------------
# Binary container: b"CCTN", u16 version, u16 rank, u64[rank] extents, <f8 payload
# ---------------------------------------------------------------------------

TENSOR_MAGIC = b"CCTN"
TENSOR_VERSION = 1
MAP_MAGIC = b"CCTM"


def write_tensor(fh: BinaryIO, t: torch.Tensor) -> None:
    arr = t.detach().cpu().contiguous().numpy().astype("<f8", copy=False)
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<HH", TENSOR_VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise ShapeError("truncated tensor container")
    return buf


def read_tensor(fh: BinaryIO) -> torch.Tensor:
    if _read_exact(fh, 4) != TENSOR_MAGIC:
        raise ShapeError("bad tensor magic")
    version, rank = struct.unpack("<HH", _read_exact(fh, 4))
    if version != TENSOR_VERSION:
        raise ShapeError(f"unsupported tensor container version {version}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    count = int(np.prod(shape)) if rank else 1
    arr = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(shape)
    return torch.from_numpy(arr.astype(np.float64))


def save_tensor(path: str | PathLike, t: torch.Tensor) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, t)


def load_tensor(path: str | PathLike) -> torch.Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_tensor_map(path: str | PathLike, tensors: Mapping[str, torch.Tensor]) -> None:
    """Named map of tensor containers: b"CCTM", u32 count, then (u16 len, utf-8 name, tensor)*."""
    buf = io.BytesIO()
    buf.write(MAP_MAGIC)
    buf.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        write_tensor(buf, tensors[name])
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_tensor_map(path: str | PathLike) -> dict[str, torch.Tensor]:
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAP_MAGIC:
            raise ShapeError("bad checkpoint magic")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        out = {}
        for _ in range(count):
            (n,) = struct.unpack("<H", _read_exact(fh, 2))
            name = _read_exact(fh, n).decode()
            out[name] = read_tensor(fh)
        return out
