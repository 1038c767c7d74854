"""Minimal differentiable numeric core.

A small reverse-mode automatic differentiation engine over numpy arrays,
plus the neural building blocks the rest of the package needs: linear
layers, softmax, layer normalization, multi-head self-attention and
pre-norm transformer blocks, a finite-difference gradient checker, and a
binary parameter checkpoint format.

Every operation accepts arbitrary leading batch dimensions; documented
shapes such as ``(N, D)`` are the trailing axes. Forward arithmetic is
float32 by default; the gradient checker replays the computation in
float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, fields
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ConfigError, DataError, NumericError

INV_SQRT2 = 0.7071067811865476
INV_SQRT_2PI = 0.3989422804014327


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A numpy array plus the bookkeeping for reverse-mode gradients.

    Leaf tensors are validated to hold only finite values; interior nodes
    produced by operations skip that check for speed. ``grad`` is filled
    by :meth:`backward` and accumulates across calls until reset.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_prev")

    def __init__(self, data, requires_grad: bool = False, _prev: tuple = (), _backward=None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if not _prev and not np.all(np.isfinite(arr)):
            raise DataError("tensor holds non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _prev)
        self._prev = _prev if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- autograd machinery --------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        # Never mutated in place, so sharing the incoming array is safe.
        self.grad = g if self.grad is None else self.grad + g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this node; `grad` defaults to 1 for scalars."""
        if not self.requires_grad:
            raise DataError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.size != 1:
                raise DataError("backward() without explicit grad needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)

        # Iterative topological order; graphs exceed the recursion limit.
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for child in node._prev:
                if child.requires_grad and id(child) not in seen:
                    stack.append((child, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- elementwise arithmetic ----------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        out_data = self.data + other.data

        def _bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor(out_data, _prev=(self, other), _backward=_bw)

    def __mul__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        out_data = self.data * other.data

        def _bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor(out_data, _prev=(self, other), _backward=_bw)

    def __truediv__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))
        out_data = self.data / other.data

        def _bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * self.data / (other.data * other.data), other.shape))

        return Tensor(out_data, _prev=(self, other), _backward=_bw)

    def __neg__(self) -> "Tensor":
        def _bw(g):
            self._accumulate(-g)

        return Tensor(-self.data, _prev=(self,), _backward=_bw)

    def __sub__(self, other) -> "Tensor":
        return self + (-(other if isinstance(other, Tensor) else Tensor(np.asarray(other, dtype=self.dtype))))

    def __radd__(self, other) -> "Tensor":
        return self + other

    def __rmul__(self, other) -> "Tensor":
        return self * other

    def __rsub__(self, other) -> "Tensor":
        return (-self) + other

    def __rtruediv__(self, other) -> "Tensor":
        return Tensor(np.asarray(other, dtype=self.dtype)) / self

    def __pow__(self, exponent: float) -> "Tensor":
        out_data = self.data ** exponent

        def _bw(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))

        return Tensor(out_data, _prev=(self,), _backward=_bw)

    # -- transcendental ops ----------------------------------------------------

    def exp(self) -> "Tensor":
        out_data = np.exp(self.data)

        def _bw(g):
            self._accumulate(g * out_data)

        return Tensor(out_data, _prev=(self,), _backward=_bw)

    def log(self) -> "Tensor":
        def _bw(g):
            self._accumulate(g / self.data)

        return Tensor(np.log(self.data), _prev=(self,), _backward=_bw)

    def sqrt(self) -> "Tensor":
        out_data = np.sqrt(self.data)

        def _bw(g):
            self._accumulate(g / (2.0 * out_data))

        return Tensor(out_data, _prev=(self,), _backward=_bw)

    def tanh(self) -> "Tensor":
        out_data = np.tanh(self.data)

        def _bw(g):
            self._accumulate(g * (1.0 - out_data * out_data))

        return Tensor(out_data, _prev=(self,), _backward=_bw)

    def arctanh(self) -> "Tensor":
        def _bw(g):
            self._accumulate(g / (1.0 - self.data * self.data))

        return Tensor(np.arctanh(self.data), _prev=(self,), _backward=_bw)

    def relu(self) -> "Tensor":
        mask = (self.data > 0).astype(self.dtype)

        def _bw(g):
            self._accumulate(g * mask)

        return Tensor(self.data * mask, _prev=(self,), _backward=_bw)

    def gelu(self) -> "Tensor":
        """Exact Gaussian-error-linear unit, 0.5 x (1 + erf(x / sqrt(2)))."""
        phi = 0.5 * (1.0 + erf(self.data * INV_SQRT2))

        def _bw(g):
            pdf = np.exp(-0.5 * self.data * self.data) * INV_SQRT_2PI
            self._accumulate(g * (phi + self.data * pdf))

        return Tensor(self.data * phi, _prev=(self,), _backward=_bw)

    def clip_min(self, bound: float) -> "Tensor":
        """Clamp below; gradient passes only where the input is above `bound`."""
        mask = (self.data > bound).astype(self.dtype)

        def _bw(g):
            self._accumulate(g * mask)

        return Tensor(np.maximum(self.data, bound), _prev=(self,), _backward=_bw)

    def clip_max(self, bound: float) -> "Tensor":
        mask = (self.data < bound).astype(self.dtype)

        def _bw(g):
            self._accumulate(g * mask)

        return Tensor(np.minimum(self.data, bound), _prev=(self,), _backward=_bw)

    # -- reductions ------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def _bw(g):
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.shape).astype(self.dtype, copy=True))
                return
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, self.shape).astype(self.dtype, copy=True))

        return Tensor(out_data, _prev=(self,), _backward=_bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        elif isinstance(axis, tuple):
            count = int(np.prod([self.shape[a] for a in axis]))
        else:
            count = self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis: int, keepdims: bool = False) -> "Tensor":
        """Max along one axis; ties share the gradient evenly."""
        out_data = self.data.max(axis=axis, keepdims=True)
        mask = (self.data == out_data).astype(self.dtype)
        mask /= mask.sum(axis=axis, keepdims=True)

        def _bw(g):
            if not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(g * mask)

        return Tensor(out_data if keepdims else out_data.squeeze(axis), _prev=(self,), _backward=_bw)

    # -- shape ops ---------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        in_shape = self.shape

        def _bw(g):
            self._accumulate(g.reshape(in_shape))

        return Tensor(self.data.reshape(shape), _prev=(self,), _backward=_bw)

    def transpose(self, axes: Sequence[int]) -> "Tensor":
        axes = tuple(axes)
        inv = tuple(np.argsort(axes))

        def _bw(g):
            self._accumulate(g.transpose(inv))

        return Tensor(self.data.transpose(axes), _prev=(self,), _backward=_bw)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        perm = list(range(self.ndim))
        perm[a], perm[b] = perm[b], perm[a]
        return self.transpose(perm)

    def __getitem__(self, idx) -> "Tensor":
        def _bw(g):
            full = np.zeros(self.shape, dtype=self.dtype)
            np.add.at(full, idx, g)
            self._accumulate(full)

        return Tensor(self.data[idx], _prev=(self,), _backward=_bw)

    # -- matrix multiply ------------------------------------------------------------

    def __matmul__(self, other: "Tensor") -> "Tensor":
        if self.ndim < 2 or other.ndim < 2:
            raise DataError("matmul operands must have at least 2 dimensions")
        if self.shape[-1] != other.shape[-2]:
            raise DataError(f"matmul inner dims differ: {self.shape} @ {other.shape}")
        out_data = self.data @ other.data

        def _bw(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g @ other.data.swapaxes(-1, -2), self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(self.data.swapaxes(-1, -2) @ g, other.shape))

        return Tensor(out_data, _prev=(self, other), _backward=_bw)


# -- free functions over tensors -------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along `axis`, splitting the gradient back per input."""
    tensors = list(tensors)
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return Tensor(out_data, _prev=tuple(tensors), _backward=_bw)


def where(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Elementwise select; `mask` is a plain boolean array, not differentiated."""
    mask = np.asarray(mask, dtype=bool)
    out_data = np.where(mask, a.data, b.data)

    def _bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(np.where(mask, g, 0.0), a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(np.where(mask, 0.0, g), b.shape))

    return Tensor(out_data, _prev=(a, b), _backward=_bw)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map y = x @ w + b for x (..., N, Din), w (Din, Dout), b (Dout,)."""
    if x.shape[-1] != w.shape[0] or w.shape[1] != b.shape[-1]:
        raise DataError(f"linear shape mismatch: x {x.shape}, w {w.shape}, b {b.shape}")
    return x @ w + b


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along `axis` (max subtraction)."""
    shift = x.data.max(axis=axis, keepdims=True)
    e = (x - Tensor(shift)).exp()
    return e / e.sum(axis=axis, keepdims=True)


def layer_norm(x: Tensor, scale: Tensor, offset: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then rescale."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / (var + eps).sqrt() * scale + offset


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-24) -> Tensor:
    norm = ((x * x).sum(axis=axis, keepdims=True) + eps).sqrt()
    return x / norm


# -- attention and transformer blocks ------------------------------------------------


@dataclass
class AttentionOutput:
    """Attended tokens plus the per-head attention map that produced them."""

    output: Tensor  # (..., N, D)
    attn: Tensor  # (..., heads, N, N), rows sum to 1


@dataclass
class BlockParams:
    """All learnable tensors of one pre-norm transformer block."""

    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor
    ln1_scale: Tensor
    ln1_offset: Tensor
    ln2_scale: Tensor
    ln2_offset: Tensor

    def tensors(self) -> Iterable[tuple[str, Tensor]]:
        for f in fields(self):
            yield f.name, getattr(self, f.name)


def self_attention(x: Tensor, p: BlockParams, heads: int) -> AttentionOutput:
    """Multi-head scaled dot-product self-attention over x (..., N, D).

    Scores are scaled by 1/sqrt(D/heads). The returned attention map keeps
    one row per query token and head, each row summing to 1.
    """
    d = x.shape[-1]
    if d % heads != 0:
        raise ConfigError(f"model width {d} not divisible by {heads} heads")
    head_dim = d // heads
    n = x.shape[-2]
    lead = x.shape[:-2]

    def split(t: Tensor) -> Tensor:
        return t.reshape(lead + (n, heads, head_dim)).swapaxes(-3, -2)

    q = split(linear(x, p.wq, p.bq))
    k = split(linear(x, p.wk, p.bk))
    v = split(linear(x, p.wv, p.bv))

    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(head_dim))
    attn = softmax(scores, axis=-1)
    ctx = (attn @ v).swapaxes(-3, -2).reshape(lead + (n, d))
    return AttentionOutput(output=linear(ctx, p.wo, p.bo), attn=attn)


def transformer_block(x: Tensor, p: BlockParams, heads: int) -> tuple[Tensor, AttentionOutput]:
    """Pre-norm block: x + Attn(LN(x)), then + FFN(LN(.)) with GELU.

    Returns the new token sequence and this block's attention, which the
    encoders mine for saliency scores.
    """
    ao = self_attention(layer_norm(x, p.ln1_scale, p.ln1_offset), p, heads)
    x = x + ao.output
    h = linear(layer_norm(x, p.ln2_scale, p.ln2_offset), p.ffn_w1, p.ffn_b1).gelu()
    x = x + linear(h, p.ffn_w2, p.ffn_b2)
    return x, ao


# -- initialization ------------------------------------------------------------------


def init_linear(rng: np.random.Generator, d_in: int, d_out: int) -> tuple[Tensor, Tensor]:
    """Fan-in scaled uniform weights, zero bias."""
    bound = 1.0 / np.sqrt(d_in)
    w = rng.uniform(-bound, bound, size=(d_in, d_out)).astype(np.float32)
    return Tensor(w, requires_grad=True), Tensor(np.zeros(d_out, dtype=np.float32), requires_grad=True)


def init_block(rng: np.random.Generator, d: int, ffn_hidden: int) -> BlockParams:
    wq, bq = init_linear(rng, d, d)
    wk, bk = init_linear(rng, d, d)
    wv, bv = init_linear(rng, d, d)
    wo, bo = init_linear(rng, d, d)
    w1, b1 = init_linear(rng, d, ffn_hidden)
    w2, b2 = init_linear(rng, ffn_hidden, d)
    ones = lambda: Tensor(np.ones(d, dtype=np.float32), requires_grad=True)
    zeros = lambda: Tensor(np.zeros(d, dtype=np.float32), requires_grad=True)
    return BlockParams(wq, bq, wk, bk, wv, bv, wo, bo, w1, b1, w2, b2, ones(), zeros(), ones(), zeros())


# -- gradient checking -----------------------------------------------------------------


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, Tensor],
    h: float = 1e-5,
    samples: int = 200,
    seed: int = 0,
) -> float:
    """Compare reverse-mode gradients against central finite differences.

    The computation is replayed in float64: `f` receives float64 copies of
    `params` and must return a scalar Tensor. When the total number of
    coordinates exceeds `samples`, a seeded subset is checked. Returns the
    maximum relative error over the checked coordinates.
    """
    p64 = {k: Tensor(v.data.astype(np.float64), requires_grad=True) for k, v in params.items()}
    out = f(p64)
    if out.size != 1:
        raise DataError("grad_check target must return a scalar")
    if not np.isfinite(out.data).all():
        raise NumericError("grad_check: non-finite function value at the base point")
    out.backward()

    coords = [(name, i) for name, t in p64.items() for i in range(t.size)]
    if len(coords) > samples:
        rng = np.random.default_rng(seed)
        picks = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[i] for i in picks]

    worst = 0.0
    for name, i in coords:
        t = p64[name]
        flat = t.data.reshape(-1)
        saved = flat[i]
        flat[i] = saved + h
        f_plus = float(f(p64).data)
        flat[i] = saved - h
        f_minus = float(f(p64).data)
        flat[i] = saved
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"grad_check: non-finite value while perturbing {name}[{i}]")
        fd = (f_plus - f_minus) / (2.0 * h)
        ad = 0.0 if t.grad is None else float(t.grad.reshape(-1)[i])
        # relative to the gradient scale, floored at 1 so that cancellation
        # noise on exactly-zero gradients is judged absolutely
        err = abs(ad - fd) / max(abs(ad), abs(fd), 1.0)
        worst = max(worst, err)
    return worst


# -- parameter checkpoints ----------------------------------------------------------------


CHECKPOINT_FORMAT = "i2ploc-checkpoint-v1"


def save_checkpoint(base_path: str, params: dict[str, Tensor], extra: dict | None = None) -> None:
    """Write `<base>.bin` (little-endian f32 blob) and `<base>.json` (manifest).

    The manifest maps parameter names to shapes and byte offsets into the
    blob; `extra` rides along for callers (epoch counters, config echo).
    """
    blob = bytearray()
    manifest: dict[str, dict] = {}
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        manifest[name] = {"shape": list(t.shape), "offset": len(blob)}
        blob.extend(raw)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "dtype": "<f4",
        "total_bytes": len(blob),
        "params": manifest,
        "extra": extra or {},
    }
    with open(base_path + ".bin", "wb") as fh:
        fh.write(bytes(blob))
    with open(base_path + ".json", "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(base_path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint pair back into float32 arrays plus the extra dict."""
    try:
        with open(base_path + ".json") as fh:
            doc = json.load(fh)
        with open(base_path + ".bin", "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {base_path!r}: {exc}") from exc
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"unrecognized checkpoint format in {base_path!r}")
    arrays: dict[str, np.ndarray] = {}
    for name, meta in doc["params"].items():
        shape = tuple(meta["shape"])
        count = int(np.prod(shape)) if shape else 1
        offset = meta["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        arrays[name] = arr.reshape(shape).astype(np.float32)
    return arrays, doc.get("extra", {})
