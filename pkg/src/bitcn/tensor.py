"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every op creates a node holding its output array, its parent tensors and a
closure mapping the upstream gradient to one gradient per parent. Nodes get a
monotonically increasing sequence number on creation, so sorting the nodes
reachable from a loss by that number gives a valid topological order.

Layout convention for sequence data is time-major: ``(T, batch, channels)``.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

from .errors import NumericalError, OutOfVocabularyError, ShapeError

_seq = itertools.count()
_grad_enabled = True

SOFTPLUS_THRESHOLD = 30.0
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@contextlib.contextmanager
def no_grad():
    """Run ops without recording them on the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "op", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._seq = next(_seq)

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.op = op
        out._seq = next(_seq)
        track = _grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def check_finite(self, what: str | None = None) -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NumericalError(f"non-finite values in {what or self.op}")
        return self

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable t that requires grad."""
        if self.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        nodes = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if id(node) in nodes:
                continue
            nodes[id(node)] = node
            stack.extend(p for p in node._parents if p.requires_grad)
        order = sorted(nodes.values(), key=lambda n: n._seq, reverse=True)

        pending = {id(self): np.ones_like(self.data)}
        for node in order:
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericalError(f"non-finite gradient produced by '{node.op}' node #{node._seq}")
                prev = pending.get(id(parent))
                pending[id(parent)] = pg if prev is None else prev + pg

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._make(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._make(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor._make(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * a.data / b.data**2, b.shape)

    return Tensor._make(a.data / b.data, (a, b), backward, "div")


def log(x: Tensor) -> Tensor:
    return Tensor._make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._make(out, (x,), lambda g: (g * out,), "exp")


def tsum(x: Tensor) -> Tensor:
    return Tensor._make(np.array(x.data.sum()), (x,), lambda g: (np.full(x.shape, float(g)),), "sum")


def mean(x: Tensor) -> Tensor:
    n = x.size
    return Tensor._make(np.array(x.data.mean()), (x,), lambda g: (np.full(x.shape, float(g) / n),), "mean")


# -- activations ----------------------------------------------------------------


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    xd = x.data
    # 0.5 (1 + tanh u) == sigmoid(2u); the sigmoid form keeps the far negative tail nonzero
    x2 = xd * xd
    s = _sigmoid((2.0 * _GELU_C) * xd * (1.0 + _GELU_A * x2))
    out = xd * s

    def backward(g):
        du = (2.0 * _GELU_C) * (1.0 + (3.0 * _GELU_A) * x2)
        return (g * s * (1.0 + xd * (1.0 - s) * du),)

    return Tensor._make(out, (x,), backward, "gelu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return special.expit(x)


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), returning x itself above the overflow threshold."""
    xd = x.data
    out = np.where(xd > SOFTPLUS_THRESHOLD, xd, np.log1p(np.exp(np.minimum(xd, SOFTPLUS_THRESHOLD))))
    return Tensor._make(out, (x,), lambda g: (g * _sigmoid(xd),), "softplus")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout; identity outside training or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# -- linear maps ----------------------------------------------------------------


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ W + b`` over the trailing axis of ``x``; ``W`` is ``(in, out)``."""
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"affine: trailing dim {x.shape[-1]} does not match W {W.shape}")
    if b is not None and b.shape != (W.shape[1],):
        raise ShapeError(f"affine: bias shape {b.shape} does not match W {W.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, W.shape[0])
    out = x2 @ W.data
    if b is not None:
        out += b.data

    def backward(g):
        g2 = g.reshape(-1, W.shape[1])
        gx = (g2 @ W.data.T).reshape(x.shape)
        gw = x2.T @ g2
        return (gx, gw, g2.sum(axis=0)) if b is not None else (gx, gw)

    parents = (x, W, b) if b is not None else (x, W)
    return Tensor._make(out.reshape(*lead, W.shape[1]), parents, backward, "affine")


def weight_norm(v: Tensor, g: Tensor, axis: int = 0) -> Tensor:
    """Effective weight ``g * v / ||v||`` with one norm per slice along ``axis``.

    ``axis`` indexes output units; the norm runs over all remaining axes
    (the unit's fan-in).
    """
    axis = axis % v.ndim
    if g.shape != (v.shape[axis],):
        raise ShapeError(f"weight_norm: g shape {g.shape} does not match units of v {v.shape}")
    others = tuple(i for i in range(v.ndim) if i != axis)
    bshape = [1] * v.ndim
    bshape[axis] = v.shape[axis]
    norm = np.sqrt((v.data**2).sum(axis=others, keepdims=True))
    if np.any(norm == 0.0):
        raise NumericalError("weight_norm: zero-norm slice in v")
    gb = g.data.reshape(bshape)
    u = v.data / norm
    out = gb * u

    def backward(grad):
        proj = (grad * u).sum(axis=others, keepdims=True)
        gv = gb / norm * (grad - u * proj)
        return gv, proj.reshape(g.shape)

    return Tensor._make(out, (v, g), backward, "weight_norm")


@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int
    dilation: int
    direction: str  # "backward" (causal) or "forward" (anticausal)
    in_channels: int
    out_channels: int
    groups: int = 1

    def __post_init__(self):
        if self.kernel_size < 1 or self.dilation < 1:
            raise ValueError("kernel_size and dilation must be positive")
        if self.direction not in ("backward", "forward"):
            raise ValueError(f"unknown conv direction {self.direction!r}")
        if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
            raise ShapeError(
                f"groups={self.groups} must divide in_channels={self.in_channels} "
                f"and out_channels={self.out_channels}"
            )

    @property
    def padding(self) -> int:
        return (self.kernel_size - 1) * self.dilation

    @property
    def weight_shape(self) -> tuple[int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, self.kernel_size)


def dilated_conv(x: Tensor, spec: ConvSpec, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Dilated 1-D convolution over the leading (time) axis of ``x``.

    backward: ``out[s] = sum_j w[:, :, j] x[s - d j]`` with left zero padding.
    forward:  ``out[s] = sum_j w[:, :, j] x[s + d j]`` with right zero padding.
    Output length equals input length.
    """
    if x.ndim != 3 or x.shape[2] != spec.in_channels:
        raise ShapeError(f"dilated_conv: expected (T, batch, {spec.in_channels}), got {x.shape}")
    if x.shape[0] < 1:
        raise ShapeError("dilated_conv: empty time axis")
    if weight.shape != spec.weight_shape:
        raise ShapeError(f"dilated_conv: weight {weight.shape} != {spec.weight_shape}")
    if bias is not None and bias.shape != (spec.out_channels,):
        raise ShapeError(f"dilated_conv: bias {bias.shape} != ({spec.out_channels},)")

    T, B, C = x.shape
    k, d, G = spec.kernel_size, spec.dilation, spec.groups
    cin, cout = C // G, spec.out_channels // G
    pad = spec.padding
    xp = np.zeros((T + pad, B, C))
    body = slice(pad, None) if spec.direction == "backward" else slice(0, T)
    xp[body] = x.data
    flat = xp.reshape(-1, C)
    # tap j reads padded row offset[j] + s: x[s - d j] (causal) or x[s + d j] (anticausal)
    offsets = [pad - d * j if spec.direction == "backward" else d * j for j in range(k)]
    if G == 1:
        dense = weight.data
    else:
        # grouped kernel as a block-diagonal dense kernel; off-block gradients are discarded
        dense = np.zeros((spec.out_channels, C, k))
        for gi in range(G):
            dense[gi * cout:(gi + 1) * cout, gi * cin:(gi + 1) * cin] = weight.data[gi * cout:(gi + 1) * cout]
    mats = [np.ascontiguousarray(dense[:, :, j].T) for j in range(k)]

    out = np.zeros((T * B, spec.out_channels))
    for j in range(k):
        out += flat[offsets[j] * B:(offsets[j] + T) * B] @ mats[j]
    if bias is not None:
        out += bias.data

    def backward(g):
        g2 = g.reshape(T * B, spec.out_channels)
        gflat = np.zeros_like(flat)
        gdense = np.empty((spec.out_channels, C, k))
        for j in range(k):
            rows = slice(offsets[j] * B, (offsets[j] + T) * B)
            gflat[rows] += g2 @ mats[j].T
            gdense[:, :, j] = (flat[rows].T @ g2).T
        if G == 1:
            gw = gdense
        else:
            gw = np.empty_like(weight.data)
            for gi in range(G):
                gw[gi * cout:(gi + 1) * cout] = gdense[gi * cout:(gi + 1) * cout, gi * cin:(gi + 1) * cin]
        grads = [gflat.reshape(xp.shape)[body], gw]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return Tensor._make(out.reshape(T, B, spec.out_channels), parents, backward, f"conv_{spec.direction}")


def embedding(ids, table: Tensor) -> Tensor:
    """Gather rows of ``table`` at integer ``ids``; gradients scatter-add back."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise TypeError(f"embedding ids must be integers, got {ids.dtype}")
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        bad = ids[(ids < 0) | (ids >= vocab)].reshape(-1)[0]
        raise OutOfVocabularyError(f"id {bad} outside vocabulary of size {vocab}")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return Tensor._make(table.data[ids], (table,), backward, "embedding")


# -- shape ops -------------------------------------------------------------------


def slice_time(x: Tensor, start: int, length: int) -> Tensor:
    T = x.shape[0]
    if start < 0 or length < 0 or start + length > T:
        raise ShapeError(f"slice_time: [{start}, {start + length}) outside length {T}")
    if start == 0 and length == T:
        return x

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[start:start + length] = g
        return (gx,)

    return Tensor._make(x.data[start:start + length], (x,), backward, "slice_time")


def slice_channels(x: Tensor, start: int, length: int) -> Tensor:
    C = x.shape[-1]
    if start < 0 or length < 0 or start + length > C:
        raise ShapeError(f"slice_channels: [{start}, {start + length}) outside {C} channels")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[..., start:start + length] = g
        return (gx,)

    return Tensor._make(x.data[..., start:start + length], (x,), backward, "slice_channels")


def concat_channels(*xs: Tensor) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ShapeError(f"concat_channels: leading dims {x.shape[:-1]} != {lead}")
    if len(xs) == 1:
        return xs[0]
    widths = [x.shape[-1] for x in xs]
    edges = np.cumsum([0] + widths)

    def backward(g):
        return [g[..., edges[i]:edges[i + 1]] for i in range(len(xs))]

    return Tensor._make(np.concatenate([x.data for x in xs], axis=-1), xs, backward, "concat")


# -- debug text dumps --------------------------------------------------------------


def dump_text(t: Tensor | np.ndarray, fh) -> None:
    """Write ``shape: d0 d1 ...`` then one value per line (repr precision)."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    fh.write("shape: " + " ".join(str(n) for n in arr.shape) + "\n")
    for v in arr.reshape(-1):
        fh.write(repr(float(v)) + "\n")


def load_text(fh) -> Tensor:
    header = fh.readline()
    if not header.startswith("shape:"):
        raise ValueError("missing 'shape:' header")
    shape = tuple(int(n) for n in header[len("shape:"):].split())
    values = [float(line) for line in fh if line.strip()]
    return Tensor(np.array(values, dtype=np.float64).reshape(shape))


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
