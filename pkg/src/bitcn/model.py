"""BiTCN: a causal TCN over lagged targets and a forward-looking TCN over covariates."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from typing import Iterator

import numpy as np

from . import tensor as tn
from .distributions import FAMILIES, STUDENT_T3
from .errors import ShapeError
from .tensor import ConvSpec, Tensor


def largest_divisor_at_most(n: int, cap: int) -> int:
    return max(d for d in range(1, min(n, cap) + 1) if n % d == 0)


def receptive_field(kernel_size: int, n_layers: int) -> int:
    """Steps seen by a stack whose layer i has dilation 2**(i-1)."""
    return 1 + (kernel_size - 1) * (2**n_layers - 1)


@dataclass
class HyperParams:
    d_hidden: int = 12
    n_layers: int = 5
    kernel_size: int = 9
    dropout: float = 0.1
    groups: int = 4
    epsilon: float = 1e-3
    distribution: str = STUDENT_T3
    softplus_mu: bool = True
    horizon: int = 24
    t0: int = 168
    t_cov: int = 500
    forward_layers: int | None = None
    forward_module: bool = True
    join: str = "concat"

    def __post_init__(self):
        for name in ("d_hidden", "n_layers", "kernel_size", "horizon", "t0", "t_cov"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.distribution not in FAMILIES:
            raise ValueError(f"distribution must be one of {FAMILIES}")
        if self.join not in ("concat", "add"):
            raise ValueError("join must be 'concat' or 'add'")
        if self.t_cov < self.t0 + self.horizon:
            raise ValueError(f"t_cov={self.t_cov} must cover t0 + horizon = {self.t0 + self.horizon}")
        if self.groups < 1:
            raise ValueError("groups must be positive")
        self.groups = largest_divisor_at_most(self.d_hidden, self.groups)
        if self.forward_layers is None:
            self.forward_layers = self.n_layers + 1

    @property
    def window(self) -> int:
        return self.t0 + self.horizon

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class InputDims:
    """Per-dataset input widths: lagged targets, numeric covariates, categorical vocabularies."""

    d_cov: int
    cardinalities: tuple[int, ...] = ()
    embedding_dims: tuple[int, ...] = ()
    d_lag: int = 1

    def __post_init__(self):
        self.cardinalities = tuple(int(c) for c in self.cardinalities)
        if not self.embedding_dims:
            self.embedding_dims = tuple(20 for _ in self.cardinalities)
        self.embedding_dims = tuple(int(e) for e in self.embedding_dims)
        if len(self.embedding_dims) != len(self.cardinalities):
            raise ValueError("one embedding dimension per categorical feature is required")

    @property
    def d_emb(self) -> int:
        return sum(self.embedding_dims)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "InputDims":
        return cls(
            d_cov=int(d["d_cov"]),
            cardinalities=tuple(d.get("cardinalities", ())),
            embedding_dims=tuple(d.get("embedding_dims", ())),
            d_lag=int(d.get("d_lag", 1)),
        )


def _he_normal(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def _unit_norms(v: np.ndarray, axis: int) -> np.ndarray:
    others = tuple(i for i in range(v.ndim) if i != axis)
    return np.sqrt((v**2).sum(axis=others))


class Dense:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.W = Tensor(rng.normal(0.0, math.sqrt(1.0 / d_in), size=(d_in, d_out)), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.affine(x, self.W, self.b)

    def named_parameters(self, prefix: str) -> Iterator[tuple[str, Tensor]]:
        yield f"{prefix}.W", self.W
        yield f"{prefix}.b", self.b


class WeightNormDense:
    """Affine map whose ``(in, out)`` weight is ``g * v / ||v||`` per output column."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        v = _he_normal(rng, (d_in, d_out), d_in)
        self.v = Tensor(v, requires_grad=True)
        self.g = Tensor(_unit_norms(v, 1), requires_grad=True)
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.affine(x, tn.weight_norm(self.v, self.g, axis=1), self.b)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.v", self.v
        yield f"{prefix}.g", self.g
        yield f"{prefix}.b", self.b


class WeightNormConv:
    def __init__(self, spec: ConvSpec, rng: np.random.Generator):
        self.spec = spec
        fan_in = spec.weight_shape[1] * spec.kernel_size
        v = _he_normal(rng, spec.weight_shape, fan_in)
        self.v = Tensor(v, requires_grad=True)
        self.g = Tensor(_unit_norms(v, 0), requires_grad=True)
        self.b = Tensor(np.zeros(spec.out_channels), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return tn.dilated_conv(x, self.spec, tn.weight_norm(self.v, self.g, axis=0), self.b)

    def named_parameters(self, prefix: str):
        yield f"{prefix}.v", self.v
        yield f"{prefix}.g", self.g
        yield f"{prefix}.b", self.b


class TemporalBlock:
    """Dilated conv (d_h -> 4 d_h) -> GELU -> dropout -> dense (4 d_h -> 2 d_h).

    The dense output splits into a residual update for the hidden state and a
    skip output that the stack sums over layers.
    """

    def __init__(self, d_hidden: int, kernel_size: int, layer_index: int, direction: str,
                 groups: int, dropout: float, rng: np.random.Generator):
        self.d_hidden = d_hidden
        self.layer_index = layer_index
        self.dropout = dropout
        spec = ConvSpec(kernel_size, 2 ** (layer_index - 1), direction, d_hidden, 4 * d_hidden, groups)
        self.conv = WeightNormConv(spec, rng)
        self.dense = WeightNormDense(4 * d_hidden, 2 * d_hidden, rng)

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> tuple[Tensor, Tensor]:
        if x.ndim != 3 or x.shape[2] != self.d_hidden:
            raise ShapeError(f"temporal block expects (T, batch, {self.d_hidden}), got {x.shape}")
        a = tn.dropout(tn.gelu(self.conv(x)), self.dropout, training, rng)
        z = self.dense(a)
        h = tn.add(x, tn.slice_channels(z, 0, self.d_hidden))
        o = tn.slice_channels(z, self.d_hidden, self.d_hidden)
        return h, o

    def named_parameters(self, prefix: str):
        yield from self.conv.named_parameters(f"{prefix}.conv")
        yield from self.dense.named_parameters(f"{prefix}.dense")


class TemporalStack:
    def __init__(self, blocks: list[TemporalBlock]):
        if not blocks:
            raise ValueError("a temporal stack needs at least one block")
        self.blocks = blocks

    @classmethod
    def build(cls, n_layers: int, d_hidden: int, kernel_size: int, direction: str,
              groups: int, dropout: float, rng: np.random.Generator) -> "TemporalStack":
        return cls([
            TemporalBlock(d_hidden, kernel_size, i, direction, groups, dropout, rng)
            for i in range(1, n_layers + 1)
        ])

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        """Thread the hidden state through every block; return the sum of skip outputs."""
        total = None
        h = x
        for block in self.blocks:
            h, o = block(h, training, rng)
            total = o if total is None else tn.add(total, o)
        return total

    @property
    def direction(self) -> str:
        return self.blocks[0].conv.spec.direction

    def named_parameters(self, prefix: str):
        for i, block in enumerate(self.blocks):
            yield from block.named_parameters(f"{prefix}.{i}")


@dataclass
class CovariateCache:
    """Covariate-side activations, reusable across autoregressive decoding steps."""

    emb: Tensor | None
    o_cov: Tensor | None


class BiTCN:
    def __init__(self, hp: HyperParams, dims: InputDims, rng: np.random.Generator | None = None):
        rng = np.random.default_rng(0) if rng is None else rng
        self.hp = hp
        self.dims = dims
        d_h = hp.d_hidden
        self.embeddings = [
            Tensor(rng.normal(0.0, 0.01, size=(card, dim)), requires_grad=True)
            for card, dim in zip(dims.cardinalities, dims.embedding_dims)
        ]
        d_lag_in = dims.d_lag + dims.d_cov + dims.d_emb
        d_cov_in = dims.d_cov + dims.d_emb
        self.proj_lag = Dense(d_lag_in, d_h, rng)
        self.backward_stack = TemporalStack.build(
            hp.n_layers, d_h, hp.kernel_size, "backward", 1, hp.dropout, rng)
        if hp.forward_module:
            if d_cov_in == 0:
                raise ValueError("the forward module needs at least one covariate or categorical input")
            self.proj_cov = Dense(d_cov_in, d_h, rng)
            self.forward_stack = TemporalStack.build(
                hp.forward_layers, d_h, hp.kernel_size, "forward", hp.groups, hp.dropout, rng)
        else:
            self.proj_cov = None
            self.forward_stack = None
        d_out = 2 * d_h if hp.forward_module and hp.join == "concat" else d_h
        self.head_mu = Dense(d_out, 1, rng)
        self.head_sigma = Dense(d_out, 1, rng)

    # -- parameters ------------------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, table in enumerate(self.embeddings):
            yield f"embed.{i}", table
        yield from self.proj_lag.named_parameters("proj_lag")
        if self.proj_cov is not None:
            yield from self.proj_cov.named_parameters("proj_cov")
        yield from self.backward_stack.named_parameters("backward")
        if self.forward_stack is not None:
            yield from self.forward_stack.named_parameters("forward")
        yield from self.head_mu.named_parameters("head_mu")
        yield from self.head_sigma.named_parameters("head_sigma")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        tn.zero_grads(self.parameters())

    # -- forward -----------------------------------------------------------------

    def _embed(self, a_cat: np.ndarray) -> Tensor | None:
        if not self.embeddings:
            return None
        if a_cat.shape[-1] != len(self.embeddings):
            raise ShapeError(f"expected {len(self.embeddings)} categorical columns, got {a_cat.shape[-1]}")
        parts = [tn.embedding(a_cat[..., c], table) for c, table in enumerate(self.embeddings)]
        return tn.concat_channels(*parts)

    def encode_covariates(self, a_cov, a_cat, training: bool = False, rng=None) -> CovariateCache:
        """Embeddings and forward-stack output over the full covariate window."""
        a_cat = np.asarray(a_cat)
        emb = self._embed(a_cat)
        if self.forward_stack is None:
            return CovariateCache(emb, None)
        parts = [tn.as_tensor(a_cov)] if self.dims.d_cov else []
        if emb is not None:
            parts.append(emb)
        h_cov = tn.dropout(self.proj_cov(tn.concat_channels(*parts)), self.hp.dropout, training, rng)
        return CovariateCache(emb, self.forward_stack(h_cov, training, rng))

    def forward(self, y_lag, a_cov, a_cat, training: bool = False, rng=None,
                cache: CovariateCache | None = None) -> tuple[Tensor, Tensor]:
        """Return per-step location and scale, both ``(T, batch, 1)``.

        ``T`` is taken from ``y_lag`` and may be shorter than the modeled
        window; outputs at position t depend on lags at positions <= t only.
        """
        y_lag = tn.as_tensor(y_lag)
        a_cov = np.asarray(a_cov, dtype=np.float64)
        a_cat = np.asarray(a_cat)
        T = y_lag.shape[0]
        if y_lag.ndim != 3 or y_lag.shape[2] != self.dims.d_lag:
            raise ShapeError(f"y_lag must be (T, batch, {self.dims.d_lag}), got {y_lag.shape}")
        if a_cov.ndim != 3 or a_cov.shape[2] != self.dims.d_cov:
            raise ShapeError(f"a_cov must be (T_c, batch, {self.dims.d_cov}), got {a_cov.shape}")
        if a_cov.shape[0] < T:
            raise ShapeError(f"covariate length {a_cov.shape[0]} shorter than target length {T}")
        if a_cat.shape[:2] != a_cov.shape[:2]:
            raise ShapeError(f"a_cat leading dims {a_cat.shape[:2]} != a_cov {a_cov.shape[:2]}")
        if cache is None:
            cache = self.encode_covariates(a_cov, a_cat, training, rng)

        parts = [y_lag]
        if self.dims.d_cov:
            parts.append(Tensor(a_cov[:T]))
        if cache.emb is not None:
            parts.append(tn.slice_time(cache.emb, 0, T))
        h_lag = tn.dropout(self.proj_lag(tn.concat_channels(*parts)), self.hp.dropout, training, rng)
        o = self.backward_stack(h_lag, training, rng)
        if cache.o_cov is not None:
            o_cov = tn.slice_time(cache.o_cov, 0, T)
            o = tn.concat_channels(o_cov, o) if self.hp.join == "concat" else tn.add(o_cov, o)

        mu = self.head_mu(o)
        if self.hp.softplus_mu:
            mu = tn.softplus(mu)
        sigma = tn.add(tn.softplus(self.head_sigma(o)), self.hp.epsilon)
        mu.check_finite("mu head output")
        sigma.check_finite("sigma head output")
        return mu, sigma

    __call__ = forward


def count_parameters(model) -> int:
    """Number of scalar parameters (weight-norm v and g both counted)."""
    return int(sum(p.size for _, p in model.named_parameters()))


def conv_kernel_parameters(stack: TemporalStack) -> int:
    """Number of conv kernel weights (the ``v`` tensors) in a stack."""
    return int(sum(b.conv.v.size for b in stack.blocks))
