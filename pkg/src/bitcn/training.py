"""Adam, gradient clipping, early stopping, the training loop and grid search."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from . import tensor as tn
from .checkpoint import save_checkpoint
from .data import WindowBatch, WindowSet
from .distributions import GAUSSIAN, nll
from .errors import NumericalError
from .model import BiTCN
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

LOSS_RANGES = ("horizon_only", "full_window")
DEFAULT_GAUSSIAN_CLIP = 10.0
RECORD_SCHEMA = "bitcn-run-record/1"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 5
    # "auto": clip at 10 for the Gaussian head, never for t(3); None disables clipping
    grad_clip_norm: float | str | None = "auto"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    loss_range: str = "horizon_only"
    epoch_cap: int | None = None  # training windows sampled per epoch
    eval_cap: int | None = None  # validation windows scored per epoch
    eval_batch_size: int = 256

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ValueError("batch sizes must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.loss_range not in LOSS_RANGES:
            raise ValueError(f"loss_range must be one of {LOSS_RANGES}")
        if isinstance(self.grad_clip_norm, str) and self.grad_clip_norm != "auto":
            raise ValueError("grad_clip_norm must be 'auto', None or a positive number")
        if isinstance(self.grad_clip_norm, (int, float)) and not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be positive")
        self.seeds = tuple(int(s) for s in self.seeds)
        for cap in (self.epoch_cap, self.eval_cap):
            if cap is not None and cap < 1:
                raise ValueError("window caps must be positive")

    def clip_norm_for(self, family: str) -> float | None:
        if self.grad_clip_norm == "auto":
            return DEFAULT_GAUSSIAN_CLIP if family == GAUSSIAN else None
        return None if self.grad_clip_norm is None else float(self.grad_clip_norm)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# -- optimizer ------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float,
              grads: Mapping[str, np.ndarray] | None = None) -> None:
    """One bias-corrected Adam update, in place. Missing gradients count as zero."""
    gs = {}
    for name, p in params.items():
        g = grads[name] if grads is not None else p.grad
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}; step {state.step + 1} aborted")
        gs[name] = g
    state.step += 1
    b1, b2, t = state.beta1, state.beta2, state.step
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    for name, p in params.items():
        g = gs[name]
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def global_grad_norm(params: Iterable[Tensor]) -> float:
    return math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    if not max_norm > 0:
        raise ValueError("max_norm must be positive")
    norm = global_grad_norm(params)
    if norm <= max_norm:
        return 1.0
    scaling = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad = p.grad * scaling
    return scaling


# -- early stopping ----------------------------------------------------------------------


class EarlyStopping:
    """Stop once the monitored loss has not strictly improved for ``patience`` epochs."""

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.best_loss = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, loss: float) -> bool:
        """Record ``loss`` for ``epoch``; True when training should stop."""
        if loss < self.best_loss:
            self.best_loss, self.best_epoch, self.bad_epochs = loss, epoch, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


# -- run records -----------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_nll: float
    val_nll: float
    seconds: float
    clipped_steps: int = 0


@dataclass
class RunRecord:
    seed: int
    config: dict
    epochs: list[EpochRecord] = field(default_factory=list)
    initial_train_nll: float = math.nan
    best_epoch: int = 0
    best_val_nll: float = math.inf
    stop_epoch: int = 0
    stopped_early: bool = False
    checkpoint: str = ""
    version: str = __version__

    @property
    def train_losses(self) -> list[float]:
        return [e.train_nll for e in self.epochs]

    @property
    def val_losses(self) -> list[float]:
        return [e.val_nll for e in self.epochs]

    def to_text(self, timings: bool = True) -> str:
        """Line-oriented serialization; ``timings=False`` drops wall-clock fields."""
        lines = [f"schema = {RECORD_SCHEMA}", f"version = {self.version}", f"seed = {self.seed}",
                 f"config = {json.dumps(self.config, sort_keys=True)}", "[epochs]"]
        for e in self.epochs:
            line = f"epoch={e.epoch} train_nll={e.train_nll!r} val_nll={e.val_nll!r} clipped={e.clipped_steps}"
            lines.append(line + (f" seconds={e.seconds!r}" if timings else ""))
        lines += [
            "[summary]",
            f"initial_train_nll = {self.initial_train_nll!r}",
            f"best_epoch = {self.best_epoch}",
            f"best_val_nll = {self.best_val_nll!r}",
            f"stop_epoch = {self.stop_epoch}",
            f"stopped_early = {int(self.stopped_early)}",
            f"checkpoint = {self.checkpoint}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RunRecord":
        head, summary, epochs = {}, {}, []
        section = None
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if line in ("[epochs]", "[summary]"):
                section = line
                continue
            if section == "[epochs]":
                kv = dict(item.split("=", 1) for item in line.split())
                epochs.append(EpochRecord(int(kv["epoch"]), float(kv["train_nll"]), float(kv["val_nll"]),
                                          float(kv.get("seconds", "nan")), int(kv.get("clipped", 0))))
            else:
                key, _, value = line.partition(" = ")
                (summary if section else head)[key] = value
        if head.get("schema") != RECORD_SCHEMA:
            raise ValueError(f"unsupported run record schema {head.get('schema')!r}")
        return cls(
            seed=int(head["seed"]),
            config=json.loads(head["config"]),
            epochs=epochs,
            initial_train_nll=float(summary["initial_train_nll"]),
            best_epoch=int(summary["best_epoch"]),
            best_val_nll=float(summary["best_val_nll"]),
            stop_epoch=int(summary["stop_epoch"]),
            stopped_early=bool(int(summary["stopped_early"])),
            checkpoint=summary.get("checkpoint", ""),
            version=head.get("version", ""),
        )


# -- loss ---------------------------------------------------------------------------------------


def seed_streams(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for parameter initialization and for training."""
    return np.random.default_rng([seed, 0]), np.random.default_rng([seed, 1])


def batch_loss(model: BiTCN, batch: WindowBatch, loss_range: str = "horizon_only",
               training: bool = False, rng=None) -> Tensor:
    mu, sigma = model(batch.y_lag, batch.a_cov, batch.a_cat, training=training, rng=rng)
    start = batch.t0 if loss_range == "horizon_only" else 0
    T = batch.y_true.shape[0]
    y = Tensor(batch.y_true[start:])
    return nll(model.hp.distribution, y, tn.slice_time(mu, start, T - start), tn.slice_time(sigma, start, T - start))


def spread_indices(n: int, cap: int | None) -> np.ndarray:
    """All of ``range(n)``, or ``cap`` evenly spaced members of it."""
    if cap is None or cap >= n:
        return np.arange(n)
    return np.unique(np.linspace(0, n - 1, cap).round().astype(np.int64))


def evaluate_nll(model: BiTCN, windows: WindowSet, batch_size: int = 256, cap: int | None = None,
                 loss_range: str = "horizon_only") -> float:
    """Mean NLL over (a spread subset of) ``windows`` with dropout off."""
    idx = spread_indices(len(windows), cap)
    if idx.size == 0:
        raise ValueError("no windows to evaluate")
    total = 0.0
    with no_grad():
        for i in range(0, idx.size, batch_size):
            sel = idx[i:i + batch_size]
            total += batch_loss(model, windows.batch(sel), loss_range).item() * sel.size
    value = total / idx.size
    if not math.isfinite(value):
        raise NumericalError(f"non-finite evaluation NLL {value}")
    return value


def train(model: BiTCN, data: Mapping[str, WindowSet], config: TrainConfig, rng: np.random.Generator,
          *, seed: int = 0, checkpoint_path=None, extra_config: dict | None = None) -> RunRecord:
    """Fit ``model`` on ``data['train']`` with early stopping on ``data['validation']``.

    The parameters of the best validation epoch are restored before return.
    """
    train_ws, val_ws = data["train"], data["validation"]
    if len(train_ws) == 0 or len(val_ws) == 0:
        raise ValueError("training needs non-empty train and validation windows")
    clip = config.clip_norm_for(model.hp.distribution)
    echo = {"train": config.to_dict(), "model": model.hp.to_dict(), "inputs": model.dims.to_dict(),
            **(extra_config or {})}
    record = RunRecord(seed=seed, config=echo, checkpoint=str(checkpoint_path or ""))
    params = dict(model.named_parameters())
    plist = list(params.values())
    state = AdamState()
    stopper = EarlyStopping(config.patience)
    best_state = model.state_dict()

    record.initial_train_nll = evaluate_nll(model, train_ws, config.eval_batch_size,
                                            config.eval_cap, config.loss_range)
    for epoch in range(1, config.max_epochs + 1):
        t_start = time.perf_counter()
        total, count, clipped = 0.0, 0, 0
        for bi, batch in enumerate(train_ws.batches(config.batch_size, rng, config.epoch_cap)):
            try:
                model.zero_grad()
                loss = batch_loss(model, batch, config.loss_range, training=True, rng=rng)
                if not math.isfinite(loss.item()):
                    raise NumericalError(f"non-finite training loss {loss.item()}")
                loss.backward()
                if clip is not None and clip_gradients(plist, clip) < 1.0:
                    clipped += 1
                adam_step(params, state, config.learning_rate)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, batch {bi}: {exc}") from exc
            total += loss.item() * len(batch)
            count += len(batch)
        try:
            val = evaluate_nll(model, val_ws, config.eval_batch_size, config.eval_cap, config.loss_range)
        except NumericalError as exc:
            raise NumericalError(f"epoch {epoch}, validation: {exc}") from exc
        record.epochs.append(EpochRecord(epoch, total / count, val, time.perf_counter() - t_start, clipped))
        log.info("epoch %d train_nll %.6f val_nll %.6f", epoch, total / count, val)
        stop = stopper.update(epoch, val)
        if stopper.best_epoch == epoch:
            best_state = model.state_dict()
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, model, epoch=epoch, rng=rng, optimizer=state,
                                extra={"seed": seed, "val_nll": repr(val),
                                       "config": json.dumps(echo, sort_keys=True)})
        if stop:
            record.stopped_early = True
            break

    model.load_state_dict(best_state)
    record.best_epoch = stopper.best_epoch
    record.best_val_nll = stopper.best_loss
    record.stop_epoch = record.epochs[-1].epoch
    return record


# -- grid search --------------------------------------------------------------------------------

GRID_LRS = (1e-3, 5e-4, 1e-4)
GRID_BATCH_SIZES = (128, 256, 512)


@dataclass
class GridResult:
    best: tuple[float, int]
    best_config: TrainConfig
    records: dict[tuple[float, int], list[RunRecord]]
    means: dict[tuple[float, int], float]
    failures: dict[tuple[float, int], str]

    @property
    def best_records(self) -> list[RunRecord]:
        return self.records[self.best]


def grid_search(model_factory: Callable[[np.random.Generator], BiTCN], data: Mapping[str, WindowSet],
                base: TrainConfig, lrs: Sequence[float] = GRID_LRS,
                batch_sizes: Sequence[int] = GRID_BATCH_SIZES, seeds: Sequence[int] | None = None) -> GridResult:
    """Train every (learning rate, batch size) cell and pick the lowest mean best-validation NLL.

    A cell with any numeric failure is excluded and reported. Ties go to the
    smaller learning rate, then the smaller batch size.
    """
    if not lrs or not batch_sizes:
        raise ValueError("grid needs at least one learning rate and one batch size")
    seeds = tuple(base.seeds if seeds is None else seeds)
    records, means, failures = {}, {}, {}
    for lr in lrs:
        for bs in batch_sizes:
            cell = (float(lr), int(bs))
            cfg = TrainConfig.from_dict({**base.to_dict(), "learning_rate": lr, "batch_size": bs, "seeds": seeds})
            runs = []
            try:
                for seed in seeds:
                    init_rng, train_rng = seed_streams(seed)
                    runs.append(train(model_factory(init_rng), data, cfg, train_rng, seed=seed))
            except (NumericalError, FloatingPointError) as exc:
                failures[cell] = str(exc)
                log.warning("grid cell lr=%g batch=%d failed: %s", lr, bs, exc)
                continue
            records[cell] = runs
            means[cell] = float(np.mean([r.best_val_nll for r in runs]))
    if not means:
        raise NumericalError(f"every grid cell failed: {failures}")
    best = min(means, key=lambda c: (means[c], c[0], c[1]))
    best_cfg = TrainConfig.from_dict({**base.to_dict(), "learning_rate": best[0], "batch_size": best[1],
                                      "seeds": seeds})
    return GridResult(best, best_cfg, records, means, failures)
