"""Forecast decoding, point and quantile metrics, the seasonal-naive baseline and reports."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import __version__
from .data import WindowSet
from .distributions import standard_quantile
from .errors import DataError
from .model import BiTCN
from .tensor import Tensor, no_grad

QUANTILES = tuple(round(0.1 * k, 1) for k in range(1, 10))
REPORT_SCHEMA = "bitcn-metrics/1"
METRIC_KEYS = ("smape", "nrmse", "q10", "q50", "q90", "mq")


# -- metrics ----------------------------------------------------------------------------


def _as_rows(actual, forecast) -> tuple[np.ndarray, np.ndarray]:
    y = np.atleast_2d(np.asarray(actual, dtype=np.float64))
    f = np.atleast_2d(np.asarray(forecast, dtype=np.float64))
    if y.shape != f.shape:
        raise ValueError(f"actual {y.shape} and forecast {f.shape} differ in shape")
    if y.size == 0:
        raise ValueError("empty series")
    return y, f


def smape(actual, forecast) -> float:
    """Symmetric MAPE in [0, 2]; rows are series, averaged after per-series means."""
    y, f = _as_rows(actual, forecast)
    num = 2.0 * np.abs(y - f)
    den = np.abs(y) + np.abs(f)
    terms = np.divide(num, den, out=np.zeros_like(num), where=den > 0)
    return float(terms.mean(axis=1).mean())


def nrmse(actual, forecast, literal: bool = False) -> float:
    """Per-series RMSE over mean |actual| (1 if all actuals are zero), averaged over series.

    ``literal=True`` divides by the horizon sum of |actual| instead.
    """
    y, f = _as_rows(actual, forecast)
    rmse = np.sqrt(np.mean((y - f) ** 2, axis=1))
    den = np.abs(y).sum(axis=1) if literal else np.abs(y).mean(axis=1)
    den = np.where(np.all(y == 0, axis=1), 1.0, den)
    return float(np.mean(rmse / den))


def quantile_numerator(actual, forecast_q, p: float) -> float:
    y, f = _as_rows(actual, forecast_q)
    return float(np.sum(2.0 * np.abs((y - f) * ((y <= f).astype(np.float64) - p))))


def quantile_loss(actual, forecast_q, p: float, normalize: bool = True) -> float:
    """Normalized quantile loss pooled over every series and step."""
    if not 0.0 < p < 1.0:
        raise ValueError("p must lie in (0, 1)")
    num = quantile_numerator(actual, forecast_q, p)
    if not normalize:
        return num
    den = float(np.sum(actual))
    if den <= 0:
        raise DataError(f"quantile loss normalizer sum(y) = {den} is not positive; use normalize=False")
    return num / den


def mean_quantile(losses: Mapping[float, float]) -> float:
    """Arithmetic mean of Q(0.1) ... Q(0.9)."""
    keyed = {round(float(p), 1): v for p, v in losses.items()}
    missing = [p for p in QUANTILES if p not in keyed]
    if missing:
        raise ValueError(f"missing quantile levels {missing}")
    return float(math.fsum(keyed[p] for p in QUANTILES) / len(QUANTILES))


# -- forecasts ----------------------------------------------------------------------------------


@dataclass
class ForecastResult:
    """Forecasts in the original target space; arrays are (window, [level,] step)."""

    actual: np.ndarray
    median: np.ndarray
    quantiles: np.ndarray  # (n, 9, horizon), nondecreasing along the level axis
    series_ids: list[str] = field(default_factory=list)
    levels: tuple[float, ...] = QUANTILES

    def quantile(self, p: float) -> np.ndarray:
        return self.quantiles[:, self.levels.index(round(p, 1))]

    def metrics(self, nrmse_literal: bool = False) -> dict[str, float]:
        qs = {p: quantile_loss(self.actual, self.quantile(p), p) for p in self.levels}
        return {
            "smape": smape(self.actual, self.median),
            "nrmse": nrmse(self.actual, self.median, nrmse_literal),
            "q10": qs[0.1],
            "q50": qs[0.5],
            "q90": qs[0.9],
            "mq": mean_quantile(qs),
        }

    @classmethod
    def concat(cls, parts: Sequence["ForecastResult"]) -> "ForecastResult":
        return cls(np.concatenate([p.actual for p in parts]), np.concatenate([p.median for p in parts]),
                   np.concatenate([p.quantiles for p in parts]), [s for p in parts for s in p.series_ids])


def seasonal_naive(history, period: int, horizon: int) -> ForecastResult:
    """Repeat the last observed period; every quantile equals the point forecast."""
    h = np.atleast_2d(np.asarray(history, dtype=np.float64))
    if period < 1 or h.shape[1] < period:
        raise ValueError(f"history of length {h.shape[1]} is shorter than the period {period}")
    last = h[:, h.shape[1] - period:]
    point = np.stack([last[:, (i % period)] for i in range(horizon)], axis=1)
    return ForecastResult(np.full_like(point, np.nan), point, np.repeat(point[:, None], len(QUANTILES), axis=1))


def seasonal_naive_windows(windows: WindowSet, period: int, idx=None) -> ForecastResult:
    idx = np.arange(len(windows)) if idx is None else np.asarray(idx)
    y = windows.raw_targets(idx)
    t0 = windows.cfg.t0
    res = seasonal_naive(y[:, :t0], period, windows.cfg.horizon)
    res.actual = y[:, t0:]
    res.series_ids = [windows.series_ids[windows.series_index[i]] for i in idx]
    return res


def _decode_batch(model: BiTCN, batch, draws: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Recursive decoding in scaled space.

    ``draws`` is ``None`` for median feedback, or standard-quantile noise of
    shape ``(horizon, b)`` for sampled paths. Returns ``(mu, sigma)`` arrays of
    shape ``(horizon, b)``.
    """
    t0, H = batch.t0, batch.horizon
    lag = batch.y_lag[: t0 + H].copy()
    mus, sigmas = np.empty((H, lag.shape[1])), np.empty((H, lag.shape[1]))
    with no_grad():
        cache = model.encode_covariates(batch.a_cov, batch.a_cat)
        for h in range(H):
            pos = t0 + h
            mu, sigma = model(Tensor(lag[: pos + 1]), batch.a_cov, batch.a_cat, cache=cache)
            mus[h], sigmas[h] = mu.data[pos, :, 0], sigma.data[pos, :, 0]
            if h + 1 < H:
                nxt = mus[h] if draws is None else mus[h] + sigmas[h] * draws[h]
                lag[pos + 1, :, 0] = nxt
    return mus, sigmas


def decode_forecast(model: BiTCN, windows: WindowSet, idx=None, mode: str = "monte_carlo",
                    samples: int = 100, seed: int = 0, batch_size: int = 256) -> ForecastResult:
    """Autoregressive forecasts for the given windows.

    analytic: the previous step's median feeds the next lag; quantiles come
    from the per-step location and scale. monte_carlo: ``samples`` sampled
    paths per window, each window drawing from its own stream keyed by
    (seed, series, start), with empirical per-step quantiles.
    """
    if mode not in ("analytic", "monte_carlo"):
        raise ValueError("mode must be 'analytic' or 'monte_carlo'")
    if mode == "monte_carlo" and samples < 10:
        raise ValueError("monte_carlo decoding needs at least 10 samples")
    idx = np.arange(len(windows)) if idx is None else np.asarray(idx, dtype=np.int64)
    cfg, family = windows.cfg, model.hp.distribution
    H, t0 = cfg.horizon, cfg.t0
    zq = np.asarray([standard_quantile(family, p) for p in QUANTILES])
    parts = []
    step = batch_size if mode == "analytic" else max(1, batch_size // samples)
    for i in range(0, idx.size, step):
        sel = idx[i:i + step]
        batch = windows.batch(sel)
        if mode == "analytic":
            mu, sigma = _decode_batch(model, batch, None)
            q = mu.T[:, None, :] + sigma.T[:, None, :] * zq[None, :, None]  # (b, 9, H)
            med = mu.T
        else:
            u = np.stack([
                np.random.default_rng([seed, int(windows.series_index[w]), int(windows.start[w])]).random((H, samples))
                for w in sel
            ], axis=1)  # (H, b, S)
            u = np.clip(u, 1e-12, 1.0 - 1e-12)
            draws = standard_quantile(family, u).reshape(H, -1)
            rep = _repeat_batch(batch, samples)
            mu, sigma = _decode_batch(model, rep, draws)
            paths = (mu + sigma * draws).reshape(H, len(sel), samples)
            q = np.quantile(paths, QUANTILES, axis=2).transpose(2, 0, 1)  # (b, 9, H)
            med = np.quantile(paths, 0.5, axis=2).T
        q = np.sort(q, axis=1)
        parts.append(ForecastResult(
            actual=windows.raw_targets(sel)[:, t0:],
            median=windows.to_original(med, sel),
            quantiles=windows.to_original(q, sel),
            series_ids=[windows.series_ids[windows.series_index[w]] for w in sel],
        ))
    return ForecastResult.concat(parts)


def _repeat_batch(batch, samples: int):
    """Each window repeated ``samples`` times along the batch axis (window-major)."""
    rep = lambda a: np.repeat(a, samples, axis=1)  # noqa: E731
    return replace(batch, y_lag=rep(batch.y_lag), y_true=rep(batch.y_true), a_cov=rep(batch.a_cov),
                   a_cat=rep(batch.a_cat), scale=np.repeat(batch.scale, samples),
                   index=np.repeat(batch.index, samples))


# -- reports --------------------------------------------------------------------------------------


@dataclass
class MetricsReport:
    per_seed: dict[int, dict[str, float]]
    parameters: int
    config: dict
    expected_seeds: tuple[int, ...] = ()
    version: str = __version__
    baseline: dict[str, float] | None = None  # seasonal-naive metrics on the same windows

    @property
    def missing_seeds(self) -> list[int]:
        return [s for s in self.expected_seeds if s not in self.per_seed]

    @property
    def partial(self) -> bool:
        return bool(self.missing_seeds)

    def mean(self, key: str) -> float:
        return float(np.mean([m[key] for m in self.per_seed.values()]))

    def std(self, key: str) -> float:
        return float(np.std([m[key] for m in self.per_seed.values()]))

    def to_text(self) -> str:
        lines = [f"schema = {REPORT_SCHEMA}", f"version = {self.version}",
                 f"parameters = {self.parameters}", f"config = {json.dumps(self.config, sort_keys=True)}",
                 f"seeds = {' '.join(str(s) for s in sorted(self.per_seed))}",
                 f"expected_seeds = {' '.join(str(s) for s in self.expected_seeds)}",
                 f"partial = {int(self.partial)}"]
        for seed in sorted(self.per_seed):
            for key in METRIC_KEYS:
                lines.append(f"seed.{seed}.{key} = {self.per_seed[seed][key]!r}")
        if self.per_seed:
            for key in METRIC_KEYS:
                lines.append(f"mean.{key} = {self.mean(key)!r}")
                lines.append(f"std.{key} = {self.std(key)!r}")
        if self.baseline:
            for key in METRIC_KEYS:
                lines.append(f"baseline.{key} = {self.baseline[key]!r}")
        return "\n".join(lines) + "\n"


def emit_report(report: MetricsReport, path, plot_data: ForecastResult | None = None,
                epoch_curves: Mapping[int, Sequence[tuple[int, float, float]]] | None = None) -> list[Path]:
    """Write the key/value report and, when given, the plot-data CSV files beside it."""
    path = Path(path)
    try:
        path.write_text(report.to_text(), encoding="utf-8")
        written = [path]
        if plot_data is not None:
            fan = path.with_suffix(".fan.csv")
            with open(fan, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["window", "series_id", "step", "actual", "median", "q10", "q90"])
                for i in range(plot_data.actual.shape[0]):
                    sid = plot_data.series_ids[i] if plot_data.series_ids else ""
                    for h in range(plot_data.actual.shape[1]):
                        w.writerow([i, sid, h + 1, repr(float(plot_data.actual[i, h])),
                                    repr(float(plot_data.median[i, h])), repr(float(plot_data.quantile(0.1)[i, h])),
                                    repr(float(plot_data.quantile(0.9)[i, h]))])
            written.append(fan)
        if epoch_curves:
            curves = path.with_suffix(".curves.csv")
            with open(curves, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["seed", "epoch", "train_nll", "val_nll"])
                for seed in sorted(epoch_curves):
                    for epoch, tr, va in epoch_curves[seed]:
                        w.writerow([seed, epoch, repr(tr), repr(va)])
            written.append(curves)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc
    return written


def read_report(path) -> MetricsReport:
    kv = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            key, _, value = line.partition(" = ")
            kv[key] = value
    if kv.get("schema") != REPORT_SCHEMA:
        raise ValueError(f"unsupported report schema {kv.get('schema')!r}")
    seeds = [int(s) for s in kv.get("seeds", "").split()]
    per_seed = {s: {k: float(kv[f"seed.{s}.{k}"]) for k in METRIC_KEYS} for s in seeds}
    baseline = {k: float(kv[f"baseline.{k}"]) for k in METRIC_KEYS} if "baseline.mq" in kv else None
    return MetricsReport(per_seed, int(kv["parameters"]), json.loads(kv["config"]),
                         tuple(int(s) for s in kv.get("expected_seeds", "").split()), kv.get("version", ""),
                         baseline)
