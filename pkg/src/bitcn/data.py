"""Series tables, covariate construction, mean scaling and sliding windows."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterator

import numpy as np

from .errors import DataError

log = logging.getLogger(__name__)

FREQS = {"hour": np.timedelta64(1, "h"), "day": np.timedelta64(1, "D")}
CALENDAR_FEATURES = ("hour", "dayofweek", "dayofmonth", "month", "weekofyear")
SPLITS = ("train", "validation", "test")


# -- covariate primitives ---------------------------------------------------------


def fourier_features(value, period):
    """``(sin(value 2 pi / period), cos(value 2 pi / period))``; arrays broadcast."""
    if np.any(np.asarray(period) < 1):
        raise ValueError("period must be >= 1")
    angle = np.asarray(value, dtype=np.float64) * (2.0 * math.pi / np.asarray(period, dtype=np.float64))
    return np.sin(angle), np.cos(angle)


def calendar_value(ts: np.ndarray, feature: str) -> np.ndarray:
    """Integer calendar index of each ``datetime64`` timestamp (Monday = 0)."""
    ts = np.asarray(ts, dtype="datetime64[s]")
    days = ts.astype("datetime64[D]")
    if feature == "hour":
        return (ts.astype("datetime64[h]") - days).astype(np.int64)
    if feature == "dayofweek":
        return (days.astype(np.int64) + 3) % 7
    if feature == "dayofmonth":
        return (days - days.astype("datetime64[M]")).astype(np.int64)
    if feature == "month":
        return ts.astype("datetime64[M]").astype(np.int64) % 12
    if feature == "weekofyear":
        return (days - days.astype("datetime64[Y]")).astype(np.int64) // 7
    raise ValueError(f"unknown calendar feature {feature!r}")


def mean_scale(history) -> float:
    """DeepAR-style scale ``1 + mean(history)``."""
    history = np.asarray(history, dtype=np.float64)
    if history.size < 1:
        raise ValueError("mean_scale needs a non-empty history")
    scale = 1.0 + float(history.mean())
    if not scale > 0.0:
        raise DataError(f"non-positive scale {scale:.6g} from a negative-mean history")
    return scale


# -- tables -------------------------------------------------------------------------


@dataclass
class Series:
    series_id: str
    timestamps: np.ndarray  # datetime64[s], strictly increasing at the table frequency
    target: np.ndarray
    covariates: np.ndarray  # (n, d_cov) known-in-advance numeric columns
    categoricals: np.ndarray  # (n, n_cat) integer codes of the extra categorical columns

    def __len__(self) -> int:
        return len(self.target)


@dataclass
class SeriesTable:
    series: list[Series]
    freq: str = "hour"
    covariate_names: tuple[str, ...] = ()
    categorical_names: tuple[str, ...] = ()
    vocabularies: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        if self.freq not in FREQS:
            raise DataError(f"unsupported frequency {self.freq!r}")
        if "series_id" not in self.vocabularies:
            self.vocabularies["series_id"] = [s.series_id for s in self.series]

    @property
    def step(self) -> np.timedelta64:
        return FREQS[self.freq]

    def series_code(self, series_id: str) -> int:
        vocab = self.vocabularies["series_id"]
        return vocab.index(series_id) if series_id in vocab else -1

    def time_range(self) -> tuple[np.datetime64, np.datetime64]:
        return (min(s.timestamps[0] for s in self.series), max(s.timestamps[-1] for s in self.series))


# -- CSV ingestion --------------------------------------------------------------------


@dataclass
class CsvSchema:
    series_col: str = "series_id"
    time_col: str = "timestamp"
    target_col: str = "target"
    numeric: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()
    freq: str = "hour"


def _parse_time(text: str) -> np.datetime64:
    dt = datetime.fromisoformat(text.strip())
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(dt, "s")


def ingest_csv(path, schema: CsvSchema | None = None, vocab_until=None) -> SeriesTable:
    """Read a long-format CSV (one row per series and timestamp).

    Rows may arrive in any order; each series is stably sorted by time and
    must then step at exactly the schema frequency. Categorical vocabularies
    (series ids included) are built from rows strictly before
    ``vocab_until`` when it is given; codes outside the vocabulary are -1
    and fail at embedding lookup.
    """
    schema = schema or CsvSchema()
    if schema.freq not in FREQS:
        raise DataError(f"unsupported frequency {schema.freq!r}")
    required = [schema.series_col, schema.time_col, schema.target_col, *schema.numeric, *schema.categorical]
    rows: dict[str, list] = {}
    seen: dict[tuple[str, np.datetime64], int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file")
        missing = [c for c in required if c not in reader.fieldnames]
        if missing:
            raise DataError(f"{path}: header lacks columns {missing}")
        for row in reader:
            line = reader.line_num
            if None in row or any(row.get(c) is None for c in required):
                raise DataError(f"{path}:{line}: wrong number of fields")
            try:
                ts = _parse_time(row[schema.time_col])
                target = float(row[schema.target_col])
                numeric = [float(row[c]) for c in schema.numeric]
            except ValueError as exc:
                raise DataError(f"{path}:{line}: {exc}") from None
            sid = row[schema.series_col]
            key = (sid, ts)
            if key in seen:
                raise DataError(f"{path}:{line}: duplicate timestamp {ts} for series {sid!r} (first on line {seen[key]})")
            seen[key] = line
            rows.setdefault(sid, []).append((ts, target, numeric, [row[c] for c in schema.categorical], line))

    if not rows:
        raise DataError(f"{path}: no data rows")
    cutoff = None if vocab_until is None else np.datetime64(vocab_until, "s")
    keep = (lambda ts: True) if cutoff is None else (lambda ts: ts < cutoff)
    vocabularies = {"series_id": sorted(sid for sid, rs in rows.items() if any(keep(r[0]) for r in rs))}
    for j, name in enumerate(schema.categorical):
        vocabularies[name] = sorted({r[3][j] for rs in rows.values() for r in rs if keep(r[0])})

    step = FREQS[schema.freq]
    series = []
    for sid in sorted(rows):
        rs = sorted(rows[sid], key=lambda r: r[0])
        ts = np.array([r[0] for r in rs], dtype="datetime64[s]")
        gaps = np.nonzero(np.diff(ts) != step)[0]
        if gaps.size:
            i = gaps[0]
            raise DataError(f"{path}:{rs[i + 1][4]}: series {sid!r} jumps from {ts[i]} to {ts[i + 1]} "
                            f"(expected one {schema.freq} step)")
        codes = np.array(
            [[vocabularies[name].index(r[3][j]) if r[3][j] in vocabularies[name] else -1
              for j, name in enumerate(schema.categorical)] for r in rs],
            dtype=np.int64,
        ).reshape(len(rs), len(schema.categorical))
        series.append(Series(
            series_id=sid,
            timestamps=ts,
            target=np.array([r[1] for r in rs]),
            covariates=np.array([r[2] for r in rs], dtype=np.float64).reshape(len(rs), len(schema.numeric)),
            categoricals=codes,
        ))
    return SeriesTable(series, schema.freq, tuple(schema.numeric), tuple(schema.categorical), vocabularies)


def write_csv(table: SeriesTable, path) -> None:
    """Write ``table`` in the long format read by :func:`ingest_csv`."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series_id", "timestamp", "target", *table.covariate_names, *table.categorical_names])
        for s in table.series:
            for i in range(len(s)):
                cats = [table.vocabularies[n][c] for n, c in zip(table.categorical_names, s.categoricals[i])]
                w.writerow([s.series_id, str(s.timestamps[i]), repr(float(s.target[i])),
                            *(repr(float(v)) for v in s.covariates[i]), *cats])


# -- synthetic data ---------------------------------------------------------------------

SYNTH_START = np.datetime64("2021-01-04T00:00:00", "s")  # a Monday


def synth_generate(kind: str, n_series: int, length: int, seed: int, **params) -> SeriesTable:
    """Desk-scale hourly datasets.

    seasonal:      y = a (level + 1 + sin(2 pi t / 24)) + a noise N(0, 1)
    heavy_tailed:  y = a (level + 0.5 sin(2 pi t / 24)) + a tail_scale t3-noise
    future_driven: y = a (level + 0.3 sin(2 pi t / 24)) + a noise N(0, 1) + beta a promo[t + lead]
                   with promo an i.i.d. Bernoulli covariate known in advance
    """
    rng = np.random.default_rng(seed)
    t = np.arange(length)
    daily = np.sin(2.0 * math.pi * t / 24.0)
    amps = rng.uniform(1.0, 10.0, size=n_series)
    series = []
    names: tuple[str, ...] = ()
    for i, a in enumerate(amps):
        if kind == "seasonal":
            level, noise = params.get("level", 0.5), params.get("noise", 0.03)
            y = a * (level + 1.0 + daily) + a * noise * rng.standard_normal(length)
            cov = np.zeros((length, 0))
        elif kind == "heavy_tailed":
            level, scale = params.get("level", 5.0), params.get("tail_scale", 0.5)
            y = a * (level + 0.5 * daily) + a * scale * rng.standard_t(3, size=length)
            cov = np.zeros((length, 0))
        elif kind == "future_driven":
            level, noise = params.get("level", 2.0), params.get("noise", 0.05)
            beta, lead, rate = params.get("beta", 2.0), int(params.get("lead", 4)), params.get("promo_rate", 0.3)
            promo = (rng.random(length + lead) < rate).astype(np.float64)
            y = a * (level + 0.3 * daily) + a * noise * rng.standard_normal(length) + beta * a * promo[lead:]
            cov = promo[:length, None]
            names = ("promo",)
        else:
            raise ValueError(f"unknown synthetic kind {kind!r}")
        series.append(Series(f"s{i:03d}", SYNTH_START + t.astype("timedelta64[h]"), y, cov,
                             np.zeros((length, 0), dtype=np.int64)))
    return SeriesTable(series, "hour", names, ())


# -- windows ------------------------------------------------------------------------------


@dataclass
class DatasetConfig:
    t0: int = 168
    horizon: int = 24
    t_cov: int = 500
    fourier: tuple[tuple[str, int], ...] = (("hour", 24), ("dayofweek", 7))
    log_transform: bool = False
    mean_scaling: bool = True
    embedding_dim: int = 20
    train_frac: float = 0.8
    val_frac: float = 0.1
    stride: int = 1
    eval_stride: int = 1

    def __post_init__(self):
        if self.t_cov < self.t0 + self.horizon:
            raise ValueError("t_cov must cover t0 + horizon")
        for name, period in self.fourier:
            if name not in CALENDAR_FEATURES:
                raise ValueError(f"unknown calendar feature {name!r}")
            if period < 1:
                raise ValueError("Fourier period must be >= 1")

    @property
    def window(self) -> int:
        return self.t0 + self.horizon


@dataclass
class SplitSpec:
    """Date boundaries; windows are assigned by their forecast start date."""

    train_end: np.datetime64
    val_end: np.datetime64

    @classmethod
    def from_fractions(cls, table: SeriesTable, train: float = 0.8, val: float = 0.1) -> "SplitSpec":
        if not (0 < train and 0 <= val and train + val < 1):
            raise ValueError("split fractions must satisfy 0 < train, 0 <= val, train + val < 1")
        start, end = table.time_range()
        n_steps = int((end - start) // table.step) + 1
        return cls(start + int(round(train * n_steps)) * table.step,
                   start + int(round((train + val) * n_steps)) * table.step)


@dataclass
class WindowBatch:
    y_lag: np.ndarray  # (T, b, 1)
    y_true: np.ndarray  # (T, b, 1)
    a_cov: np.ndarray  # (T_c, b, d_cov)
    a_cat: np.ndarray  # (T_c, b, n_cat)
    scale: np.ndarray  # (b,)
    t0: int
    horizon: int
    index: np.ndarray  # window indices within the owning WindowSet

    def __len__(self) -> int:
        return self.y_lag.shape[1]


@dataclass
class _SeriesArrays:
    y: np.ndarray  # transformed (log1p if configured) target, unscaled
    cov: np.ndarray  # (n + t_cov, d_cov) features, padded past the end
    cat: np.ndarray  # (n + t_cov, n_cat)


class WindowSet:
    """All windows of one split, gathered lazily into time-major batches."""

    def __init__(self, arrays: list[_SeriesArrays], series_index: np.ndarray, start: np.ndarray,
                 forecast_start: np.ndarray, cfg: DatasetConfig, series_ids: list[str]):
        self._arrays = arrays
        self.series_index = series_index
        self.start = start
        self.forecast_start = forecast_start
        self.cfg = cfg
        self.series_ids = series_ids
        self.scale = np.ones(len(start))
        if cfg.mean_scaling:
            for n, (si, s) in enumerate(zip(series_index, start)):
                self.scale[n] = mean_scale(arrays[si].y[s:s + cfg.t0])
        self.skipped = 0

    def __len__(self) -> int:
        return len(self.start)

    @property
    def d_cov(self) -> int:
        return self._arrays[0].cov.shape[1] if self._arrays else 0

    @property
    def n_cat(self) -> int:
        return self._arrays[0].cat.shape[1] if self._arrays else 0

    def targets(self, idx=None, scaled: bool = False) -> np.ndarray:
        """Window targets ``(n, T)`` in the transformed space (optionally scaled)."""
        idx = np.arange(len(self)) if idx is None else np.asarray(idx)
        T = self.cfg.window
        y = np.stack([self._arrays[self.series_index[i]].y[self.start[i]:self.start[i] + T] for i in idx]) \
            if len(idx) else np.zeros((0, T))
        return y / self.scale[idx, None] if scaled else y

    def raw_targets(self, idx=None) -> np.ndarray:
        """Window targets ``(n, T)`` in the original space."""
        y = self.targets(idx)
        return np.expm1(y) if self.cfg.log_transform else y

    def to_original(self, values: np.ndarray, idx) -> np.ndarray:
        """Map scaled model-space values ``(n, ...)`` back to the original target space."""
        idx = np.asarray(idx)
        out = values * self.scale[idx].reshape((-1,) + (1,) * (values.ndim - 1))
        return np.expm1(out) if self.cfg.log_transform else out

    def batch(self, idx) -> WindowBatch:
        idx = np.asarray(idx, dtype=np.int64)
        cfg = self.cfg
        Tc = cfg.t_cov
        y = self.targets(idx, scaled=True)  # (b, T)
        y_lag = np.zeros_like(y)
        y_lag[:, 1:] = y[:, :-1]
        cov = np.stack([self._arrays[self.series_index[i]].cov[self.start[i]:self.start[i] + Tc] for i in idx], axis=1) \
            if len(idx) else np.zeros((Tc, 0, self.d_cov))
        cat = np.stack([self._arrays[self.series_index[i]].cat[self.start[i]:self.start[i] + Tc] for i in idx], axis=1) \
            if len(idx) else np.zeros((Tc, 0, self.n_cat), dtype=np.int64)
        return WindowBatch(
            y_lag=y_lag.T[:, :, None].copy(),
            y_true=y.T[:, :, None].copy(),
            a_cov=cov,
            a_cat=cat,
            scale=self.scale[idx],
            t0=cfg.t0,
            horizon=cfg.horizon,
            index=idx,
        )

    def batches(self, batch_size: int, rng: np.random.Generator | None = None,
                cap: int | None = None) -> Iterator[WindowBatch]:
        """Shuffled (with ``rng``) or in-order batches over at most ``cap`` windows."""
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        if cap is not None:
            order = order[:cap]
        for i in range(0, len(order), batch_size):
            yield self.batch(order[i:i + batch_size])


def covariate_names(table: SeriesTable, cfg: DatasetConfig) -> list[str]:
    names = list(table.covariate_names)
    for feat, period in cfg.fourier:
        names += [f"{feat}{period}_sin", f"{feat}{period}_cos"]
    return names


def _series_arrays(table: SeriesTable, si: int, cfg: DatasetConfig) -> _SeriesArrays:
    s = table.series[si]
    n, pad = len(s), cfg.t_cov
    y = np.log1p(s.target) if cfg.log_transform else s.target.astype(np.float64)
    ts = s.timestamps[0] + np.arange(n + pad) * table.step
    feats = [np.concatenate([s.covariates, np.zeros((pad, s.covariates.shape[1]))])]
    for feat, period in cfg.fourier:
        sin, cos = fourier_features(calendar_value(ts, feat), period)
        feats += [sin[:, None], cos[:, None]]
    code = table.series_code(s.series_id)
    cats = np.concatenate([np.full((n, 1), code, dtype=np.int64), s.categoricals], axis=1)
    cats = np.concatenate([cats, np.repeat(cats[-1:], pad, axis=0)])
    return _SeriesArrays(y, np.concatenate(feats, axis=1), cats)


def build_windows(table: SeriesTable, split: SplitSpec, cfg: DatasetConfig) -> dict[str, WindowSet]:
    """Sliding windows of length t0 + horizon for the train, validation and test splits.

    A window starting at position s conditions on [s, s + t0) and forecasts
    [s + t0, s + T). Train windows end before ``split.train_end``;
    validation windows forecast from or after it and end before
    ``split.val_end``; test windows forecast from ``split.val_end`` on.
    Covariates span t_cov steps from the window start; calendar features
    extend past the series end, numeric columns are zero there.
    """
    T = cfg.window
    arrays, picks = [], {k: ([], [], []) for k in SPLITS}
    skipped = 0
    for si, s in enumerate(table.series):
        arrays.append(_series_arrays(table, si, cfg))
        if len(s) < T:
            skipped += 1
            continue
        starts = np.arange(len(s) - T + 1)
        fstart = s.timestamps[starts + cfg.t0]
        wend = s.timestamps[starts + T - 1]
        masks = {
            "train": wend < split.train_end,
            "validation": (fstart >= split.train_end) & (wend < split.val_end),
            "test": fstart >= split.val_end,
        }
        for name, mask in masks.items():
            sel = starts[mask]
            stride = cfg.stride if name == "train" else cfg.eval_stride
            sel = sel[(sel - sel[0]) % stride == 0] if sel.size else sel
            picks[name][0].append(np.full(sel.size, si))
            picks[name][1].append(sel)
            picks[name][2].append(s.timestamps[sel + cfg.t0])
    if skipped:
        log.warning("skipped %d series shorter than one window (%d steps)", skipped, T)
    ids = [s.series_id for s in table.series]
    out = {}
    for name in SPLITS:
        si, st, fs = (np.concatenate(p) if p else np.zeros(0, dtype=np.int64) for p in picks[name])
        ws = WindowSet(arrays, si.astype(np.int64), st.astype(np.int64), fs, cfg, ids)
        ws.skipped = skipped
        out[name] = ws
    return out


def cardinalities(table: SeriesTable) -> tuple[int, ...]:
    return (len(table.vocabularies["series_id"]),) + tuple(len(table.vocabularies[n]) for n in table.categorical_names)
