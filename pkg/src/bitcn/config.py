"""INI run configuration with typed sections and ``section.key=value`` overrides.

Sections: [data] [synth] [model] [train] [eval] [output]. Every key is
optional; omitted keys take the dataclass defaults below.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import json
import subprocess
import typing
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .data import CsvSchema, DatasetConfig, SplitSpec, build_windows, cardinalities, ingest_csv, synth_generate
from .errors import ConfigError
from .model import HyperParams, InputDims
from .training import GRID_BATCH_SIZES, GRID_LRS, TrainConfig


@dataclass
class DataSection:
    source: str = "synth"  # synth | csv
    path: str = ""
    freq: str = "hour"
    numeric: tuple[str, ...] = ()
    categorical: tuple[str, ...] = ()
    t0: int = 168
    horizon: int = 24
    t_cov: int = 500
    fourier: tuple[str, ...] = ("hour:24", "dayofweek:7")
    log_transform: bool = False
    mean_scaling: bool = True
    train_frac: float = 0.8
    val_frac: float = 0.1
    stride: int = 1
    eval_stride: int = 1


@dataclass
class SynthSection:
    kind: str = "seasonal"
    n_series: int = 20
    length: int = 1000
    seed: int = 0
    level: float | None = None
    noise: float | None = None
    tail_scale: float | None = None
    beta: float | None = None
    lead: int | None = None
    promo_rate: float | None = None

    def params(self) -> dict:
        names = ("level", "noise", "tail_scale", "beta", "lead", "promo_rate")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}


@dataclass
class ModelSection:
    d_hidden: int = 12
    n_layers: int = 5
    kernel_size: int = 9
    dropout: float = 0.1
    groups: int = 4
    epsilon: float = 1e-3
    distribution: str = "student_t3"
    softplus_mu: bool = True
    forward_layers: int | None = None
    forward_module: bool = True
    join: str = "concat"
    embedding_dim: int = 20


@dataclass
class TrainSection:
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_epochs: int = 100
    patience: int = 5
    grad_clip_norm: str = "auto"  # auto | none | <positive number>
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    loss_range: str = "horizon_only"
    epoch_cap: int | None = None
    eval_cap: int | None = None
    eval_batch_size: int = 256
    grid: bool = False
    grid_lrs: tuple[float, ...] = GRID_LRS
    grid_batch_sizes: tuple[int, ...] = GRID_BATCH_SIZES


@dataclass
class EvalSection:
    mode: str = "monte_carlo"
    samples: int = 100
    nrmse_literal: bool = False
    seasonal_period: int = 24
    cap: int | None = None


@dataclass
class OutputSection:
    dir: str = "runs"


SECTIONS = {
    "data": DataSection,
    "synth": SynthSection,
    "model": ModelSection,
    "train": TrainSection,
    "eval": EvalSection,
    "output": OutputSection,
}


def _convert(text: str, tp, where: str):
    text = text.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (origin is not None and type(None) in args and origin is not tuple):
        inner = [a for a in args if a is not type(None)][0]
        return None if text.lower() in ("", "none") else _convert(text, inner, where)
    if origin is tuple:
        return tuple(_convert(part, args[0], where) for part in text.replace(",", " ").split())
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    return text


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    output: OutputSection = field(default_factory=OutputSection)

    # -- parsing ------------------------------------------------------------------

    @classmethod
    def from_parser(cls, parser: configparser.ConfigParser) -> "RunConfig":
        unknown = [s for s in parser.sections() if s not in SECTIONS]
        if unknown:
            raise ConfigError(f"unknown section(s) {unknown}; expected {list(SECTIONS)}")
        built = {}
        for name, section_cls in SECTIONS.items():
            hints = typing.get_type_hints(section_cls)
            values = {}
            if parser.has_section(name):
                for key, text in parser.items(name):
                    if key not in hints:
                        raise ConfigError(f"[{name}] {key}: unknown key")
                    values[key] = _convert(text, hints[key], f"[{name}] {key}")
            try:
                built[name] = section_cls(**values)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}]: {exc}") from None
        cfg = cls(**built)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path=None, overrides: typing.Sequence[str] = (), text: str | None = None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            if text is not None:
                parser.read_string(text, source="<config>")
            elif path is not None:
                p = Path(path)
                if not p.is_file():
                    raise ConfigError(f"config file not found: {path}")
                parser.read_string(p.read_text(encoding="utf-8"), source=str(p))
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, name = key.strip().partition(".")
            if not sep or not dot or not name:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            if not parser.has_section(section):
                parser.add_section(section)
            parser.set(section, name, value)
        return cls.from_parser(parser)

    def validate(self) -> None:
        try:
            self.dataset_config()
            self.hyperparams()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.data.source not in ("synth", "csv"):
            raise ConfigError(f"[data] source: expected synth or csv, got {self.data.source!r}")
        if self.data.source == "csv" and not self.data.path:
            raise ConfigError("[data] path: required when source = csv")
        if self.eval.mode not in ("analytic", "monte_carlo"):
            raise ConfigError(f"[eval] mode: expected analytic or monte_carlo, got {self.eval.mode!r}")

    # -- views --------------------------------------------------------------------

    def to_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for name in SECTIONS:
            section = getattr(self, name)
            parser[name] = {f.name: _format(getattr(section, f.name)) for f in dataclasses.fields(section)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def with_overrides(self, overrides: typing.Sequence[str]) -> "RunConfig":
        return RunConfig.load(text=self.to_ini(), overrides=overrides)

    def dataset_config(self) -> DatasetConfig:
        fourier = []
        for item in self.data.fourier:
            name, _, period = item.partition(":")
            try:
                fourier.append((name, int(period)))
            except ValueError:
                raise ConfigError(f"[data] fourier: {item!r} is not name:period") from None
        return DatasetConfig(t0=self.data.t0, horizon=self.data.horizon, t_cov=self.data.t_cov,
                             fourier=tuple(fourier), log_transform=self.data.log_transform,
                             mean_scaling=self.data.mean_scaling, embedding_dim=self.model.embedding_dim,
                             train_frac=self.data.train_frac, val_frac=self.data.val_frac,
                             stride=self.data.stride, eval_stride=self.data.eval_stride)

    def hyperparams(self) -> HyperParams:
        m = self.model
        return HyperParams(d_hidden=m.d_hidden, n_layers=m.n_layers, kernel_size=m.kernel_size, dropout=m.dropout,
                           groups=m.groups, epsilon=m.epsilon, distribution=m.distribution,
                           softplus_mu=m.softplus_mu, horizon=self.data.horizon, t0=self.data.t0,
                           t_cov=self.data.t_cov, forward_layers=m.forward_layers,
                           forward_module=m.forward_module, join=m.join)

    def train_config(self) -> TrainConfig:
        t = self.train
        clip = t.grad_clip_norm.strip().lower()
        if clip == "auto":
            norm = "auto"
        elif clip == "none":
            norm = None
        else:
            try:
                norm = float(clip)
            except ValueError:
                raise ConfigError(f"[train] grad_clip_norm: {t.grad_clip_norm!r}") from None
        return TrainConfig(learning_rate=t.learning_rate, batch_size=t.batch_size, max_epochs=t.max_epochs,
                           patience=t.patience, grad_clip_norm=norm, seeds=t.seeds, loss_range=t.loss_range,
                           epoch_cap=t.epoch_cap, eval_cap=t.eval_cap, eval_batch_size=t.eval_batch_size)


@dataclass
class Dataset:
    table: object
    split: SplitSpec
    windows: dict
    dims: InputDims


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data.source == "synth":
        table = synth_generate(cfg.synth.kind, cfg.synth.n_series, cfg.synth.length, cfg.synth.seed,
                               **cfg.synth.params())
        split = SplitSpec.from_fractions(table, cfg.data.train_frac, cfg.data.val_frac)
    else:
        schema = CsvSchema(numeric=cfg.data.numeric, categorical=cfg.data.categorical, freq=cfg.data.freq)
        probe = ingest_csv(cfg.data.path, schema)
        split = SplitSpec.from_fractions(probe, cfg.data.train_frac, cfg.data.val_frac)
        table = ingest_csv(cfg.data.path, schema, vocab_until=split.train_end)
    dcfg = cfg.dataset_config()
    windows = build_windows(table, split, dcfg)
    d_cov = windows["train"].d_cov
    cards = cardinalities(table)
    dims = InputDims(d_cov=d_cov, cardinalities=cards, embedding_dims=tuple(dcfg.embedding_dim for _ in cards))
    return Dataset(table, split, windows, dims)


def build_version() -> str:
    """Package version, suffixed with ``git describe`` of the source tree when available."""
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def echo(cfg: RunConfig) -> str:
    return json.dumps({"version": build_version(), "config": cfg.to_dict()}, sort_keys=True)
