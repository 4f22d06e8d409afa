"""Command-line entry point: ``bitcn {train,evaluate,ablate,synth,grid}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from threadpoolctl import threadpool_limits

from .checkpoint import check_compatible, load_checkpoint, read_checkpoint
from .config import RunConfig, build_version, echo, load_dataset
from .data import synth_generate, write_csv
from .distributions import GAUSSIAN, STUDENT_T3
from .errors import CheckpointError, ConfigError, DataError, NumericalError, OutOfVocabularyError
from .evaluation import MetricsReport, decode_forecast, emit_report, seasonal_naive_windows
from .model import BiTCN, count_parameters
from .training import evaluate_nll, grid_search, seed_streams, spread_indices, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SYNTH_KINDS = ("seasonal", "heavy_tailed", "future_driven")

log = logging.getLogger("bitcn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _config(args) -> RunConfig:
    if args.config is None:
        raise ConfigError("--config is required")
    overrides = list(args.override or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seeds={args.seed}")
    if getattr(args, "out", None):
        overrides.append(f"output.dir={args.out}")
    return RunConfig.load(args.config, overrides)


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(f"# version {build_version()}\n" + cfg.to_ini(), encoding="utf-8")
    return out


def _train_seeds(cfg: RunConfig, ds, out: Path) -> dict[int, BiTCN]:
    hp, tcfg = cfg.hyperparams(), cfg.train_config()
    models = {}
    for seed in tcfg.seeds:
        init_rng, train_rng = seed_streams(seed)
        model = BiTCN(hp, ds.dims, init_rng)
        run_dir = out / f"seed{seed}"
        run_dir.mkdir(parents=True, exist_ok=True)
        ckpt = run_dir / "model.ckpt"
        record = train(model, ds.windows, tcfg, train_rng, seed=seed, checkpoint_path=ckpt,
                       extra_config={"run": json.loads(echo(cfg))})
        (run_dir / "run.txt").write_text(record.to_text(), encoding="utf-8")
        log.info("seed %d: best epoch %d, val NLL %.6f", seed, record.best_epoch, record.best_val_nll)
        models[seed] = model
    return models


def _evaluate_models(cfg: RunConfig, ds, models: dict[int, BiTCN], out: Path, stem: str = "report") -> MetricsReport:
    test = ds.windows["test"]
    if len(test) == 0:
        raise DataError("the test split holds no windows")
    idx = None if cfg.eval.cap is None else spread_indices(len(test), cfg.eval.cap)
    per_seed, last = {}, None
    for seed, model in models.items():
        result = decode_forecast(model, test, idx, mode=cfg.eval.mode, samples=cfg.eval.samples, seed=seed)
        per_seed[seed] = result.metrics(cfg.eval.nrmse_literal)
        last = result
    any_model = next(iter(models.values()))
    baseline = None
    if cfg.data.t0 >= cfg.eval.seasonal_period:
        baseline = seasonal_naive_windows(test, cfg.eval.seasonal_period, idx).metrics(cfg.eval.nrmse_literal)
    report = MetricsReport(per_seed, count_parameters(any_model), json.loads(echo(cfg)),
                           tuple(cfg.train.seeds), build_version(), baseline)
    emit_report(report, out / f"{stem}.txt", plot_data=last)
    return report


# -- commands ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config(args)
    ds = load_dataset(cfg)
    out = _prepare_out(cfg)
    if cfg.train.grid:
        return _run_grid(cfg, ds, out)
    _train_seeds(cfg, ds, out)
    print(f"trained seeds {list(cfg.train.seeds)} -> {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    ds = load_dataset(cfg)
    out = _prepare_out(cfg)
    target = Path(args.checkpoint)
    paths = sorted(target.glob("seed*/model.ckpt")) if target.is_dir() else [target]
    if not paths or not all(p.is_file() for p in paths):
        raise CheckpointError(f"no checkpoint found at {target}")
    expected = cfg.hyperparams()
    models, lines = {}, []
    for p in paths:
        ckpt = read_checkpoint(p)
        check_compatible(ckpt.model.hp, expected)
        if ckpt.model.dims != ds.dims:
            raise CheckpointError(f"{p}: input dims {ckpt.model.dims} do not match dataset {ds.dims}")
        model = load_checkpoint(p, expected)
        seed = int(ckpt.extra.get("seed", len(models)))
        models[seed] = model
        val = evaluate_nll(model, ds.windows["validation"], cfg.train.eval_batch_size, cfg.train.eval_cap,
                           cfg.train.loss_range)
        lines.append(f"seed {seed}: validation NLL {val!r}")
    cfg = cfg.with_overrides([f"train.seeds={' '.join(str(s) for s in models)}"])
    report = _evaluate_models(cfg, ds, models, out)
    print("\n".join(lines))
    print(f"mQ {report.mean('mq'):.6f}  sMAPE {report.mean('smape'):.6f}  parameters {report.parameters}")
    if report.baseline:
        print(f"seasonal-naive mQ {report.baseline['mq']:.6f}  sMAPE {report.baseline['smape']:.6f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    ds = load_dataset(cfg)
    out = _prepare_out(cfg)
    rows, failures = [], 0
    for forward in (True, False):
        for family in (STUDENT_T3, GAUSSIAN):
            name = f"{'forward' if forward else 'noforward'}_{family}"
            cell = cfg.with_overrides([f"model.forward_module={forward}", f"model.distribution={family}",
                                       f"output.dir={out / name}"])
            cell_out = _prepare_out(cell)
            try:
                models = _train_seeds(cell, ds, cell_out)
                report = _evaluate_models(cell, ds, models, cell_out)
                rows.append((name, report.parameters, report, ""))
            except (NumericalError, FloatingPointError) as exc:
                failures += 1
                rows.append((name, count_parameters(BiTCN(cell.hyperparams(), ds.dims)), None, str(exc)))
                log.warning("ablation cell %s failed: %s", name, exc)
    lines = [f"# version {build_version()}", f"# seeds {' '.join(str(s) for s in cfg.train.seeds)}",
             "cell\tparameters\tsmape\tnrmse\tq50\tmq\tstatus"]
    for name, params, report, err in rows:
        if report is None:
            lines.append(f"{name}\t{params}\t-\t-\t-\t-\tfailed: {err}")
        else:
            vals = "\t".join(f"{report.mean(k):.6f}±{report.std(k):.6f}" for k in ("smape", "nrmse", "q50", "mq"))
            lines.append(f"{name}\t{params}\t{vals}\tok")
    table = "\n".join(lines) + "\n"
    (out / "ablation.tsv").write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK if failures < len(rows) else EXIT_NUMERIC


def _run_grid(cfg: RunConfig, ds, out: Path) -> int:
    hp = cfg.hyperparams()
    result = grid_search(lambda rng: BiTCN(hp, ds.dims, rng), ds.windows, cfg.train_config(),
                         cfg.train.grid_lrs, cfg.train.grid_batch_sizes)
    lines = [f"# version {build_version()}", f"# config {echo(cfg)}", "learning_rate\tbatch_size\tmean_best_val_nll\tstatus"]
    for lr in cfg.train.grid_lrs:
        for bs in cfg.train.grid_batch_sizes:
            cell = (float(lr), int(bs))
            if cell in result.means:
                lines.append(f"{lr!r}\t{bs}\t{result.means[cell]!r}\tok")
            else:
                lines.append(f"{lr!r}\t{bs}\t-\tfailed: {result.failures.get(cell, '')}")
    lines.append(f"best\t{result.best[0]!r}\t{result.best[1]}")
    (out / "grid.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    for cell, runs in result.records.items():
        for rec in runs:
            path = out / f"lr{cell[0]!r}_bs{cell[1]}" / f"seed{rec.seed}.txt"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(rec.to_text(), encoding="utf-8")
    print(f"best cell lr={result.best[0]!r} batch={result.best[1]}")
    return EXIT_OK


def cmd_grid(args) -> int:
    cfg = _config(args)
    ds = load_dataset(cfg)
    return _run_grid(cfg, ds, _prepare_out(cfg))


def cmd_synth(args) -> int:
    seed = 0 if args.seed is None else args.seed
    table = synth_generate(args.kind, args.n_series, args.length, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(table, out)
    print(f"wrote {len(table.series)} {args.kind} series to {out}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bitcn", description="Train and evaluate BiTCN forecasters.")
    parser.add_argument("--version", action="version", version=build_version())
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, needs_config=True):
        p.add_argument("--config", required=False, help="INI run configuration")
        p.add_argument("--seed", type=int, help="run a single seed instead of [train] seeds")
        p.add_argument("--out", help="output directory (overrides [output] dir)")
        p.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
        p.add_argument("--override", action="append", metavar="SECTION.KEY=VALUE", help="repeatable")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    common(sub.add_parser("train", help="train one model per seed"))
    ev = common(sub.add_parser("evaluate", help="decode the test split and write a metrics report"))
    ev.add_argument("--checkpoint", required=True, help="checkpoint file or a train output directory")
    common(sub.add_parser("ablate", help="forward module on/off x t(3)/Gaussian"))
    common(sub.add_parser("grid", help="learning-rate x batch-size grid search"))
    sy = sub.add_parser("synth", help="write a synthetic dataset as CSV")
    sy.add_argument("--kind", required=True, choices=SYNTH_KINDS)
    sy.add_argument("--out", required=True)
    sy.add_argument("--seed", type=int)
    sy.add_argument("--n-series", type=int, default=20)
    sy.add_argument("--length", type=int, default=1000)
    sy.add_argument("--threads", type=int, default=1)
    sy.add_argument("-v", "--verbose", action="store_true")
    return parser


COMMANDS = {"train": cmd_train, "evaluate": cmd_evaluate, "ablate": cmd_ablate, "grid": cmd_grid,
            "synth": cmd_synth}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"bitcn: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads < 1:
        print("bitcn: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(args.threads):
            return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"bitcn: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, OutOfVocabularyError, FileNotFoundError) as exc:
        print(f"bitcn: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"bitcn: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
