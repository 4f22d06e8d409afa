import json
import time

import pytest

from bitcn import cli
from bitcn.checkpoint import read_checkpoint
from bitcn.config import RunConfig, load_dataset
from bitcn.data import CsvSchema, ingest_csv, synth_generate
from bitcn.errors import ConfigError, NumericalError
from bitcn.evaluation import read_report, seasonal_naive_windows
from bitcn.model import BiTCN, count_parameters
from bitcn.training import RunRecord

TINY = """
[data]
t0 = 12
horizon = 4
t_cov = 20
eval_stride = 4
train_frac = 0.7
val_frac = 0.15
[synth]
kind = seasonal
n_series = 3
length = 160
[model]
d_hidden = 4
n_layers = 2
kernel_size = 3
embedding_dim = 3
[train]
batch_size = 16
max_epochs = 2
epoch_cap = 32
eval_cap = 16
seeds = 0, 1
[eval]
mode = analytic
seasonal_period = 4
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(TINY)
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestSynth:
    def test_bytes_identical_per_seed(self, tmp_path):
        for name in ("a.csv", "b.csv"):
            assert run("synth", "--kind", "future_driven", "--out", tmp_path / name, "--seed", 4,
                       "--n-series", 3, "--length", 50) == 0
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
        run("synth", "--kind", "future_driven", "--out", tmp_path / "c.csv", "--seed", 5, "--n-series", 3,
            "--length", 50)
        assert (tmp_path / "c.csv").read_bytes() != (tmp_path / "a.csv").read_bytes()

    def test_round_trip(self, tmp_path):
        run("synth", "--kind", "seasonal", "--out", tmp_path / "s.csv", "--seed", 2, "--n-series", 2, "--length", 30)
        back = ingest_csv(tmp_path / "s.csv", CsvSchema())
        ref = synth_generate("seasonal", 2, 30, 2)
        for a, b in zip(ref.series, back.series):
            assert a.series_id == b.series_id
            assert (a.target == b.target).all() and (a.timestamps == b.timestamps).all()

    def test_unknown_kind_is_usage_error(self, tmp_path, capsys):
        assert run("synth", "--kind", "lunar", "--out", tmp_path / "x.csv") == 1
        assert "lunar" in capsys.readouterr().err


class TestUsage:
    def test_missing_config(self, capsys):
        assert run("train") == 1
        assert "--config" in capsys.readouterr().err

    def test_nonexistent_config_file(self, tmp_path):
        assert run("train", "--config", tmp_path / "none.ini") == 1

    def test_unknown_command(self):
        assert run("fly") == 1

    def test_threads_must_be_positive(self, tiny_cfg):
        assert run("train", "--config", tiny_cfg, "--threads", 0) == 1

    def test_bad_value_names_field(self, tmp_path, capsys):
        (tmp_path / "bad.ini").write_text("[train]\nbatch_size = lots\n")
        assert run("train", "--config", tmp_path / "bad.ini") == 1
        assert "[train] batch_size" in capsys.readouterr().err

    def test_unknown_key_names_field(self):
        with pytest.raises(ConfigError, match=r"\[model\] depth"):
            RunConfig.load(text="[model]\ndepth = 3\n")

    def test_override_beats_file(self, tiny_cfg):
        cfg = RunConfig.load(tiny_cfg, ["train.batch_size=8", "model.d_hidden=6"])
        assert cfg.train.batch_size == 8 and cfg.model.d_hidden == 6
        assert RunConfig.load(tiny_cfg).train.batch_size == 16

    def test_malformed_override(self, tiny_cfg):
        assert run("train", "--config", tiny_cfg, "--override", "batch_size=3") == 1

    def test_ini_round_trip(self, tiny_cfg):
        cfg = RunConfig.load(tiny_cfg)
        assert RunConfig.load(text=cfg.to_ini()) == cfg


class TestTrainEvaluate:
    @pytest.fixture
    def trained(self, tiny_cfg, tmp_path):
        out = tmp_path / "out"
        assert run("train", "--config", tiny_cfg, "--out", out) == 0
        return out

    def test_artifacts(self, trained):
        for seed in (0, 1):
            assert (trained / f"seed{seed}" / "model.ckpt").is_file()
            rec = RunRecord.from_text((trained / f"seed{seed}" / "run.txt").read_text())
            assert rec.seed == seed and rec.config["run"]["config"]["train"]["seeds"] == [0, 1]
            assert "config" in read_checkpoint(trained / f"seed{seed}" / "model.ckpt").extra
        assert "# version " in (trained / "config.ini").read_text()

    def test_evaluate_reproduces_validation_nll(self, trained, tiny_cfg, capsys):
        capsys.readouterr()
        assert run("evaluate", "--config", tiny_cfg, "--checkpoint", trained, "--out", trained / "eval") == 0
        printed = capsys.readouterr().out
        for seed in (0, 1):
            rec = RunRecord.from_text((trained / f"seed{seed}" / "run.txt").read_text())
            line = next(ln for ln in printed.splitlines() if ln.startswith(f"seed {seed}:"))
            assert float(line.rsplit(" ", 1)[1]) == pytest.approx(rec.best_val_nll, abs=1e-9)

    def test_report_contents(self, trained, tiny_cfg):
        run("evaluate", "--config", tiny_cfg, "--checkpoint", trained, "--out", trained / "eval")
        rep = read_report(trained / "eval" / "report.txt")
        cfg = RunConfig.load(tiny_cfg)
        assert rep.parameters == count_parameters(BiTCN(cfg.hyperparams(), load_dataset(cfg).dims))
        assert sorted(rep.per_seed) == [0, 1] and not rep.partial
        assert rep.config["config"]["model"]["d_hidden"] == 4 and rep.version
        assert (trained / "eval" / "report.fan.csv").is_file()
        naive = seasonal_naive_windows(load_dataset(cfg).windows["test"], 4).metrics()
        assert rep.baseline == pytest.approx(naive, rel=1e-15)

    def test_single_checkpoint_file(self, trained, tiny_cfg):
        assert run("evaluate", "--config", tiny_cfg, "--checkpoint", trained / "seed1" / "model.ckpt",
                   "--out", trained / "one") == 0
        assert sorted(read_report(trained / "one" / "report.txt").per_seed) == [1]

    def test_nonexistent_checkpoint(self, tiny_cfg, tmp_path, capsys):
        assert run("evaluate", "--config", tiny_cfg, "--checkpoint", tmp_path / "nope.ckpt",
                   "--out", tmp_path / "e") == 2
        assert "nope.ckpt" in capsys.readouterr().err

    def test_incompatible_checkpoint_names_field(self, trained, tiny_cfg, capsys):
        assert run("evaluate", "--config", tiny_cfg, "--override", "model.d_hidden=8", "--checkpoint", trained,
                   "--out", trained / "e") == 2
        assert "d_hidden" in capsys.readouterr().err

    def test_rerun_from_echoed_config_is_bitwise(self, trained, tmp_path):
        first = {s: (trained / f"seed{s}" / "model.ckpt").read_bytes() for s in (0, 1)}
        records = {s: RunRecord.from_text((trained / f"seed{s}" / "run.txt").read_text()) for s in (0, 1)}
        echoed = tmp_path / "echoed.ini"
        echoed.write_text((trained / "config.ini").read_text())
        assert run("train", "--config", echoed) == 0
        for s in (0, 1):
            assert (trained / f"seed{s}" / "model.ckpt").read_bytes() == first[s]
            again = RunRecord.from_text((trained / f"seed{s}" / "run.txt").read_text())
            assert again.to_text(timings=False) == records[s].to_text(timings=False)

    def test_seed_flag(self, tiny_cfg, tmp_path):
        assert run("train", "--config", tiny_cfg, "--seed", 7, "--out", tmp_path / "o") == 0
        assert [p.name for p in (tmp_path / "o").glob("seed*")] == ["seed7"]


def test_numeric_failure_exit_code(tiny_cfg, tmp_path, monkeypatch, capsys):
    def diverge(*a, **k):
        raise NumericalError("epoch 1, batch 0: non-finite training loss nan")

    monkeypatch.setattr(cli, "train", diverge)
    assert run("train", "--config", tiny_cfg, "--out", tmp_path / "o") == 3
    assert "epoch 1, batch 0" in capsys.readouterr().err


def test_data_error_exit_code(tmp_path):
    (tmp_path / "d.csv").write_text("series_id,timestamp,target\na,2021-01-01T00:00:00,1\na,2021-01-01T00:00:00,2\n")
    (tmp_path / "c.ini").write_text(f"[data]\nsource = csv\npath = {tmp_path / 'd.csv'}\n")
    assert run("train", "--config", tmp_path / "c.ini", "--out", tmp_path / "o") == 2


def test_ablate_four_cells(tiny_cfg, tmp_path):
    out = tmp_path / "abl"
    assert run("ablate", "--config", tiny_cfg, "--seed", 0, "--out", out) == 0
    rows = [ln.split("\t") for ln in (out / "ablation.tsv").read_text().splitlines() if not ln.startswith("#")]
    header, cells = rows[0], {r[0]: r for r in rows[1:]}
    assert header[0] == "cell" and len(cells) == 4
    assert set(cells) == {"forward_student_t3", "forward_gaussian", "noforward_student_t3", "noforward_gaussian"}
    assert int(cells["noforward_student_t3"][1]) < int(cells["forward_student_t3"][1])
    seeds = {json.dumps(RunConfig.load(out / name / "config.ini").train.seeds) for name in cells}
    assert seeds == {"[0]"}


def test_grid_writes_table(tiny_cfg, tmp_path):
    out = tmp_path / "g"
    assert run("grid", "--config", tiny_cfg, "--seed", 0, "--out", out, "--override", "train.grid_lrs=0.001 0.0001",
               "--override", "train.grid_batch_sizes=8 16", "--override", "train.max_epochs=1") == 0
    lines = (out / "grid.tsv").read_text().splitlines()
    assert sum(ln.endswith("\tok") for ln in lines) == 4 and lines[-1].startswith("best\t")


def test_smoke_run_with_default_model(tmp_path):
    cfg = tmp_path / "smoke.ini"
    cfg.write_text("[data]\nt0 = 96\nhorizon = 24\nt_cov = 120\neval_stride = 24\n"
                   "[train]\nbatch_size = 128\nmax_epochs = 3\nepoch_cap = 256\neval_cap = 96\nseeds = 0\n")
    start = time.perf_counter()
    assert run("train", "--config", cfg, "--out", tmp_path / "o") == 0
    assert time.perf_counter() - start < 60
