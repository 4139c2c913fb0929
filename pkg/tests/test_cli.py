import csv
import math

import pytest

from aptrain import cli, report
from aptrain.cli import EXIT_RUNTIME, EXIT_USAGE, UsageError, main, parse

FAST = ["--recipe", "desk", "--epochs", "3", "--decay-epochs", "2", "--batch", "64",
        "--data", "blobs:300,3,8", "--arch", "mlp", "--hidden", "16"]


class TestParse:
    def test_paper_defaults(self):
        spec = parse(["train", "--mode", "apt", "--tmin", "6.0", "--init-bits", "6"], env={})
        cfg = spec.cfg
        assert (cfg.mode, cfg.t_min, cfg.t_max, cfg.initial_bitwidth) == ("apt", 6.0, math.inf, 6)
        assert (cfg.epochs, cfg.decay_epochs, cfg.batch_size) == (200, (100, 150), 128)
        assert spec.out == cli.DEFAULT_OUT

    def test_rejects_inverted_thresholds(self):
        with pytest.raises(UsageError):
            parse(["train", "--tmin", "10", "--tmax", "5"], env={})

    def test_unparsable(self):
        with pytest.raises(UsageError):
            parse(["train", "--epochs", "many"], env={})

    def test_unknown_flag(self):
        with pytest.raises(UsageError):
            parse(["train", "--turbo"], env={})

    def test_no_args_is_help(self):
        assert parse([], env={}) is None

    def test_precedence(self, tmp_path):
        conf = tmp_path / "run.conf"
        conf.write_text("# desk run\ntmin = 2.5\nepochs=30\nseed=4\nout=from_file\n")
        spec = parse(["train", "--config", str(conf), "--epochs", "12", "--decay-epochs", "6"],
                     env={"APT_OUT_DIR": "from_env"})
        assert spec.cfg.t_min == 2.5 and spec.cfg.epochs == 12 and spec.cfg.seed == 4
        assert spec.out == "from_file"
        assert parse(["train"], env={"APT_OUT_DIR": "from_env"}).out == "from_env"

    def test_config_unknown_key(self, tmp_path):
        conf = tmp_path / "run.conf"
        conf.write_text("turbo=1\n")
        with pytest.raises(UsageError, match="unknown key"):
            parse(["train", "--config", str(conf)], env={})

    def test_sweep_needs_tmins(self):
        with pytest.raises(UsageError):
            parse(["sweep"], env={})
        assert parse(["sweep", "--tmins", "0.1,1,10"], env={}).tmins == [0.1, 1.0, 10.0]


class TestMain:
    def test_help_exit_zero(self, capsys):
        assert main([]) == 0
        assert "train" in capsys.readouterr().out

    def test_usage_exit_two(self):
        assert main(["train", "--tmin", "10", "--tmax", "5"]) == EXIT_USAGE
        assert main(["train", "--nope"]) == EXIT_USAGE

    def test_train_writes_csv_and_checkpoint(self, tmp_path):
        assert main(["train", *FAST, "--out", str(tmp_path)]) == 0
        lines = (tmp_path / "history.csv").read_text().splitlines()
        assert lines[0] == "epoch,layer_id,bitwidth,gavg_ema,train_loss,test_acc,energy_norm,mem_norm,lr"
        rows = list(csv.reader(lines[1:]))
        assert len(rows) == 3 * 3  # 3 epochs x (2 layers + aggregate)
        assert [r[1] for r in rows[:3]] == ["0", "1", "-1"]
        assert (tmp_path / "model.apt").read_bytes()[:4] == b"APT1"

    def test_divergence_exit_three(self, tmp_path):
        rc = main(["train", *FAST, "--mode", "fp32", "--lr", "1e30", "--out", str(tmp_path)])
        assert rc == EXIT_RUNTIME
        assert (tmp_path / "history.csv").exists()

    def test_missing_data_exit_three(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]) == EXIT_RUNTIME

    def test_sweep(self, tmp_path, capsys):
        assert main(["sweep", *FAST, "--tmins", "0.1,10,10", "--out", str(tmp_path)]) == 0
        with open(tmp_path / "sweep.csv") as f:
            rows = list(csv.DictReader(f))
        assert [float(r["t_min"]) for r in rows] == [0.1, 10.0, 10.0]
        assert rows[1] == rows[2]
        assert float(rows[0]["energy_norm"]) <= float(rows[1]["energy_norm"])
        assert "inversion" in capsys.readouterr().out

    def test_sweep_parallel_matches_serial(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(["sweep", *FAST, "--tmins", "0.1,10", "--out", str(a)]) == 0
        assert main(["sweep", *FAST, "--tmins", "0.1,10", "--jobs", "2", "--out", str(b)]) == 0
        assert (a / "sweep.csv").read_text() == (b / "sweep.csv").read_text()

    def test_compare(self, tmp_path, capsys):
        for mode in ("apt", "fp32"):
            assert main(["train", *FAST, "--mode", mode, "--out", str(tmp_path / mode)]) == 0
        paths = [str(tmp_path / m / "history.csv") for m in ("apt", "fp32")]
        capsys.readouterr()
        assert main(["compare", *paths, "--targets", "0.0,2.0", "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[0] == "target_acc,history,history"
        first = out[1].split(",")
        apt_e1 = report.read_history(paths[0])[0][2]
        assert float(first[1]) == apt_e1 and float(first[2]) == 1.0
        assert out[2].split(",")[1:] == ["unreached", "unreached"]
        assert (tmp_path / "compare.csv").exists()

    def test_compare_needs_two(self, tmp_path):
        assert main(["compare", str(tmp_path / "x.csv")]) == EXIT_USAGE


class TestReport:
    def test_single_epoch_histories(self, tmp_path):
        h = [(0, 0.5, 0.2)]
        header, rows = report.compare_table([("a", h), ("b", [(0, 0.7, 1.0)])], [0.4, 0.6])
        assert rows == [["0.4", "0.2", "1.0"], ["0.6", "unreached", "1.0"]]

    def test_inversions(self):
        assert report.count_inversions([1, 2, 2, 1, 3]) == 1

    def test_rejects_foreign_csv(self, tmp_path):
        p = tmp_path / "x.csv"
        p.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            report.read_history(p)
