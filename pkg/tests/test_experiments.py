import json
import math
import subprocess
import sys

import numpy as np
import pytest

from fedff import cli
from fedff import experiments as ex
from fedff.experiments import ConfigError, ExperimentSpec, ResultTable, parse_runs, parse_split, read_table
from fedff.federation import FederationConfig
from fedff.neuralff import load_checkpoint, model_from_json
from fedff.trajgen import ROMAN, Trajectory


def run_cli(*args):
    return cli.run(list(args))


class TestParsing:
    def test_default_split(self):
        train, test = parse_split(None)
        assert test == {"I", "VI", "VIII", "XI"}

    def test_run_index(self):
        assert parse_split("2")[1] == {"III", "IV", "VI", "IX"}

    def test_list(self):
        train, test = parse_split("I, II")
        assert test == {"I", "II"} and len(train) == 10

    @pytest.mark.parametrize("text", ["0", "11", "I,XIII", ",".join(ROMAN)])
    def test_invalid(self, text):
        with pytest.raises(ConfigError):
            parse_split(text)

    def test_runs(self):
        assert parse_runs(None) == list(range(1, 11))
        assert parse_runs("3,1") == [1, 3]
        with pytest.raises(ConfigError):
            parse_runs("12")
        with pytest.raises(ConfigError):
            parse_runs("a")

    def test_spec_validation(self, tmp_path):
        with pytest.raises(ConfigError):
            ExperimentSpec(kind="nope", out=tmp_path)
        with pytest.raises(ConfigError):
            ExperimentSpec(kind="baseline", out=tmp_path, workers=0)

    def test_config_hash_ignores_output_location(self, tmp_path):
        a = ExperimentSpec(kind="federated", out=tmp_path / "a", seed=3)
        b = ExperimentSpec(kind="federated", out=tmp_path / "b", seed=3)
        c = ExperimentSpec(kind="federated", out=tmp_path / "a", seed=4)
        assert a.config_hash() == b.config_hash() != c.config_hash()


class TestResultTable:
    def test_csv(self):
        t = ResultTable("x.csv", ("client", "mte"))
        t.add("I", 0.5)
        t.add("II", float("nan"))
        assert t.to_csv() == "client,mte\nI,0.5\nII,\n"

    def test_arity(self):
        with pytest.raises(ValueError):
            ResultTable("x.csv", ("a", "b")).add(1)


class TestBaseline:
    def test_rows_and_ordering(self, tmp_path):
        assert run_cli("baseline", "--out", str(tmp_path)) == 0
        rows = read_table(tmp_path / "mte_fb_ff.csv")
        assert len(rows) == 24
        assert len({(r["client"], r["variant"]) for r in rows}) == 24
        by = {(r["client"], r["variant"]): r["mte"] for r in rows}
        for cid in ROMAN:
            assert by[cid, "fb_analytic"] < by[cid, "fb"]
            assert by[cid, "fb_analytic"] >= 0
        meta = json.loads((tmp_path / "baseline.meta.json").read_text())
        assert meta["seed"] == 0 and "config_hash" in meta

    def test_byte_identical(self, tmp_path):
        run_cli("baseline", "--out", str(tmp_path / "a"))
        run_cli("baseline", "--out", str(tmp_path / "b"))
        for name in ("mte_fb_ff.csv", "baseline.meta.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_env_default_output(self, tmp_path, monkeypatch):
        monkeypatch.setenv("FEDFF_OUT", str(tmp_path / "env"))
        assert run_cli("baseline") == 0
        assert (tmp_path / "env" / "mte_fb_ff.csv").exists()


class TestExitCodes:
    def test_bad_split_is_config_error(self, tmp_path):
        assert run_cli("centralized", "--out", str(tmp_path), "--split", "XIII") == 1

    def test_bad_option_is_config_error(self, tmp_path):
        assert run_cli("baseline", "--out", str(tmp_path), "--workers", "0") == 1
        assert run_cli("no-such-command") == 1

    def test_missing_paths_is_config_error(self, tmp_path):
        assert run_cli("baseline", "--out", str(tmp_path), "--paths", str(tmp_path / "empty")) == 1

    def test_divergence_marks_partial_results(self, tmp_path, monkeypatch):
        real = ex.lap_mte

        def flaky(world, cid, ff):
            if cid == "IV":
                return float("nan"), "diverged", None
            return real(world, cid, ff)

        monkeypatch.setattr(ex, "lap_mte", flaky)
        assert run_cli("baseline", "--out", str(tmp_path)) == 2
        rows = read_table(tmp_path / "mte_fb_ff.csv")
        bad = [r for r in rows if r["client"] == "IV"]
        assert all(r["status"] == "diverged" and math.isnan(r["mte"]) for r in bad)

    def test_console_script(self, tmp_path):
        out = subprocess.run([sys.executable, "-m", "fedff", "gen-paths", "--out", str(tmp_path)],
                             capture_output=True, text=True)
        assert out.returncode == 0, out.stderr


class TestGenPaths:
    def test_writes_twelve_trajectories(self, tmp_path, trajectories):
        assert run_cli("gen-paths", "--out", str(tmp_path)) == 0
        files = sorted(p.stem for p in (tmp_path / "trajectories").glob("*.csv"))
        assert sorted(files) == sorted(ROMAN)
        back = Trajectory.from_csv(tmp_path / "trajectories" / "V.csv")
        np.testing.assert_array_equal(back.kappa_d, trajectories["V"].kappa_d)
        assert len(read_table(tmp_path / "paths_summary.csv")) == 12


class TestCentralized:
    def test_layout(self, tmp_path):
        assert run_cli("centralized", "--out", str(tmp_path)) in (0, 2)
        rows = read_table(tmp_path / "centralized_mte.csv")
        assert [r["client"] for r in rows] == ["I", "VI", "VIII", "XI"]
        assert {"fb", "fb_analytic", "fb_centralized", "speed_coverage", "flag"} <= set(rows[0])
        model = load_checkpoint(tmp_path / "centralized_model.ffnn")
        assert model_from_json((tmp_path / "centralized_model.json").read_text()).same_bits(model)

    def test_consistent_with_baseline(self, tmp_path):
        run_cli("centralized", "--out", str(tmp_path))
        run_cli("baseline", "--out", str(tmp_path))
        base = {(r["client"], r["variant"]): r["mte"] for r in read_table(tmp_path / "mte_fb_ff.csv")}
        for r in read_table(tmp_path / "centralized_mte.csv"):
            assert r["fb"] == base[r["client"], "fb"]
            assert r["fb_analytic"] == base[r["client"], "fb_analytic"]


class TestFederated:
    def test_outputs(self, tmp_path):
        code = run_cli("federated", "--out", str(tmp_path), "--rounds", "2", "--gzip-logs")
        assert code in (0, 2)
        rows = read_table(tmp_path / "federated_mte.csv")
        assert len(rows) == 4
        assert list(rows[0]) == ["client", "fb", "fb_analytic", "fb_centralized", "fb_federated"]
        rounds = read_table(tmp_path / "federated_rounds.csv")
        assert {r["round"] for r in rounds} == {1.0, 2.0}
        assert len(list((tmp_path / "laps").glob("*.csv.gz"))) == 16
        assert len(list((tmp_path / "rounds").glob("*.ffup"))) == 2
        assert (tmp_path / "federated_model.ffnn").exists()

    def test_byte_identical(self, tmp_path):
        for d in ("a", "b"):
            run_cli("federated", "--out", str(tmp_path / d), "--rounds", "2", "--epochs", "2")
        for name in ("federated_mte.csv", "federated_rounds.csv", "federated_model.ffnn", "federated.meta.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


class TestSweep:
    def test_small_sweep(self, world):
        cfg = FederationConfig(rounds=3)
        agg, raw = ex.sweep(world, cfg, runs=[1, 2])
        assert len(agg.rows) == 3 * 3
        assert agg.columns == ("epochs", "round", "mean", "std", "n_runs")
        assert len(raw.rows) == 3 * 2 * 3
        for e, g, mean, std, n in agg.rows:
            vals = [m for (ee, run, gg, m) in raw.rows if ee == e and gg == g]
            assert mean == pytest.approx(np.mean(vals))
            assert std == pytest.approx(np.std(vals, ddof=1))

    def test_cli(self, tmp_path):
        assert run_cli("sweep", "--out", str(tmp_path), "--rounds", "2", "--split", "1,5") in (0, 2)
        assert len(read_table(tmp_path / "epoch_sweep.csv")) == 6


class TestLocalVsFed:
    def test_self_comparison(self, world):
        from fedff.trajgen import default_split

        train, test = default_split()
        cfg = FederationConfig(rounds=1)
        fed_model = ex.train_local_only(world, "II", 1, 1)
        table = ex.local_vs_fed(world, cfg, train, test, fed_model=fed_model,
                                local_models={c: fed_model for c in train})
        assert len(table.rows) == 32
        assert all(r[4] == 1.0 for r in table.rows)

    def test_cli(self, tmp_path):
        assert run_cli("local-vs-fed", "--out", str(tmp_path), "--rounds", "2") in (0, 2)
        rows = read_table(tmp_path / "local_vs_fed_ratio.csv")
        assert len(rows) == 32
        assert len({(r["local_client"], r["test_client"]) for r in rows}) == 32
