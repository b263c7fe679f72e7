import csv
import json
import subprocess
import sys

import pytest

from demosim.analysis import STATS_HEADER
from demosim.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from demosim.core import Codebook, N_BANDS
from demosim.migration import MigrationSchedule

from conftest import BUNDLE

POP = "20000"


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """calibrate + two comparable 10-year runs, shared by read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    models, run1, run2 = root / "models", root / "run1", root / "run2"
    assert main(["calibrate", "--data", str(BUNDLE), "--out", str(models),
                 "--population", POP]) == EXIT_OK
    common = ["--models", str(models), "--population", POP, "--steps", "40"]
    assert main(["run", "--scenario", "status-quo", "--out", str(run1), *common]) == EXIT_OK
    assert main(["run", "--scenario", "2nd-enlargement", "--out", str(run2), *common]) == EXIT_OK
    return models, run1, run2


class TestCalibrate:
    def test_models_directory_is_self_contained(self, pipeline, codebook):
        models, _, _ = pipeline
        names = {p.name for p in models.iterdir()}
        assert {
            "census.csv", "birth_rates.csv", "tfr.csv", "multiplicity.csv",
            "sex_ratio.csv", "mortality.csv", "schedule.csv",
            "fertility_hazards.csv", "mortality_curves.csv", "manifest.json",
        } <= names
        MigrationSchedule.load(models / "schedule.csv", codebook)
        manifest = json.loads((models / "manifest.json").read_text())
        assert manifest["population_size"] == int(POP)

    def test_exported_curves_are_tabular(self, pipeline):
        models, _, _ = pipeline
        with open(models / "mortality_curves.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 2 * 17 * 111  # sexes x decade cohorts x ages 0..110
        assert all(float(r["hazard"]) >= 0 for r in rows[:500])
        with open(models / "fertility_hazards.csv", newline="") as fh:
            frows = list(csv.DictReader(fh))
        assert {r["age_group"] for r in frows} == {
            "15-19", "20-24", "25-29", "30-34", "35-39", "40-44", "45-49",
        }

    def test_env_var_supplies_the_dataset(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("DEMOSIM_DATA", str(BUNDLE))
        assert main(["calibrate", "--out", str(tmp_path / "m"),
                     "--population", "5000"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "decade 1991" in out and "models written" in out

    def test_missing_dataset_dir_is_a_data_error(self, tmp_path, capsys):
        code = main(["calibrate", "--data", str(tmp_path / "nowhere"),
                     "--out", str(tmp_path / "m")])
        assert code == EXIT_DATA
        assert "error:" in capsys.readouterr().err


class TestRun:
    def test_echoes_factors_and_final_population(self, pipeline, capsys, tmp_path):
        models, _, _ = pipeline
        code = main(["run", "--scenario", "status-quo", "--models", str(models),
                     "--out", str(tmp_path / "r"), "--population", POP, "--steps", "40"])
        assert code == EXIT_OK
        out = capsys.readouterr().out
        assert "scenario status-quo: brexit=no f_Enl 100%, f_Ex 0%, f_Em 100%, f_Ret 0%" in out
        assert "population at 2001q0" in out

    def test_scenario_file(self, pipeline, tmp_path, capsys):
        models, _, _ = pipeline
        scn = tmp_path / "boom.scn"
        scn.write_text("brexit = false\nf_enl = 1.5\n")
        code = main(["run", "--scenario", str(scn), "--models", str(models),
                     "--out", str(tmp_path / "r"), "--population", POP, "--steps", "8"])
        assert code == EXIT_OK
        assert "scenario boom: brexit=no f_Enl 150%" in capsys.readouterr().out

    def test_unknown_scenario(self, pipeline, tmp_path, capsys):
        models, _, _ = pipeline
        code = main(["run", "--scenario", "utopia", "--models", str(models),
                     "--out", str(tmp_path / "r")])
        assert code == EXIT_DATA
        err = capsys.readouterr().err
        assert "unknown scenario 'utopia'" in err and "status-quo" in err

    def test_missing_models_dir(self, tmp_path, capsys):
        code = main(["run", "--scenario", "status-quo", "--models", str(tmp_path / "nope"),
                     "--out", str(tmp_path / "r")])
        assert code == EXIT_DATA

    def test_repeat_runs_are_byte_identical(self, pipeline, tmp_path):
        models, _, _ = pipeline
        outs = []
        for name in ("a", "b"):
            out = tmp_path / name
            assert main(["run", "--scenario", "status-quo", "--models", str(models),
                         "--out", str(out), "--population", "5000", "--steps", "12"]) == EXIT_OK
            outs.append(out)
        for fname in ("snapshots.csv", "events.csv", "manifest.json"):
            assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()


class TestAnalyze:
    def test_stats_csv(self, pipeline, tmp_path):
        _, run1, run2 = pipeline
        out = tmp_path / "stats.csv"
        code = main(["analyze", "--runs", str(run1), str(run2),
                     "--metric", "total-population", "--out", str(out)])
        assert code == EXIT_OK
        with open(out, newline="") as fh:
            reader = csv.reader(fh)
            assert tuple(next(reader)) == STATS_HEADER
            rows = list(reader)
        assert len(rows) == 2 * 11  # two runs, snapshots 1991..2001
        assert {r[1] for r in rows} == {"status-quo", "2nd-enlargement"}
        assert all(float(r[4]) > 4e7 for r in rows)  # scaled to real persons

    def test_pyramid_csv(self, pipeline, tmp_path):
        _, run1, _ = pipeline
        out = tmp_path / "pyr.csv"
        assert main(["analyze", "--runs", str(run1), "--metric", "pyramid",
                     "--out", str(out)]) == EXIT_OK
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 11 * 2 * N_BANDS
        assert {r["sex"] for r in rows} == {"F", "M"}

    def test_eu_inflow_rows_are_quarterly(self, pipeline, tmp_path):
        _, run1, _ = pipeline
        out = tmp_path / "inflow.csv"
        assert main(["analyze", "--runs", str(run1), "--metric", "eu-inflow",
                     "--out", str(out)]) == EXIT_OK
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 40
        assert all(r["filter"] == "eu_immigrant" for r in rows)

    def test_incomparable_runs(self, pipeline, tmp_path, capsys):
        models, run1, _ = pipeline
        short = tmp_path / "short"
        assert main(["run", "--scenario", "status-quo", "--models", str(models),
                     "--out", str(short), "--population", "5000", "--steps", "44"]) == EXIT_OK
        code = main(["analyze", "--runs", str(run1), str(short),
                     "--metric", "total-population", "--out", str(tmp_path / "s.csv")])
        assert code == EXIT_DATA
        assert "incomparable" in capsys.readouterr().err

    def test_unknown_metric(self, pipeline, tmp_path, capsys):
        _, run1, _ = pipeline
        code = main(["analyze", "--runs", str(run1), "--metric", "volume",
                     "--out", str(tmp_path / "s.csv")])
        assert code == EXIT_DATA
        assert "unknown metric 'volume'" in capsys.readouterr().err

    def test_sensitivity_report(self, pipeline, tmp_path):
        models, run1, _ = pipeline
        out = tmp_path / "sens.json"
        code = main(["analyze", "--runs", str(run1), "--metric", "eu-inflow",
                     "--sensitivity", "f_enl", "--models", str(models),
                     "--out", str(out)])
        assert code == EXIT_OK
        report = json.loads(out.read_text())
        assert report["param"] == "f_enl" and report["base_value"] == 1.0
        assert set(report["series"]) == {"low", "high"}
        assert len(report["derivative"]) == 40
        assert len(report["dates"]) == 40
        # the enlargement window opens in 2020; this run ends in 2001
        assert all(abs(d) < 1e-9 for d in report["derivative"])

    def test_sensitivity_requires_models(self, pipeline, tmp_path, capsys):
        _, run1, _ = pipeline
        code = main(["analyze", "--runs", str(run1), "--metric", "eu-inflow",
                     "--sensitivity", "f_enl", "--out", str(tmp_path / "s.json")])
        assert code == EXIT_DATA
        assert "--models" in capsys.readouterr().err


class TestExitCodes:
    @pytest.mark.parametrize(
        "argv",
        [[], ["frobnicate"], ["run", "--scenario", "status-quo"], ["calibrate"]],
    )
    def test_usage_errors_exit_1(self, argv):
        with pytest.raises(SystemExit) as exc:
            main(argv)
        assert exc.value.code == EXIT_USAGE

    def test_version_exits_0(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["--version"])
        assert exc.value.code == 0
        assert "demosim" in capsys.readouterr().out

    def test_module_entry_point(self):
        proc = subprocess.run(
            [sys.executable, "-m", "demosim", "--version"],
            capture_output=True, text=True, timeout=60,
        )
        assert proc.returncode == 0
        assert proc.stdout.startswith("demosim")
