import json

import numpy as np
import pandas as pd
import pytest

from contactgp.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """simulate -> fit -> report on a deliberately tiny budget."""
    root = tmp_path_factory.mktemp("pipeline")
    data_dir = root / "data"
    fit_dir = root / "fit"
    code = main(
        [
            "simulate",
            "--scenario", "pre",
            "--n", "400",
            "--replicates", "1",
            "--seed", "5",
            "--out", str(data_dir),
        ]
    )
    assert code == 0
    dataset = data_dir / "pre_n400_r00"
    code = main(
        [
            "fit",
            "--data", str(dataset),
            "--out", str(fit_dir),
            "--cross-sectional",
            "--param", "diff-in-age",
            "--kernel", "matern32",
            "--m1", "8",
            "--m2", "6",
            "--chains", "2",
            "--warmup", "100",
            "--samples", "60",
            "--seed", "3",
        ]
    )
    assert code == 0
    code = main(
        [
            "report",
            "--fit", str(fit_dir),
            "--conditional-age", "10",
        ]
    )
    assert code == 0
    return {"data": dataset, "fit": fit_dir, "report": fit_dir / "report"}


class TestSimulate:
    def test_emits_requested_replicates(self, tmp_path, capsys):
        code, out, _ = run_cli(
            capsys,
            "simulate", "--scenario", "in", "--n", "250", "--replicates", "3",
            "--seed", "1", "--out", str(tmp_path / "sets"), "--population", "uniform",
        )
        assert code == 0
        assert json.loads(out)["datasets"] == 3
        dirs = sorted(p.name for p in (tmp_path / "sets").iterdir())
        assert dirs == ["in_n250_r00", "in_n250_r01", "in_n250_r02"]
        for name in dirs:
            base = tmp_path / "sets" / name
            for fname in ("contacts.csv", "participants.csv", "population.csv", "manifest.json",
                          "truth_intensity.csv", "counts_fine.csv"):
                assert (base / fname).exists()

    def test_bad_scenario_rejected(self, capsys):
        code = main(["simulate", "--scenario", "pre", "--n", "0", "--out", "/tmp/x"])
        captured = capsys.readouterr()
        assert code != 0
        err = json.loads(captured.err)
        assert "error" in err and "message" in err


class TestFitOutputs:
    def test_fit_artifacts(self, pipeline):
        fit = pipeline["fit"]
        assert (fit / "draws.csv").exists()
        assert (fit / "diagnostics.json").exists()
        manifest = json.loads((fit / "manifest.json").read_text())
        assert manifest["config_hash"]
        assert manifest["config"]["model"]["kernel"] == "matern32"
        draws = pd.read_csv(fit / "draws.csv")
        assert draws["chain"].nunique() == 2
        assert len(draws) == 120
        diagnostics = json.loads((fit / "diagnostics.json").read_text())
        assert "max_r_hat" in diagnostics and "elpd" in diagnostics

    def test_fit_fails_cleanly_on_empty_dataset(self, tmp_path, capsys):
        empty = tmp_path / "empty"
        empty.mkdir()
        (empty / "contacts.csv").write_text(
            "wave,repeat,part_age,part_gender,cont_bracket,cont_gender,count\n"
        )
        (empty / "participants.csv").write_text("wave,repeat,age,gender,n\n")
        (empty / "population.csv").write_text("age,gender,pop\n")
        (empty / "manifest.json").write_text(
            json.dumps({"age_range": [6, 49], "brackets": ["6-9", "10-14", "15-19", "20-24", "25-34", "35-44", "45-49"]})
        )
        code = main(["fit", "--data", str(empty), "--out", str(tmp_path / "out")])
        captured = capsys.readouterr()
        assert code != 0
        err = json.loads(captured.err)
        assert "error" in err

    def test_missing_dataset_is_config_error(self, tmp_path, capsys):
        code = main(["fit", "--out", str(tmp_path / "out")])
        captured = capsys.readouterr()
        assert code != 0
        assert json.loads(captured.err)["error"] == "ConfigError"


class TestReportOutputs:
    def test_report_files(self, pipeline):
        report = pipeline["report"]
        for fname in ("intensity.csv", "marginal.csv", "crude.csv", "conditional_age10.csv", "report.json"):
            assert (report / fname).exists()
        payload = json.loads((report / "report.json").read_text())
        assert "mae" in payload  # simulated dataset ships its truth
        assert payload["mae"]["overall"] > 0
        intensity = pd.read_csv(report / "intensity.csv")
        assert {"wave", "part_age", "cont_age", "median", "lower", "upper"} <= set(intensity.columns)
        assert np.all(intensity["lower"] <= intensity["median"] + 1e-12)

    def test_marginal_is_positive(self, pipeline):
        marginal = pd.read_csv(pipeline["report"] / "marginal.csv")
        assert np.all(marginal["median"] > 0)


class TestDiagnose:
    def test_prints_table(self, pipeline, capsys):
        code, out, _ = run_cli(capsys, "diagnose", "--fit", str(pipeline["fit"]))
        assert code == 0
        assert "max R-hat" in out
        assert "beta0" in out
        assert "divergent transitions" in out


def test_round_trip_reproducibility(pipeline, tmp_path):
    """Identical config + seed produce identical draws."""
    fit2 = tmp_path / "fit2"
    code = main(
        [
            "fit",
            "--data", str(pipeline["data"]),
            "--out", str(fit2),
            "--cross-sectional",
            "--param", "diff-in-age",
            "--kernel", "matern32",
            "--m1", "8",
            "--m2", "6",
            "--chains", "2",
            "--warmup", "100",
            "--samples", "60",
            "--seed", "3",
        ]
    )
    assert code == 0
    a = pd.read_csv(pipeline["fit"] / "draws.csv")
    b = pd.read_csv(fit2 / "draws.csv")
    pd.testing.assert_frame_equal(a, b)
    ma = json.loads((pipeline["fit"] / "manifest.json").read_text())
    mb = json.loads((fit2 / "manifest.json").read_text())
    assert ma["config_hash"] == mb["config_hash"] or ma["config"]["output"] != mb["config"]["output"]
