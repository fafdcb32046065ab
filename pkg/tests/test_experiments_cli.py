import csv
import json

import numpy as np
import pytest
import yaml

from truncml.cli import main
from truncml.estimation import FitConfig, FitResult, fit
from truncml.experiments import (
    ConfigError,
    dump_config,
    load_config,
    parse_config,
    replicate_seeds,
    run_experiment,
    standardized_error,
    validate,
)
from truncml.grid import GridSpec, SiteSet, generate
from truncml.likelihood import LikelihoodContext
from truncml.models import WendlandModel
from truncml.simulation import SimSpec, simulate
from truncml.wendland import SmoothnessConfig, ThetaBox

SMALL = {
    "kind": "mc-consistency",
    "seed": 17,
    "replicates": 1,
    "n_sweep": [30, 60],
    "families": ["exact", "linear_interp"],
    "fit": {"starts": 1},
}


def write_yaml(path, data):
    path.write_text(yaml.safe_dump(data))
    return str(path)


class TestConfig:
    def test_defaults(self):
        cfg = parse_config({"kind": "mc-normality"})
        assert cfg.raw["grid"] == {"d": 2, "tau": 0.3}
        assert cfg.box == ThetaBox(0.5, 2.0, 1.0, 2.6)
        assert cfg.fit_config == FitConfig()

    def test_round_trip(self):
        cfg = parse_config(SMALL)
        again = parse_config(yaml.safe_load(dump_config(cfg)))
        assert again == cfg
        assert dump_config(again) == dump_config(cfg)

    def test_missing_kind(self):
        with pytest.raises(ConfigError) as exc:
            parse_config({"seed": 1})
        assert any(p[1] == "kind" for p in exc.value.problems)

    def test_unknown_key_and_bad_values(self):
        with pytest.raises(ConfigError) as exc:
            parse_config({"kind": "fit", "colour": 1, "grid": {"tau": 0.7}, "replicates": 0})
        fields = {p[1] for p in exc.value.problems}
        assert {"colour", "grid.tau", "replicates", "data"} <= fields

    def test_line_numbers(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("kind: mc-consistency\nseed: 3\ngrid:\n  d: 2\n  tau: 0.9\n")
        with pytest.raises(ConfigError) as exc:
            load_config(path)
        assert (5, "grid.tau") == exc.value.problems[0][:2]

    def test_yaml_syntax_error(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("kind: [unclosed\n")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_overrides(self):
        cfg = parse_config(SMALL).with_overrides(seed=5, out_dir="elsewhere")
        assert cfg.raw["seed"] == 5 and cfg.raw["output"]["dir"] == "elsewhere"


class TestValidate:
    def test_beta_min_below_spacing(self):
        cfg = parse_config({"kind": "mc-consistency", "theta_box": {"sigma2": [0.5, 2.0], "beta": [0.3, 2.6]}})
        assert any("0.3" in v and "0.4" in v for v in validate(cfg)["violations"])

    def test_normality_needs_kappa_above_four(self):
        cfg = parse_config({"kind": "mc-normality", "model": {"nu": 9.0, "kappa": 3.0}})
        assert any("kappa > 4" in w for w in validate(cfg)["warnings"])

    def test_valid(self):
        rep = validate(parse_config({"kind": "mc-normality"}))
        assert rep == {"violations": [], "warnings": []}

    def test_theta0_outside_box(self):
        cfg = parse_config({"kind": "mc-consistency", "model": {"theta0": [3.0, 1.8]}})
        assert validate(cfg)["violations"]


def test_replicate_seeds():
    a = replicate_seeds(99, 5)
    assert a == replicate_seeds(99, 5)
    assert a[:2] == replicate_seeds(99, 2)
    assert len({s for pair in a for s in pair}) == 10


def test_standardized_error():
    res = FitResult(np.array([1.5, 2.0]), 0.0, np.diag([4.0, 9.0]), np.eye(2), 25, True, 1.0)
    np.testing.assert_allclose(standardized_error(res, [1.0, 1.0]), [5 * 2 * 0.5, 5 * 3 * 1.0])
    res.fisher_at_hat = np.full((2, 2), np.nan)
    assert np.all(np.isnan(standardized_error(res, [1.0, 1.0])))


class TestRunExperiment:
    def test_mc_rows_and_summary(self):
        rows, summary, errors = run_experiment(parse_config(SMALL))
        assert errors == [] and len(rows) == 4
        fam = summary["families"]["exact"]["by_n"]
        assert set(fam) == {"30", "60"} and fam["30"]["replicates"] == 1

    def test_approx_error(self):
        cfg = parse_config(
            {"kind": "approx-error", "families": ["nugget"], "approx_error": {"m_values": [10, 20], "n_theta": 2}}
        )
        _, summary, _ = run_experiment(cfg)
        assert summary["families"]["nugget"]["sup_error"] == pytest.approx([0.1, 0.05])

    def test_kl_study_small(self):
        cfg = parse_config(
            {
                "kind": "kl-study",
                "n_sweep": [30],
                "fit": {"starts": 1},
                "taper": {"m_values": [10, 100], "grid_points": 2, "scan_points": 3},
            }
        )
        rows, summary, errors = run_experiment(cfg)
        assert errors == [] and len(rows) == 1
        gaps = summary["kl_gaps"]["30"]["sup_gap"]
        assert len(gaps) == 2 and gaps[1] < gaps[0]

    def test_simulate_outputs(self, tmp_path):
        cfg = parse_config({"kind": "simulate", "n_sweep": [20], "replicates": 3})
        _, summary, _ = run_experiment(cfg, out_dir=str(tmp_path))
        assert summary["n"] == 20
        for name in ("simulate_sites.csv", "simulate_fields.csv", "simulate_fields.bin", "simulate_summary.json"):
            assert (tmp_path / name).exists()


class TestCLI:
    def test_deterministic_outputs(self, tmp_path):
        cfg = write_yaml(tmp_path / "c.yaml", SMALL)
        outs = []
        for tag in ("a", "b"):
            out = tmp_path / tag
            assert main(["mc-consistency", "--config", cfg, "--out", str(out)]) == 0
            outs.append(out)
        for name in ("mc-consistency_estimates.csv", "mc-consistency_summary.json", "mc-consistency_long.csv"):
            assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()

    def test_thread_count_does_not_matter(self, tmp_path):
        data = dict(SMALL, replicates=2, n_sweep=[30], families=["exact"])
        cfg = write_yaml(tmp_path / "c.yaml", data)
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "one"), "--threads", "1"]) == 0
        assert main(["run", "--config", cfg, "--out", str(tmp_path / "two"), "--threads", "2"]) == 0
        name = "mc-consistency_estimates.csv"
        assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()

    def test_fit_reproduces_library(self, tmp_path):
        sites = generate(GridSpec(2, 0.3, 80, seed=3))
        smooth = SmoothnessConfig(9.0, 4.5, 2)
        z = simulate(SimSpec(sites, WendlandModel(smooth), (1.0, 1.8), 1, 4))[0]
        data = tmp_path / "data.csv"
        with open(data, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x1", "x2", "value"])
            for (a, b), v in zip(sites.coords, z):
                w.writerow([repr(float(a)), repr(float(b)), repr(float(v))])
        cfg = write_yaml(tmp_path / "c.yaml", {"kind": "fit", "data": str(data), "families": ["exact"]})
        assert main(["fit", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
        summary = json.loads((tmp_path / "out" / "fit_summary.json").read_text())
        ctx = LikelihoodContext(SiteSet(sites.coords, 0.3), z, WendlandModel(smooth), ThetaBox(0.5, 2.0, 1.0, 2.6))
        lib = fit(ctx)
        assert summary["fits"]["exact"]["theta_hat"] == [float(v) for v in lib.theta_hat]

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("kind: mc-consistency\nreplicates: -1\n")
        assert main(["run", "--config", str(path)]) == 2
        assert f"{path}:2: replicates:" in capsys.readouterr().err

    def test_missing_file_exit_code(self, tmp_path):
        assert main(["run", "--config", str(tmp_path / "nope.yaml")]) == 2

    def test_bad_flag_exit_code(self, tmp_path):
        assert main(["run", "--config", "x.yaml", "--threads", "0"]) == 2

    def test_runtime_failure_exit_code(self, tmp_path):
        data = tmp_path / "data.csv"
        data.write_text("x1,x2,z\n1,1,0.5\n")
        cfg = write_yaml(tmp_path / "c.yaml", {"kind": "fit", "data": str(data)})
        out = tmp_path / "out"
        assert main(["run", "--config", cfg, "--out", str(out)]) == 3
        assert "expected columns" in (out / "fit_errors.log").read_text()

    def test_validate_subcommand(self, tmp_path, capsys):
        cfg = write_yaml(tmp_path / "c.yaml", {"kind": "mc-normality", "model": {"kappa": 3.0, "nu": 9.0}})
        assert main(["validate", "--config", cfg]) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["violations"] == [] and len(report["warnings"]) == 1

    def test_environment_overrides(self, tmp_path, monkeypatch):
        cfg = write_yaml(tmp_path / "c.yaml", {"kind": "approx-error", "families": ["nugget"]})
        monkeypatch.setenv("TRUNCML_OUT", str(tmp_path / "env"))
        monkeypatch.setenv("TRUNCML_SEED", "12")
        assert main(["run", "--config", cfg]) == 0
        assert (tmp_path / "env" / "approx-error_summary.json").exists()
