import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mixprod import DiscreteMixturePanel, PanelData, joint_from_system
from mixprod.cli import main, model_to_dict

from conftest import make_discrete_system, make_one_type_model


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


def base_sim_config(tmp_path, **overrides):
    doc = {
        "schema_version": 1,
        "n_firms": 60,
        "T": 4,
        "seed": 5,
        "model": model_to_dict(make_one_type_model()),
        "out_panel": str(tmp_path / "panel.csv"),
    }
    doc.update(overrides)
    return doc


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture()
def sim_panel(tmp_path):
    cfg = write_json(tmp_path / "sim.json", base_sim_config(tmp_path))
    assert main(["simulate", "--config", cfg]) == 0
    return str(tmp_path / "panel.csv")


class TestConfigSchema:
    def test_missing_schema_version(self, tmp_path):
        cfg = base_sim_config(tmp_path)
        del cfg["schema_version"]
        path = write_json(tmp_path / "c.json", cfg)
        assert main(["simulate", "--config", path]) == 1

    def test_wrong_schema_version(self, tmp_path):
        cfg = base_sim_config(tmp_path, schema_version=2)
        path = write_json(tmp_path / "c.json", cfg)
        assert main(["simulate", "--config", path]) == 1

    def test_unknown_key_rejected(self, tmp_path):
        cfg = base_sim_config(tmp_path, extra_knob=1)
        path = write_json(tmp_path / "c.json", cfg)
        assert main(["simulate", "--config", path]) == 1

    def test_missing_required_key(self, tmp_path):
        cfg = base_sim_config(tmp_path)
        del cfg["out_panel"]
        path = write_json(tmp_path / "c.json", cfg)
        assert main(["simulate", "--config", path]) == 1

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text("{not json")
        assert main(["simulate", "--config", str(path)]) == 1

    def test_missing_config_file(self, tmp_path):
        assert main(["simulate", "--config", str(tmp_path / "nope.json")]) == 1

    def test_bad_arguments(self):
        assert main(["not-a-command"]) == 1
        assert main(["simulate"]) == 1


class TestSimulate:
    def test_deterministic_output(self, tmp_path):
        cfg = write_json(tmp_path / "sim.json", base_sim_config(tmp_path))
        assert main(["simulate", "--config", cfg]) == 0
        first = (tmp_path / "panel.csv").read_bytes()
        assert main(["simulate", "--config", cfg]) == 0
        assert (tmp_path / "panel.csv").read_bytes() == first

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = write_json(tmp_path / "sim.json", base_sim_config(tmp_path))
        assert main(["simulate", "--config", cfg]) == 0
        first = (tmp_path / "panel.csv").read_bytes()
        assert main(["simulate", "--config", cfg, "--seed", "99"]) == 0
        assert (tmp_path / "panel.csv").read_bytes() != first

    def test_out_flag_redirects_panel(self, tmp_path):
        cfg = write_json(tmp_path / "sim.json", base_sim_config(tmp_path))
        other = tmp_path / "other.csv"
        assert main(["simulate", "--config", cfg, "--out", str(other)]) == 0
        assert other.exists()
        panel = PanelData.from_csv(other)
        assert panel.n_firms == 60

    def test_truth_round_trips(self, tmp_path):
        cfg = write_json(
            tmp_path / "sim.json",
            base_sim_config(tmp_path, out_truth=str(tmp_path / "truth.json")),
        )
        assert main(["simulate", "--config", cfg]) == 0
        doc = json.loads((tmp_path / "truth.json").read_text())
        assert doc["pi"] == [1.0]


class TestFit:
    def test_fit_writes_result_and_posterior(self, tmp_path, sim_panel):
        cfg = write_json(tmp_path / "fit.json", {
            "schema_version": 1,
            "panel": sim_panel,
            "J": 1,
            "out_result": str(tmp_path / "result.json"),
            "out_posterior": str(tmp_path / "post.csv"),
        })
        assert main(["fit", "--config", cfg]) == 0
        doc = json.loads((tmp_path / "result.json").read_text())
        assert doc["schema_version"] == 1
        assert doc["non_converged"] is False
        assert "beta_m_type1" in doc["parameters"]
        rows = read_rows(tmp_path / "post.csv")
        assert len(rows) == 61

    def test_rejects_non_positive_J(self, tmp_path, sim_panel):
        cfg = write_json(tmp_path / "fit.json", {
            "schema_version": 1, "panel": sim_panel, "J": 0,
            "out_result": str(tmp_path / "r.json"),
        })
        assert main(["fit", "--config", cfg]) == 1

    def test_bad_panel_is_data_error(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("firm_id,t,y\n1,1,0.0\n")
        cfg = write_json(tmp_path / "fit.json", {
            "schema_version": 1, "panel": str(bad), "J": 1,
            "out_result": str(tmp_path / "r.json"),
        })
        assert main(["fit", "--config", cfg]) == 2

    def test_unknown_settings_key(self, tmp_path, sim_panel):
        cfg = write_json(tmp_path / "fit.json", {
            "schema_version": 1, "panel": sim_panel, "J": 1,
            "settings": {"n_iterations": 5},
            "out_result": str(tmp_path / "r.json"),
        })
        assert main(["fit", "--config", cfg]) == 1


class TestIdentify:
    def test_exact_system_recovery(self, tmp_path):
        truth = make_discrete_system(2, 4, 3)
        truth.save_json(tmp_path / "system.json")
        cfg = write_json(tmp_path / "id.json", {
            "schema_version": 1,
            "system": str(tmp_path / "system.json"),
            "J": 2,
            "out": str(tmp_path / "recovered.json"),
        })
        assert main(["identify", "--config", cfg]) == 0
        doc = json.loads((tmp_path / "recovered.json").read_text())
        assert sorted(np.round(doc["pi_hat"], 6)) == pytest.approx(
            sorted(truth.pi), abs=1e-6)

    def test_sampled_system(self, tmp_path):
        truth = make_discrete_system(2, 4, 3)
        truth.save_json(tmp_path / "system.json")
        cfg = write_json(tmp_path / "id.json", {
            "schema_version": 1,
            "system": str(tmp_path / "system.json"),
            "J": 2, "n_draws": 200000, "seed": 4,
            "out": str(tmp_path / "recovered.json"),
        })
        assert main(["identify", "--config", cfg]) == 0
        doc = json.loads((tmp_path / "recovered.json").read_text())
        assert sorted(np.asarray(doc["pi_hat"])) == pytest.approx(
            sorted(truth.pi), abs=0.05)

    def test_requires_exactly_one_input(self, tmp_path, sim_panel):
        truth = make_discrete_system(2, 4, 3)
        truth.save_json(tmp_path / "system.json")
        cfg = write_json(tmp_path / "id.json", {
            "schema_version": 1,
            "system": str(tmp_path / "system.json"),
            "panel": sim_panel,
            "J": 2, "out": str(tmp_path / "r.json"),
        })
        assert main(["identify", "--config", cfg]) == 1

    def test_panel_discretization_path(self, tmp_path, sim_panel):
        cfg = write_json(tmp_path / "id.json", {
            "schema_version": 1,
            "panel": sim_panel,
            "J": 1, "n_bins": 2,
            "out": str(tmp_path / "recovered.json"),
        })
        assert main(["identify", "--config", cfg]) == 0
        doc = json.loads((tmp_path / "recovered.json").read_text())
        assert doc["pi_hat"] == pytest.approx([1.0], abs=1e-6)


class TestRankcheck:
    def test_default_points(self, tmp_path):
        make_discrete_system(2, 5, 11).save_json(tmp_path / "system.json")
        cfg = write_json(tmp_path / "rc.json", {
            "schema_version": 1,
            "system": str(tmp_path / "system.json"),
            "out": str(tmp_path / "report.csv"),
        })
        assert main(["rankcheck", "--config", cfg]) == 0
        rows = dict((r[0], r[1]) for r in read_rows(tmp_path / "report.csv")[1:])
        assert rows["ok"] == "True"

    def test_explicit_degenerate_points(self, tmp_path):
        make_discrete_system(3, 6, 5).save_json(tmp_path / "system.json")
        cfg = write_json(tmp_path / "rc.json", {
            "schema_version": 1,
            "system": str(tmp_path / "system.json"),
            "points": {
                "a_points": [0, 2, 4], "b_points": [0, 0],
                "z2_pair": [0, 1], "z3": 2, "z3_bar": 0, "z3_star": 2,
            },
            "out": str(tmp_path / "report.csv"),
        })
        assert main(["rankcheck", "--config", cfg]) == 0
        rows = dict((r[0], r[1]) for r in read_rows(tmp_path / "report.csv")[1:])
        assert rows["ok"] == "False"


class TestAnalyze:
    def test_classification_and_statistics(self, tmp_path, sim_panel):
        fit_cfg = write_json(tmp_path / "fit.json", {
            "schema_version": 1, "panel": sim_panel, "J": 1,
            "out_result": str(tmp_path / "typed.json"),
        })
        assert main(["fit", "--config", fit_cfg]) == 0
        inv_path = tmp_path / "investment.csv"
        panel = PanelData.from_csv(sim_panel)
        rng = np.random.default_rng(0)
        with open(inv_path, "w") as fh:
            fh.write("firm_id,t,value\n")
            for i, fid in enumerate(panel.firm_ids):
                for t in range(1, panel.T + 1):
                    fh.write(f"{fid},{t},{rng.random():.6f}\n")
        cfg = write_json(tmp_path / "an.json", {
            "schema_version": 1,
            "panel": sim_panel,
            "typed_result": str(tmp_path / "typed.json"),
            "pooled_result": str(tmp_path / "typed.json"),
            "investment": str(inv_path),
            "out_prefix": str(tmp_path / "run"),
        })
        assert main(["analyze", "--config", cfg]) == 0
        cls = read_rows(tmp_path / "run_classification.csv")
        assert cls[0] == ["firm_id", "type"]
        assert len(cls) == 61 and all(r[1] == "1" for r in cls[1:])
        stats = read_rows(tmp_path / "run_analysis.csv")
        names = {r[1] for r in stats[1:]}
        assert "mean_abs_bias_ratio" in names
        assert "alpha_omega_ols" in names
        assert "dispersion_sm_90_10" in names
        assert "dispersion_residualized_90_10" in names


class TestMonteCarlo:
    def montecarlo_config(self, tmp_path, tolerances):
        return write_json(tmp_path / "mc.json", {
            "schema_version": 1,
            "n_reps": 2, "n_firms": 150, "T": 4, "J": 1,
            "model": model_to_dict(make_one_type_model()),
            "seed": 11,
            "tolerances": tolerances,
            "out": str(tmp_path / "mc.csv"),
        })

    def test_passing_tolerances(self, tmp_path):
        cfg = self.montecarlo_config(tmp_path, {"beta_m_type1": 0.05})
        assert main(["montecarlo", "--config", cfg]) == 0
        rows = read_rows(tmp_path / "mc.csv")
        assert rows[0][0] == "parameter"
        by_name = {r[0]: r for r in rows[1:]}
        assert by_name["beta_m_type1"][5] == "pass"
        assert float(by_name["beta_m_type1"][3]) < 0.05

    def test_failing_tolerance_sets_exit_code(self, tmp_path):
        cfg = self.montecarlo_config(tmp_path, {"beta_m_type1": 1e-12})
        assert main(["montecarlo", "--config", cfg]) == 4
        rows = read_rows(tmp_path / "mc.csv")
        by_name = {r[0]: r for r in rows[1:]}
        assert by_name["beta_m_type1"][5] == "fail"


class TestConsoleScript:
    def test_entry_point_runs(self):
        proc = subprocess.run(
            [sys.executable, "-m", "mixprod.cli", "--help"],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0
        assert "simulate" in proc.stdout
