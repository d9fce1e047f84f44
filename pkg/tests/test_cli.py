"""End-to-end command tests against the bundled fixture region, desk-scale."""

import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from elimsurvey.cli import main
from elimsurvey.geodata import GeodataError, read_ascii_grid
from elimsurvey.predict import PredictError
from elimsurvey.evaluate import EvalError

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"
DATA_FILES = ("gazette.csv", "prevalence.csv", "population.asc", "eus.geojson")

LIGHT_CONFIG = """\
seed: 4242
crs: geographic
projection:
  lon0: -58.5
  lat0: 6.0
paths:
  gazette: gazette.csv
  prevalence: prevalence.csv
  raster: population.asc
  eus: eus.geojson
grid:
  spacing: 2.0
model:
  family: exponential
  mu: -3.2
  sigma2: 1.0
  phi: 5.0
fit:
  mc_samples: 1200
  burn_in: 300
  thin: 3
  relaxation_cycles: 1
  profile_points: 5
  profile_halfwidth: 0.8
design:
  k: 4
  m: 60
  delta_min: 4.0
  n_reserve: 2
predict:
  n_draws: 120
evaluate:
  n_replicates: 6
  refit_mode: fixed_corr
  n_pred_draws: 60
  ks: [3]
  ms: [60]
  fit:
    mc_samples: 800
    burn_in: 200
    thin: 2
    relaxation_cycles: 1
simulate:
  n: 30
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    for name in DATA_FILES:
        shutil.copy(FIXTURES / name, base / name)
    (base / "config.yaml").write_text(LIGHT_CONFIG)
    return base


def run(workdir, command, out_name, *extra):
    runner = CliRunner()
    result = runner.invoke(
        main, [command, "--config", str(workdir / "config.yaml"),
               "--out-dir", str(workdir / out_name), *extra])
    return result, workdir / out_name


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def manifest_of(out):
    with open(out / "manifest.json") as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def fit_run(workdir):
    result, out = run(workdir, "fit", "fit_out")
    assert result.exit_code == 0, result.output + str(result.exception)
    return out


@pytest.fixture(scope="module")
def evaluate_run(workdir):
    result, out = run(workdir, "evaluate", "eval_out")
    assert result.exit_code == 0, result.output + str(result.exception)
    return out


@pytest.fixture(scope="module")
def predict_run(workdir):
    result, out = run(workdir, "predict", "pred_out")
    assert result.exit_code == 0, result.output + str(result.exception)
    return out


@pytest.fixture(scope="module")
def design_run(workdir):
    result, out = run(workdir, "design", "des_out")
    assert result.exit_code == 0, result.output + str(result.exception)
    return out


@pytest.fixture(scope="module")
def simulate_run(workdir):
    result, out = run(workdir, "simulate", "sim_out")
    assert result.exit_code == 0, result.output + str(result.exception)
    return out


class TestFit:
    def test_artifacts(self, fit_run):
        for name in ("parameters.csv", "fit_report.txt", "diagnostics.json",
                     "profiles.csv", "fit_profiles.png", "manifest.json"):
            assert (fit_run / name).exists(), name

    def test_parameter_table(self, fit_run):
        rows = read_rows(fit_run / "parameters.csv")
        assert rows[0] == ["parameter", "estimate", "ci_lower", "ci_upper", "status"]
        by_name = {r[0]: r for r in rows[1:]}
        for name in ("mu", "sigma2", "phi"):
            assert by_name[name][4] == "estimated"
            lo, est, hi = (float(by_name[name][i]) for i in (2, 1, 3))
            assert lo < est < hi

    def test_estimates_near_truth(self, fit_run):
        # data were simulated at mu=-3.5, sigma2=1.2, phi=5; a desk-scale
        # chain should land in the right region
        by_name = {r[0]: float(r[1]) for r in read_rows(fit_run / "parameters.csv")[1:]}
        assert -6.0 < by_name["mu"] < -2.0
        assert 0.2 < by_name["sigma2"] < 6.0
        assert 0.5 < by_name["phi"] < 25.0

    def test_diagnostics_json(self, fit_run):
        with open(fit_run / "diagnostics.json") as fh:
            diag = json.load(fh)
        assert "mc_stderr" in diag

    def test_profiles_cover_estimated_parameters(self, fit_run):
        rows = read_rows(fit_run / "profiles.csv")
        assert rows[0] == ["parameter", "value", "rel_loglik"]
        names = {r[0] for r in rows[1:]}
        assert names == {"mu", "sigma2", "phi"}
        # profile deviances are relative to the maximum, so never positive
        assert max(float(r[2]) for r in rows[1:]) <= 1e-9

    def test_manifest(self, fit_run):
        m = manifest_of(fit_run)
        assert m["command"] == "fit"
        assert m["seed"] == 4242
        assert m["outputs"] == sorted(m["outputs"])
        assert set(m["versions"]) == {"elimsurvey", "numpy", "scipy", "matplotlib"}
        assert "workers" not in json.dumps(m)


class TestPredict:
    def test_decisions(self, predict_run):
        rows = read_rows(predict_run / "eu_decisions.csv")
        assert rows[0][:2] == ["eu_id", "q"]
        body = {r[0]: r for r in rows[1:]}
        assert set(body) == {"west", "central", "east"}
        for r in body.values():
            assert 0.0 <= float(r[1]) <= 1.0
            assert r[4] in ("pass", "fail")

    def test_t_samples_shape(self, predict_run):
        rows = read_rows(predict_run / "t_samples.csv")
        assert rows[0] == ["eu_id", "draw", "t"]
        assert len(rows) - 1 == 3 * 120

    def test_surface_rasters(self, predict_run):
        mean = read_ascii_grid(predict_run / "prevalence_mean.asc")
        sd = read_ascii_grid(predict_run / "prevalence_sd.asc")
        assert mean.values.shape == (20, 20)
        finite = mean.values[np.isfinite(mean.values)]
        assert finite.size and (finite >= 0).all() and (finite <= 1).all()
        assert (sd.values[np.isfinite(sd.values)] >= 0).all()

    def test_params_csv_round_trip(self, workdir, fit_run):
        cfg = workdir / "config_fitted.yaml"
        text = LIGHT_CONFIG.replace(
            "predict:\n  n_draws: 120",
            "predict:\n  n_draws: 120\n  params_csv: "
            + str(fit_run / "parameters.csv"))
        cfg.write_text(text)
        runner = CliRunner()
        result = runner.invoke(main, ["predict", "--config", str(cfg),
                                      "--out-dir", str(workdir / "pred_fitted")])
        assert result.exit_code == 0, result.output + str(result.exception)
        rows = read_rows(workdir / "pred_fitted" / "eu_decisions.csv")
        assert len(rows) == 4


class TestDesign:
    def test_row_counts(self, design_run):
        rows = read_rows(design_run / "design.csv")
        assert rows[0] == ["eu_id", "site_id", "target_n", "reserve"]
        body = rows[1:]
        assert len(body) == 3 * (4 + 2)
        for eu in ("west", "central", "east"):
            primaries = [r for r in body if r[0] == eu and r[3] == "false"]
            reserves = [r for r in body if r[0] == eu and r[3] == "true"]
            assert len(primaries) == 4 and len(reserves) == 2

    def test_separation_constraint(self, design_run, workdir):
        sites = {}
        for r in read_rows(workdir / "gazette.csv")[1:]:
            sites[r[0]] = r
        from elimsurvey.geodata import load_gazette, make_projection
        proj = make_projection("geographic", lon0=-58.5, lat0=6.0)
        gaz, _ = load_gazette(workdir / "gazette.csv", projection=proj)
        pos = {s.id: (s.x, s.y) for s in gaz}
        body = read_rows(design_run / "design.csv")[1:]
        for eu in ("west", "central", "east"):
            pts = [pos[r[1]] for r in body if r[0] == eu and r[3] == "false"]
            for i in range(len(pts)):
                for j in range(i + 1, len(pts)):
                    d = np.hypot(pts[i][0] - pts[j][0], pts[i][1] - pts[j][1])
                    assert d >= 4.0 - 1e-9

    def test_geojson(self, design_run):
        with open(design_run / "design.geojson") as fh:
            doc = json.load(fh)
        assert doc["type"] == "FeatureCollection"
        assert len(doc["features"]) == 18

    def test_regularity_table(self, design_run):
        rows = read_rows(design_run / "regularity.csv")
        assert rows[0] == ["eu_id", "min_nn", "mean_nn", "srs_min_nn", "srs_mean_nn"]
        body = {r[0]: [float(v) for v in r[1:]] for r in rows[1:]}
        assert set(body) == {"west", "central", "east"}
        for vals in body.values():
            assert vals[0] >= 4.0 - 1e-9  # regulated min spacing holds

    def test_seed_changes_selection(self, workdir, design_run):
        result, out = run(workdir, "design", "des_seeded", "--seed", "7")
        assert result.exit_code == 0
        assert manifest_of(out)["seed"] == 7
        assert (out / "design.csv").read_bytes() != \
            (design_run / "design.csv").read_bytes()


class TestEvaluate:
    def test_table_and_replicates(self, evaluate_run):
        rows = read_rows(evaluate_run / "npv_table.csv")
        assert rows[0] == ["k", "60"]
        assert rows[1][0] == "3"
        import re
        assert re.fullmatch(r"\d\.\d{3}\((\d\.\d{3}|NA)\)|NA", rows[1][1])
        reps = read_rows(evaluate_run / "replicates.csv")
        assert reps[0] == ["replicate", "eu_id", "true_T", "truth_above", "q",
                           "decision"]
        assert len(reps) - 1 == 6 * 3

    def test_manifest_records_shift(self, evaluate_run):
        m = manifest_of(evaluate_run)
        assert m["command"] == "evaluate"
        assert m["modes"]["refit_mode"] == "fixed_corr"
        shift = float(m["modes"]["intercept_shift"])
        assert float(m["modes"]["shifted_mu"]) == pytest.approx(-3.2 + shift)

    def test_worker_count_invariance(self, workdir, evaluate_run):
        result, out = run(workdir, "evaluate", "eval_out_w2", "--workers", "2")
        assert result.exit_code == 0, result.output + str(result.exception)
        for name in ("npv_table.csv", "replicates.csv", "npv_curves.png",
                     "manifest.json"):
            assert (out / name).read_bytes() == \
                (evaluate_run / name).read_bytes(), name


class TestSimulate:
    def test_panel_files(self, simulate_run):
        labels = ("short_range_rough", "long_range_rough", "long_range_smooth")
        for label in labels:
            field = read_rows(simulate_run / f"field_{label}.csv")
            assert field[0] == ["cell_id", "x", "y", "s", "p"]
            assert len(field) - 1 == 30 * 30
            curve = read_rows(simulate_run / f"curve_{label}.csv")
            assert curve[0] == ["u", "rho"]
            rho = [float(r[1]) for r in curve[1:]]
            assert rho[0] > rho[-1]  # correlation decays with distance
        assert (simulate_run / "simulate_panels.png").read_bytes()[:4] == b"\x89PNG"


def stderr_record(result):
    lines = [l for l in result.stderr.splitlines() if l.strip()]
    return json.loads(lines[-1])


class TestFailureModes:
    def test_missing_config_file(self, tmp_path):
        runner = CliRunner()
        result = runner.invoke(main, ["fit", "--config", str(tmp_path / "no.yaml")])
        assert result.exit_code == 2
        rec = stderr_record(result)
        assert rec["error"] == "config" and rec["exit_code"] == 2

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("seed: 1\nmystery: 3\n")
        runner = CliRunner()
        result = runner.invoke(main, ["design", "--config", str(cfg)])
        assert result.exit_code == 2
        assert stderr_record(result)["key"] == "mystery"

    def test_missing_seed(self, tmp_path):
        cfg = tmp_path / "bad.yaml"
        cfg.write_text("workers: 1\n")
        runner = CliRunner()
        result = runner.invoke(main, ["simulate", "--config", str(cfg)])
        assert result.exit_code == 2
        assert "clock" in stderr_record(result)["message"]

    def test_infeasible_design_exits_4(self, workdir, tmp_path):
        text = LIGHT_CONFIG.replace("delta_min: 4.0", "delta_min: 80.0")
        cfg = workdir / "config_tight.yaml"
        cfg.write_text(text)
        runner = CliRunner()
        result = runner.invoke(main, ["design", "--config", str(cfg),
                                      "--out-dir", str(tmp_path / "o")])
        assert result.exit_code == 4
        rec = stderr_record(result)
        assert rec["error"] == "design" and "delta_min" in rec["message"]

    def test_prediction_domain_exits_3(self, workdir, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise PredictError("evaluation unit 'west' has zero population mass")
        monkeypatch.setattr("elimsurvey.cli.predict_surface", boom)
        runner = CliRunner()
        result = runner.invoke(main, ["predict", "--config",
                                      str(workdir / "config.yaml"),
                                      "--out-dir", str(tmp_path / "o")])
        assert result.exit_code == 3
        assert stderr_record(result)["error"] == "predict"

    def test_population_mass_geodata_error_exits_3(self, workdir, tmp_path,
                                                   monkeypatch):
        def boom(*a, **k):
            raise GeodataError("evaluation unit 'west' has zero population mass")
        monkeypatch.setattr("elimsurvey.cli.predict_surface", boom)
        runner = CliRunner()
        result = runner.invoke(main, ["predict", "--config",
                                      str(workdir / "config.yaml"),
                                      "--out-dir", str(tmp_path / "o")])
        assert result.exit_code == 3

    def test_other_geodata_error_exits_2(self, workdir, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise GeodataError("malformed row")
        monkeypatch.setattr("elimsurvey.cli.predict_surface", boom)
        runner = CliRunner()
        result = runner.invoke(main, ["predict", "--config",
                                      str(workdir / "config.yaml"),
                                      "--out-dir", str(tmp_path / "o")])
        assert result.exit_code == 2

    def test_evaluation_abort_exits_5(self, workdir, tmp_path, monkeypatch):
        def boom(*a, **k):
            raise EvalError("14 of 20 replicates failed to fit")
        monkeypatch.setattr("elimsurvey.cli.npv_table", boom)
        runner = CliRunner()
        result = runner.invoke(main, ["evaluate", "--config",
                                      str(workdir / "config.yaml"),
                                      "--out-dir", str(tmp_path / "o")])
        assert result.exit_code == 5
        rec = stderr_record(result)
        assert rec["error"] == "evaluate" and rec["exit_code"] == 5


class TestRerunDeterminism:
    def test_fit_rerun_binary_identical(self, workdir, fit_run):
        result, out = run(workdir, "fit", "fit_out_b")
        assert result.exit_code == 0
        for p in sorted(fit_run.iterdir()):
            assert (out / p.name).read_bytes() == p.read_bytes(), p.name

    def test_config_hash_stable_across_out_dirs(self, workdir, fit_run):
        m1 = manifest_of(fit_run)
        m2 = manifest_of(workdir / "fit_out_b")
        assert m1 == m2
