import csv
import math
import re

import numpy as np
import pytest
from scipy.special import expit, logit

from elimsurvey.corrfun import CorrelationSpec
from elimsurvey.design import DesignSpec, stratified_design
from elimsurvey.evaluate import (
    EuReplicate,
    EvalConfig,
    EvalError,
    evaluate_design,
    npv_table,
    shift_intercept,
    simulate_survey,
    summarise_rows,
    write_replicates,
)
from elimsurvey.fit import FitConfig
from elimsurvey.geodata import PredictionGrid, SiteRecord
from elimsurvey.gpfield import FieldRealisation, FieldSampler, ModelParams
from elimsurvey.streams import stream


def square_grid(n=8, eu_split=True):
    ix, iy = np.meshgrid(np.arange(n), np.arange(n))
    xs = ix.ravel() + 0.5
    ys = iy.ravel() + 0.5
    if eu_split:
        eu = ["A" if x < n / 2 else "B" for x in xs]
    else:
        eu = ["A"] * (n * n)
    return PredictionGrid(cell_ids=np.arange(n * n), xs=xs, ys=ys,
                          pd=np.ones(n * n), eu_ids=eu, spacing=1.0,
                          nx=n, ny=n, x0=0.0, y0=0.0)


def exp_params(mu, sigma2, phi):
    return ModelParams(mu=mu, sigma2=sigma2,
                       corr=CorrelationSpec("exponential", phi=phi))


def scatter_sites(n_sites, extent, seed, eu_of=None):
    rng = np.random.default_rng(seed)
    sites = []
    for i in range(n_sites):
        x = float(rng.uniform(0.3, extent - 0.3))
        y = float(rng.uniform(0.3, extent - 0.3))
        eu = eu_of(x, y) if eu_of else "A"
        sites.append(SiteRecord(id=f"s{i:02d}", name=f"site {i}", lon=-58.0,
                                lat=6.0, x=x, y=y, population=800,
                                inhabited=True, eu_id=eu))
    return sites


# ---------------------------------------------------------------------------
# shift_intercept


class TestShiftIntercept:
    def test_degenerate_variance_is_analytic(self):
        params = exp_params(-2.0, 1e-12, 1.5)
        shifted, delta = shift_intercept(params, square_grid(4), 0.01)
        assert shifted.mu == float(logit(0.01))
        assert delta == shifted.mu - params.mu

    def test_fresh_draws_hit_target(self):
        grid = square_grid(10)
        params = exp_params(-3.0, 1.2, 2.0)
        shifted, _ = shift_intercept(params, grid, 0.01, seed=1)
        sampler = FieldSampler(shifted, grid.points())
        _, p = sampler.draw_many(stream(999, "fresh"), 400)
        assert 0.009 <= float(np.mean(p)) <= 0.011

    def test_deterministic(self):
        grid = square_grid(6)
        params = exp_params(-4.0, 1.0, 1.5)
        _, d1 = shift_intercept(params, grid, 0.01, seed=3)
        _, d2 = shift_intercept(params, grid, 0.01, seed=3)
        assert d1 == d2

    def test_population_weighting_matches_contract(self):
        grid = square_grid(6)
        pd = np.linspace(0.5, 4.0, grid.n_cells)
        grid = PredictionGrid(cell_ids=grid.cell_ids, xs=grid.xs, ys=grid.ys,
                              pd=pd, eu_ids=grid.eu_ids, spacing=grid.spacing,
                              nx=grid.nx, ny=grid.ny, x0=grid.x0, y0=grid.y0)
        params = exp_params(-4.0, 1.0, 1.5)
        shifted, _ = shift_intercept(params, grid, 0.01, weighting="population",
                                     seed=5, n_draws=300)
        sampler = FieldSampler(params, grid.points())
        s, _ = sampler.draw_many(stream(5, "shift-fields"), 300)
        w = pd / pd.sum()
        achieved = float(np.mean(expit(s + (shifted.mu - params.mu)), axis=0) @ w)
        assert abs(achieved - 0.01) <= 1e-4

    def test_uniform_weights_match_areal(self):
        grid = square_grid(6)
        params = exp_params(-4.0, 1.0, 1.5)
        _, d_areal = shift_intercept(params, grid, 0.01, seed=2)
        _, d_pop = shift_intercept(params, grid, 0.01, weighting="population", seed=2)
        assert d_areal == d_pop

    def test_unreachable_target_raises(self):
        params = exp_params(-4.0, 1.0, 1.5)
        with pytest.raises(EvalError, match="bracket"):
            shift_intercept(params, square_grid(4), 1e-16)

    def test_bad_weighting(self):
        params = exp_params(-4.0, 1.0, 1.5)
        with pytest.raises(EvalError, match="weighting"):
            shift_intercept(params, square_grid(4), 0.01, weighting="median")


# ---------------------------------------------------------------------------
# simulate_survey


def tiny_design(sites, k, m, seed=2, delta=0.5, n_reserve=1):
    return stratified_design(sites, DesignSpec(k=k, m=m, delta_min=delta,
                                               n_reserve=n_reserve, seed=seed))


def point_realisation(points, s_values):
    s = np.asarray(s_values, dtype=float)
    return FieldRealisation(points=np.asarray(points, dtype=float),
                            s_values=s, p_values=expit(s), seed=0)


class TestSimulateSurvey:
    def test_degenerate_prevalence(self):
        sites = [
            SiteRecord(id="a", name="a", lon=0, lat=0, x=0.0, y=0.0,
                       population=500, inhabited=True, eu_id="A"),
            SiteRecord(id="b", name="b", lon=0, lat=0, x=5.0, y=0.0,
                       population=500, inhabited=True, eu_id="A"),
        ]
        design = tiny_design(sites, k=2, m=40, n_reserve=0)
        pts = [[0.0, 0.0], [5.0, 0.0]]
        sure_zero = point_realisation(pts, [-800.0, -800.0])
        assert sure_zero.p_values.min() == 0.0
        recs = simulate_survey(sure_zero, design, stream(1, "svy"))
        assert all(r.n_positive == 0 for r in recs)
        sure_one = point_realisation(pts, [800.0, 800.0])
        recs = simulate_survey(sure_one, design, stream(1, "svy"))
        assert all(r.n_positive == r.n_tested for r in recs)

    def test_binomial_moments(self):
        site = SiteRecord(id="a", name="a", lon=0, lat=0, x=1.0, y=1.0,
                          population=500, inhabited=True, eu_id="A")
        design = tiny_design([site], k=1, m=100, n_reserve=0)
        real = point_realisation([[1.0, 1.0]], [float(logit(0.01))])
        rng = stream(7, "moments")
        ys = [simulate_survey(real, design, rng)[0].n_positive for _ in range(10000)]
        assert abs(np.mean(ys) - 1.0) <= 0.03

    def test_grid_lookup_uses_containing_cell(self):
        grid = square_grid(4, eu_split=False)
        s = np.full(grid.n_cells, -800.0)
        hot = grid.cell_at(2.2, 3.7)
        s[hot] = 800.0
        real = FieldRealisation(points=grid.points(), s_values=s,
                                p_values=expit(s), seed=0, grid=grid)
        site = SiteRecord(id="a", name="a", lon=0, lat=0, x=2.2, y=3.7,
                          population=500, inhabited=True, eu_id="A")
        design = tiny_design([site], k=1, m=60, n_reserve=0)
        recs = simulate_survey(real, design, stream(2, "svy"))
        assert recs[0].n_positive == recs[0].n_tested == 60

    def test_reserves_not_surveyed(self):
        sites = scatter_sites(10, 6.0, seed=9)
        design = tiny_design(sites, k=3, m=30, n_reserve=2)
        n_primary = sum(1 for row in design.rows() if not row.reserve)
        real = point_realisation([[s.x, s.y] for s in sites],
                                 [-4.0] * len(sites))
        recs = simulate_survey(real, design, stream(3, "svy"))
        assert len(recs) == n_primary == 3

    def test_missing_point_raises(self):
        site = SiteRecord(id="a", name="a", lon=0, lat=0, x=9.0, y=9.0,
                          population=500, inhabited=True, eu_id="A")
        design = tiny_design([site], k=1, m=30, n_reserve=0)
        real = point_realisation([[1.0, 1.0]], [-4.0])
        with pytest.raises(EvalError, match="no simulated value"):
            simulate_survey(real, design, stream(4, "svy"))


# ---------------------------------------------------------------------------
# aggregation


def row(replicate, eu, above, decision, t=0.02, q=0.5):
    return EuReplicate(replicate=replicate, eu_id=eu, true_T=t,
                       truth_above=above, q=q, decision=decision)


class TestSummaries:
    def test_npv_two_of_three(self):
        rows = [row(0, "A", True, "fail"), row(1, "A", True, "fail"),
                row(2, "A", False, "fail")]
        agg = summarise_rows(rows)
        assert agg["npv"] == pytest.approx(2 / 3)
        assert agg["npv_stderr"] == pytest.approx(math.sqrt((2 / 3) * (1 / 3) / 3))
        assert agg["ppv"] is None and agg["ppv_stderr"] is None

    def test_always_fail_rule(self):
        rows = [row(i, "A", i % 3 == 0, "fail") for i in range(9)]
        agg = summarise_rows(rows)
        assert agg["ppv"] is None
        assert agg["npv"] == pytest.approx(3 / 9)

    def test_complement_identities(self):
        rng = np.random.default_rng(0)
        rows = [row(i, "A", bool(rng.integers(2)),
                    "pass" if rng.integers(2) else "fail") for i in range(40)]
        agg = summarise_rows(rows)
        n_for = sum(1 for r in rows if r.decision == "fail" and not r.truth_above)
        n_fdr = sum(1 for r in rows if r.decision == "pass" and r.truth_above)
        assert agg["npv"] + n_for / agg["n_fail"] == pytest.approx(1.0)
        assert agg["ppv"] + n_fdr / agg["n_pass"] == pytest.approx(1.0)

    def test_order_invariant(self):
        rng = np.random.default_rng(1)
        rows = [row(i, "B", bool(rng.integers(2)),
                    "pass" if rng.integers(2) else "fail") for i in range(20)]
        shuffled = list(rows)
        rng.shuffle(shuffled)
        assert summarise_rows(rows) == summarise_rows(shuffled)

    def test_writer_layout(self, tmp_path):
        rows = [row(0, "A", True, "fail", t=0.0123, q=0.25),
                row(0, "B", False, "pass", t=0.004, q=0.99)]
        path = tmp_path / "reps.csv"
        write_replicates(rows, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "replicate,eu_id,true_T,truth_above,q,decision"
        assert lines[1].split(",") == ["0", "A", "0.0123", "true", "0.25", "fail"]
        assert len(lines) == 3


# ---------------------------------------------------------------------------
# the evaluation loop


@pytest.fixture(scope="module")
def eval_setup():
    grid = square_grid(8)
    sites = scatter_sites(24, 8.0, seed=0,
                          eu_of=lambda x, y: "A" if x < 4 else "B")
    params, _ = shift_intercept(exp_params(-4.0, 1.0, 1.5), grid, 0.01, seed=1)
    fit_cfg = FitConfig(mc_samples=600, burn_in=200, thin=2, relaxation_cycles=1)
    return grid, sites, params, fit_cfg


@pytest.fixture(scope="module")
def small_result(eval_setup):
    grid, sites, params, fit_cfg = eval_setup
    design = tiny_design(sites, k=3, m=30, delta=0.6)
    cfg = EvalConfig(grid=grid, n_replicates=10, refit_mode="fixed_corr",
                     n_pred_draws=60, seed=11, fit_config=fit_cfg)
    return design, cfg, params, evaluate_design(design, params, cfg)


class TestEvaluateDesign:
    def test_row_shape_and_ranges(self, small_result):
        design, cfg, params, res = small_result
        assert res.n_fit_failures == 0
        assert len(res.rows) == cfg.n_replicates * 2
        for r in res.rows:
            assert 0.0 <= r.q <= 1.0
            assert 0.0 < r.true_T < 1.0
            assert r.decision in ("pass", "fail")
            expected = "pass" if r.q >= cfg.q_cut else "fail"
            assert r.decision == expected

    def test_truth_comes_from_generator_surface(self, small_result, eval_setup):
        grid, _, _, _ = eval_setup
        design, cfg, params, res = small_result
        sampler = FieldSampler(params, grid.points())
        _, p = sampler.draw(stream(cfg.seed, "field", 0))
        for eu in ("A", "B"):
            idx = grid.cells_in_eu(eu)
            w = grid.pd[idx]
            want = float(p[idx] @ (w / w.sum()))
            got = [r.true_T for r in res.rows if r.replicate == 0 and r.eu_id == eu]
            assert got == [want]

    def test_aggregates_match_rows(self, small_result):
        _, _, _, res = small_result
        agg = summarise_rows(res.rows)
        assert (res.npv, res.ppv) == (agg["npv"], agg["ppv"])
        assert (res.n_pass, res.n_fail) == (agg["n_pass"], agg["n_fail"])
        assert res.n_pass + res.n_fail == len(res.rows)

    def test_deterministic(self, small_result):
        design, cfg, params, res = small_result
        again = evaluate_design(design, params, cfg)
        assert again.rows == res.rows

    def test_worker_count_does_not_change_result(self, small_result):
        design, cfg, params, res = small_result
        parallel = evaluate_design(design, params, cfg, workers=3)
        assert parallel.rows == res.rows
        assert (parallel.npv, parallel.ppv) == (res.npv, res.ppv)

    def test_all_zero_surveys_fall_back(self, eval_setup):
        grid, sites, _, fit_cfg = eval_setup
        design = tiny_design(sites, k=3, m=30, delta=0.6)
        rare = exp_params(-13.0, 0.5, 1.5)
        cfg = EvalConfig(grid=grid, n_replicates=3, refit_mode="full_mcml",
                         n_pred_draws=40, seed=7, fit_config=fit_cfg)
        res = evaluate_design(design, rare, cfg)
        assert res.diagnostics["fallback_fixed_corr"] == 3
        assert res.n_fit_failures == 0
        assert all(r.decision == "pass" and not r.truth_above for r in res.rows)

    def test_too_many_fit_failures_abort(self, eval_setup):
        grid, sites, params, fit_cfg = eval_setup
        one_site = [s for s in sites if s.eu_id == "A"][:1]
        design = tiny_design(one_site, k=1, m=30, n_reserve=0)
        cfg = EvalConfig(grid=grid, n_replicates=4, refit_mode="fixed_corr",
                         n_pred_draws=40, seed=3, fit_config=fit_cfg)
        with pytest.raises(EvalError, match="failed to fit"):
            evaluate_design(design, params, cfg)

    def test_grid_required(self, eval_setup):
        _, sites, params, fit_cfg = eval_setup
        design = tiny_design(sites, k=3, m=30, delta=0.6)
        cfg = EvalConfig(n_replicates=2, fit_config=fit_cfg)
        with pytest.raises(EvalError, match="grid"):
            evaluate_design(design, params, cfg)


# ---------------------------------------------------------------------------
# npv_table


@pytest.fixture(scope="module")
def table_result(eval_setup):
    grid, sites, params, fit_cfg = eval_setup
    designs = {}
    for k in (2, 3):
        for m in (20, 40):
            designs[(k, m)] = tiny_design(sites, k=k, m=m, seed=k, delta=0.6)
    cfg = EvalConfig(grid=grid, n_replicates=6, refit_mode="fixed_corr",
                     n_pred_draws=40, seed=21, fit_config=fit_cfg)
    return designs, cfg, npv_table(designs, params, cfg)


class TestNpvTable:
    def test_same_k_shares_truth_flags(self, table_result):
        _, _, tab = table_result
        for k in (2, 3):
            flags = {
                m: [(r.replicate, r.eu_id, r.truth_above, r.true_T)
                    for r in tab.result(k, m).rows]
                for m in (20, 40)
            }
            assert flags[20] == flags[40]

    def test_csv_layout(self, table_result, tmp_path):
        _, _, tab = table_result
        path = tmp_path / "npv.csv"
        tab.write_csv(path)
        lines = path.read_text().splitlines()
        assert lines[0] == "k,20,40"
        assert len(lines) == 3
        cell = re.compile(r"^(\d\.\d{3}\((\d\.\d{3}|NA)\)|NA)$")
        for line in lines[1:]:
            parts = line.split(",")
            assert parts[0] in ("2", "3")
            for c in parts[1:]:
                assert cell.match(c), c

    def test_replicate_files(self, table_result, tmp_path):
        _, _, tab = table_result
        written = tab.write_replicates(tmp_path / "cells")
        names = sorted(p.name for p in written)
        assert names == ["replicates_k2_m20.csv", "replicates_k2_m40.csv",
                         "replicates_k3_m20.csv", "replicates_k3_m40.csv"]
        header = written[0].read_text().splitlines()[0]
        assert header == "replicate,eu_id,true_T,truth_above,q,decision"

    def test_single_cell_plain_name(self, eval_setup, tmp_path):
        grid, sites, params, fit_cfg = eval_setup
        designs = {(2, 20): tiny_design(sites, k=2, m=20, seed=2, delta=0.6)}
        cfg = EvalConfig(grid=grid, n_replicates=2, refit_mode="fixed_corr",
                         n_pred_draws=20, seed=1, fit_config=fit_cfg)
        tab = npv_table(designs, params, cfg)
        written = tab.write_replicates(tmp_path)
        assert [p.name for p in written] == ["replicates.csv"]

    def test_missing_cell_rejected(self, eval_setup):
        grid, sites, params, fit_cfg = eval_setup
        designs = {(2, 20): tiny_design(sites, k=2, m=20, seed=2, delta=0.6),
                   (3, 40): tiny_design(sites, k=3, m=40, seed=3, delta=0.6)}
        cfg = EvalConfig(grid=grid, n_replicates=2, fit_config=fit_cfg)
        with pytest.raises(EvalError, match="missing design"):
            npv_table(designs, params, cfg)


# ---------------------------------------------------------------------------
# config validation


@pytest.mark.parametrize("kwargs,match", [
    ({"n_replicates": 0}, "n_replicates"),
    ({"target_mean_prev": 0.0}, "target_mean_prev"),
    ({"threshold": 1.0}, "threshold"),
    ({"q_cut": 0.0}, "q_cut"),
    ({"q_rule": "maybe"}, "q_rule"),
    ({"refit_mode": "bayes"}, "refit_mode"),
    ({"n_pred_draws": 0}, "n_pred_draws"),
])
def test_config_validation(kwargs, match):
    with pytest.raises(EvalError, match=match):
        EvalConfig(**kwargs)
