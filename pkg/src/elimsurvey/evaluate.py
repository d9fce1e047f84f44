"""Design evaluation by simulation: NPV/PPV of a survey design under a known model.

The loop draws prevalence surfaces from generator parameters, simulates surveys
on a candidate design, refits, predicts, and classifies, then scores the
decisions against the simulated truth.  Truth is always computed from the
simulated surface, never from fitted quantities.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from .design import Design
from .fit import SIGMA2_DEGENERATE, FitConfig, FitError, mcml_fit
from .geodata import PredictionGrid, PrevalenceRecord
from .gpfield import FieldRealisation, FieldSampler, ModelParams
from .predict import classify_eu, elimination_probability, predict_surface
from .streams import stream, substream_seed

DEFAULT_N_REPLICATES = 200
DEFAULT_TARGET_PREV = 0.01
SHIFT_N_DRAWS = 500
SHIFT_TOL = 1e-4
REFIT_MODES = ("full_mcml", "fixed_corr")
SHIFT_WEIGHTINGS = ("areal", "population")
MAX_FAILURE_FRACTION = 0.05


class EvalError(RuntimeError):
    """Raised when a design evaluation cannot produce a trustworthy result."""


@dataclass(frozen=True)
class EvalConfig:
    """Settings for a simulation-based design evaluation.

    Args:
        grid: prediction grid carrying population density and EU membership;
            surfaces are simulated on its cells and truth is integrated over it.
        n_replicates: number of simulated surface/survey/refit rounds.
        target_mean_prev: intended mean prevalence of the generator (used by
            callers to shift the intercept before evaluation; recorded here).
        threshold: prevalence threshold c defining elimination.
        q_cut: probability cut-off for the pass decision.
        q_rule: "at_least" (pass iff q >= q_cut) or "strict" (q > q_cut).
        refit_mode: "full_mcml" re-estimates all parameters each replicate;
            "fixed_corr" holds (sigma2, phi) at the generator values and
            re-estimates the intercept only.
        n_pred_draws: predictive surface draws per replicate when computing q.
        fit_config: chain tuning for the per-replicate refit; None picks a
            light configuration suited to repeated small fits.
        seed: master seed; replicate r uses the substreams
            ("field", r), ("survey", r), ("refit", r), ("predict", r).
    """

    grid: PredictionGrid | None = None
    n_replicates: int = DEFAULT_N_REPLICATES
    target_mean_prev: float = DEFAULT_TARGET_PREV
    threshold: float = 0.01
    q_cut: float = 0.95
    q_rule: str = "at_least"
    refit_mode: str = "full_mcml"
    n_pred_draws: int = 200
    fit_config: FitConfig | None = None
    seed: int = 0

    def __post_init__(self):
        if self.n_replicates < 1:
            raise EvalError("n_replicates must be at least 1")
        if not 0.0 < self.target_mean_prev < 1.0:
            raise EvalError("target_mean_prev must lie in (0, 1)")
        if not 0.0 < self.threshold < 1.0:
            raise EvalError("threshold must lie in (0, 1)")
        if not 0.0 < self.q_cut <= 1.0:
            raise EvalError("q_cut must lie in (0, 1]")
        if self.q_rule not in ("at_least", "strict"):
            raise EvalError(f"unknown q_rule {self.q_rule!r}")
        if self.refit_mode not in REFIT_MODES:
            raise EvalError(f"refit_mode must be one of {REFIT_MODES}")
        if self.n_pred_draws < 1:
            raise EvalError("n_pred_draws must be at least 1")


@dataclass(frozen=True)
class EuReplicate:
    """Outcome of one evaluation unit in one replicate."""

    replicate: int
    eu_id: str
    true_T: float
    truth_above: bool
    q: float
    decision: str


@dataclass(frozen=True)
class DesignEvalResult:
    """Replicate-level outcomes plus pooled predictive-value aggregates.

    npv is the fraction of failed EU-replicates whose true prevalence exceeded
    the threshold; ppv the fraction of passed ones truly at or below it.
    Either is None when its denominator is empty, and the matching stderr is
    None with it.
    """

    rows: tuple
    npv: float | None
    npv_stderr: float | None
    ppv: float | None
    ppv_stderr: float | None
    n_pass: int
    n_fail: int
    n_replicates: int
    n_fit_failures: int
    refit_mode: str
    diagnostics: dict = field(default_factory=dict)

    def write_replicates(self, path) -> None:
        write_replicates(self.rows, path)


def summarise_rows(rows) -> dict:
    """Pool EU-replicate rows into NPV/PPV with binomial standard errors."""
    n_fail = sum(1 for r in rows if r.decision == "fail")
    n_pass = sum(1 for r in rows if r.decision == "pass")
    out = {"n_fail": n_fail, "n_pass": n_pass,
           "npv": None, "npv_stderr": None, "ppv": None, "ppv_stderr": None}
    if n_fail > 0:
        hits = sum(1 for r in rows if r.decision == "fail" and r.truth_above)
        v = hits / n_fail
        out["npv"] = v
        out["npv_stderr"] = float(np.sqrt(v * (1.0 - v) / n_fail))
    if n_pass > 0:
        hits = sum(1 for r in rows if r.decision == "pass" and not r.truth_above)
        v = hits / n_pass
        out["ppv"] = v
        out["ppv_stderr"] = float(np.sqrt(v * (1.0 - v) / n_pass))
    return out


def write_replicates(rows, path) -> None:
    """Write EU-replicate outcomes as delimited text."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replicate", "eu_id", "true_T", "truth_above", "q", "decision"])
        for r in rows:
            writer.writerow([r.replicate, r.eu_id, repr(float(r.true_T)),
                             "true" if r.truth_above else "false",
                             repr(float(r.q)), r.decision])


# ---------------------------------------------------------------------------
# intercept calibration


def _mean_prevalence(samples: np.ndarray, delta: float, weights: np.ndarray | None) -> float:
    p = expit(samples + delta)
    if weights is None:
        return float(np.mean(p))
    cell_means = np.mean(p, axis=0)
    return float(cell_means @ weights)


def shift_intercept(params: ModelParams, grid: PredictionGrid,
                    target_mean_prev: float = DEFAULT_TARGET_PREV, *,
                    weighting: str = "areal", seed: int = 0,
                    n_draws: int = SHIFT_N_DRAWS, tol: float = SHIFT_TOL):
    """Shift the model intercept so simulated surfaces average to a target prevalence.

    The expectation is taken over a fixed, seeded set of field draws on the
    grid cells, areal (unweighted over cells) by default or weighted by
    population density.  Returns (shifted_params, delta); the same draws are
    reused at every bisection step, so the solution is deterministic given the
    seed.
    """
    if not 0.0 < target_mean_prev < 1.0:
        raise EvalError("target_mean_prev must lie in (0, 1)")
    if weighting not in SHIFT_WEIGHTINGS:
        raise EvalError(f"weighting must be one of {SHIFT_WEIGHTINGS}")
    if grid.n_cells == 0:
        raise EvalError("prediction grid has no cells")

    weights = None
    if weighting == "population":
        mass = float(np.sum(grid.pd))
        if mass <= 0.0:
            raise EvalError("population weighting requires positive density on the grid")
        weights = grid.pd / mass

    if params.sigma2 <= SIGMA2_DEGENERATE:
        delta = float(logit(target_mean_prev) - params.mu)
        return replace(params, mu=params.mu + delta), delta

    sampler = FieldSampler(params, grid.points())
    samples, _ = sampler.draw_many(stream(seed, "shift-fields"), n_draws)

    lo, hi = -30.0, 30.0
    f_lo = _mean_prevalence(samples, lo, weights) - target_mean_prev
    f_hi = _mean_prevalence(samples, hi, weights) - target_mean_prev
    if f_lo > 0.0 or f_hi < 0.0:
        raise EvalError("target prevalence is outside the bisection bracket")
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        f_mid = _mean_prevalence(samples, mid, weights) - target_mean_prev
        if abs(f_mid) <= tol:
            lo = hi = mid
            break
        if f_mid < 0.0:
            lo = mid
        else:
            hi = mid
    delta = 0.5 * (lo + hi)
    achieved = _mean_prevalence(samples, delta, weights)
    if abs(achieved - target_mean_prev) > tol:
        raise EvalError("bisection failed to reach the target mean prevalence")
    return replace(params, mu=params.mu + delta), float(delta)


# ---------------------------------------------------------------------------
# survey simulation


def _site_prevalence(realisation: FieldRealisation, site) -> float:
    if realisation.grid is not None:
        return float(realisation.p_values[realisation.grid.cell_at(site.x, site.y)])
    pts = realisation.points
    match = np.flatnonzero((pts[:, 0] == site.x) & (pts[:, 1] == site.y))
    if match.size == 0:
        raise EvalError(f"site {site.id} has no simulated value at ({site.x}, {site.y})")
    return float(realisation.p_values[match[0]])


def simulate_survey(realisation: FieldRealisation, design: Design, rng) -> list:
    """Simulate survey outcomes on a design from a simulated prevalence surface.

    Each non-reserve design row contributes one record with
    y ~ Binomial(target_n, P(site)), where P is read off the realisation at
    the site's grid cell (or at the exact point for gridless realisations).
    """
    records = []
    for row in design.rows():
        if row.reserve:
            continue
        site = row.site
        p = _site_prevalence(realisation, site)
        y = int(rng.binomial(row.target_n, p))
        records.append(PrevalenceRecord(
            lon=site.lon, lat=site.lat, x=site.x, y=site.y,
            n_tested=row.target_n, n_positive=y, year=0,
        ))
    if not records:
        raise EvalError("design has no primary sites to survey")
    return records


# ---------------------------------------------------------------------------
# the evaluation loop


def _true_T(p: np.ndarray, grid: PredictionGrid, eu_id: str) -> float:
    idx = grid.cells_in_eu(eu_id)
    if idx.size == 0:
        raise EvalError(f"no grid cells belong to evaluation unit {eu_id!r}")
    w = grid.pd[idx]
    mass = float(np.sum(w))
    if mass <= 0.0:
        raise EvalError(f"evaluation unit {eu_id!r} has zero population mass")
    return float(p[idx] @ (w / mass))


def _default_fit_config() -> FitConfig:
    return FitConfig(mc_samples=2000, burn_in=500, thin=2, relaxation_cycles=1)


def _refit(records, params, mode, cfg):
    """One replicate's refit. Returns (fit_result, mode_used)."""
    fixed = {"sigma2": params.sigma2, "phi": params.phi} if mode == "fixed_corr" else None
    total_positive = sum(r.n_positive for r in records)
    if mode == "full_mcml" and total_positive == 0:
        # an all-zero survey carries no information about the covariance
        fixed = {"sigma2": params.sigma2, "phi": params.phi}
        mode = "fixed_corr"
    result = mcml_fit(records, init=params, config=cfg, fixed=fixed)
    return result, mode


@dataclass(frozen=True)
class _ReplicateContext:
    """Everything one replicate needs; picklable for worker processes."""

    design: Design
    params: ModelParams
    config: EvalConfig
    eu_ids: tuple
    fit_cfg: FitConfig
    pred_cfg: FitConfig


_WORKER_CTX = None


def _init_worker(ctx: _ReplicateContext) -> None:
    global _WORKER_CTX
    _WORKER_CTX = (ctx, FieldSampler(ctx.params, ctx.config.grid.points()))


def _run_replicate(r: int):
    """One replicate: simulate, refit, predict, classify.

    Returns (r, rows, failure_message, fell_back); rows is empty on failure.
    """
    ctx, sampler = _WORKER_CTX
    config, grid = ctx.config, ctx.config.grid
    s, p = sampler.draw(stream(config.seed, "field", r))
    realisation = FieldRealisation(points=grid.points(), s_values=s,
                                   p_values=p, seed=config.seed, grid=grid)
    truths = {eu: _true_T(p, grid, eu) for eu in ctx.eu_ids}
    records = simulate_survey(realisation, ctx.design, stream(config.seed, "survey", r))

    cfg_r = replace(ctx.fit_cfg, seed=substream_seed(config.seed, "refit", r))
    try:
        fit, mode_used = _refit(records, ctx.params, config.refit_mode, cfg_r)
    except FitError as exc:
        return r, [], str(exc), False

    surface = predict_surface(records, fit, grid, config=ctx.pred_cfg,
                              seed=substream_seed(config.seed, "predict", r))
    rows = []
    for eu in ctx.eu_ids:
        idx = grid.cells_in_eu(eu)
        w = grid.pd[idx]
        t = surface.draws[:, idx] @ (w / np.sum(w))
        q, _ = elimination_probability(t, config.threshold)
        decision = classify_eu(q, config.q_cut, config.q_rule)
        rows.append(EuReplicate(
            replicate=r, eu_id=eu, true_T=truths[eu],
            truth_above=truths[eu] > config.threshold,
            q=q, decision=decision,
        ))
    return r, rows, None, mode_used != config.refit_mode


def evaluate_design(design: Design, params: ModelParams, config: EvalConfig,
                    workers: int = 1) -> DesignEvalResult:
    """Estimate the predictive values of a design by repeated simulation.

    Per replicate: draw a surface on the grid, compute each EU's true
    prevalence from it, simulate the survey, refit under config.refit_mode,
    predict exceedance, and classify.  Aborts if more than 5% of replicates
    fail to fit.  Replicates carry their own random streams and results are
    reduced in replicate order, so the outcome does not depend on workers.
    """
    grid = config.grid
    if grid is None:
        raise EvalError("EvalConfig.grid is required for design evaluation")
    eu_ids = tuple(e for e in grid.eu_list() if design.sites_in(e))
    if not eu_ids:
        raise EvalError("design and grid share no evaluation units")

    fit_cfg = config.fit_config if config.fit_config is not None else _default_fit_config()
    pred_cfg = FitConfig(mc_samples=2 * config.n_pred_draws, burn_in=400, thin=2)
    ctx = _ReplicateContext(design=design, params=params, config=config,
                            eu_ids=eu_ids, fit_cfg=fit_cfg, pred_cfg=pred_cfg)

    if workers > 1 and config.n_replicates > 1:
        import multiprocessing as mp

        n_proc = min(workers, config.n_replicates)
        with mp.get_context("spawn").Pool(n_proc, initializer=_init_worker,
                                          initargs=(ctx,)) as pool:
            outcomes = pool.map(_run_replicate, range(config.n_replicates),
                                chunksize=max(1, config.n_replicates // (4 * n_proc)))
    else:
        _init_worker(ctx)
        outcomes = [_run_replicate(r) for r in range(config.n_replicates)]
    outcomes.sort(key=lambda item: item[0])

    rows = []
    failures = []
    n_fallbacks = 0
    for r, rep_rows, failure, fell_back in outcomes:
        if failure is not None:
            failures.append((r, failure))
            continue
        rows.extend(rep_rows)
        n_fallbacks += int(fell_back)

    max_failures = int(np.floor(MAX_FAILURE_FRACTION * config.n_replicates))
    if len(failures) > max_failures:
        raise EvalError(
            f"{len(failures)} of {config.n_replicates} replicates failed to fit "
            f"(tolerated at most {max_failures}); first error: {failures[0][1]}"
        )

    agg = summarise_rows(rows)
    diagnostics = {
        "fit_failures": tuple(failures),
        "fallback_fixed_corr": n_fallbacks,
        "eu_ids": eu_ids,
    }
    return DesignEvalResult(
        rows=tuple(rows),
        npv=agg["npv"], npv_stderr=agg["npv_stderr"],
        ppv=agg["ppv"], ppv_stderr=agg["ppv_stderr"],
        n_pass=agg["n_pass"], n_fail=agg["n_fail"],
        n_replicates=config.n_replicates,
        n_fit_failures=len(failures),
        refit_mode=config.refit_mode,
        diagnostics=diagnostics,
    )


# ---------------------------------------------------------------------------
# NPV tables over a (k, m) grid of designs


@dataclass(frozen=True)
class NpvTable:
    """NPV estimates for designs indexed by site count k and sample size m."""

    ks: tuple
    ms: tuple
    cells: dict

    def result(self, k: int, m: int) -> DesignEvalResult:
        return self.cells[(k, m)]

    def write_csv(self, path) -> None:
        """Rows are k, columns m, each cell "estimate(stderr)" or NA.

        A cell whose NPV rests on fewer than two failed EU-replicates keeps
        its estimate but reports the stderr as NA rather than a misleading 0.
        """
        path = Path(path)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["k"] + [str(m) for m in self.ms])
            for k in self.ks:
                row = [str(k)]
                for m in self.ms:
                    res = self.cells[(k, m)]
                    if res.npv is None:
                        row.append("NA")
                    elif res.n_fail < 2:
                        row.append(f"{res.npv:.3f}(NA)")
                    else:
                        row.append(f"{res.npv:.3f}({res.npv_stderr:.3f})")
                writer.writerow(row)

    def write_replicates(self, out_dir) -> list:
        """One replicate file per cell; a single-cell table writes replicates.csv."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        single = len(self.cells) == 1
        for (k, m), res in sorted(self.cells.items()):
            name = "replicates.csv" if single else f"replicates_k{k}_m{m}.csv"
            target = out_dir / name
            res.write_replicates(target)
            written.append(target)
        return written


def npv_table(designs: dict, params: ModelParams, config: EvalConfig,
              workers: int = 1) -> NpvTable:
    """Evaluate a family of designs keyed by (k, m) under shared replicate seeds.

    All cells reuse the same master seed, so with a common grid every
    replicate sees the same simulated surface in every cell and the truth
    flags for a given k agree exactly across m.
    """
    if not designs:
        raise EvalError("no designs supplied")
    for key in designs:
        if len(key) != 2:
            raise EvalError("designs must be keyed by (k, m) pairs")
    ks = tuple(sorted({k for k, _ in designs}))
    ms = tuple(sorted({m for _, m in designs}))
    for k in ks:
        for m in ms:
            if (k, m) not in designs:
                raise EvalError(f"missing design for k={k}, m={m}")
    cells = {}
    for (k, m), design in sorted(designs.items()):
        cells[(k, m)] = evaluate_design(design, params, config, workers=workers)
    return NpvTable(ks=ks, ms=ms, cells=cells)
