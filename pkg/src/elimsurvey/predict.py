"""Predictive classification of evaluation units.

Conditional draws of the prevalence surface feed a population-weighted
average per evaluation unit; the share of draws below the elimination
threshold is the predictive probability q, and a unit passes when q reaches
the agreed cut-off.  The weighted average discretises the area integral as a
population-density weighted mean over equal-area grid cells, which is the
sole quadrature rule used anywhere in the package.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, logit

from .fit import FitConfig, FitResult, sample_latent
from .gpfield import FieldSampler, ModelParams
from .streams import stream

__all__ = [
    "PredictError",
    "SurfaceSamples",
    "PredictionResult",
    "predict_surface",
    "population_weighted_T",
    "elimination_probability",
    "classify_eu",
    "classify_units",
    "write_decisions",
    "write_t_samples",
]

DEFAULT_THRESHOLD = 0.01
DEFAULT_Q_CUT = 0.95
DEFAULT_N_DRAWS = 1000

Q_RULES = ("at_least", "strict")


class PredictError(ValueError):
    """A prediction request that cannot be honoured (empty grid, no mass)."""


@dataclass(frozen=True)
class SurfaceSamples:
    """Joint draws of the prevalence surface over a prediction grid.

    ``draws[r, j]`` is the r-th sampled prevalence at grid cell j.
    """

    grid: object
    draws: np.ndarray
    seed: int

    def __post_init__(self):
        d = np.asarray(self.draws)
        if d.ndim != 2 or d.shape[1] != self.grid.n_cells:
            raise PredictError(
                f"draw matrix {d.shape} does not match grid with {self.grid.n_cells} cells"
            )
        if not np.all((d > 0.0) & (d < 1.0)):
            raise PredictError("prevalence draws must lie strictly inside (0, 1)")

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def mean(self) -> np.ndarray:
        return self.draws.mean(axis=0)

    def sd(self) -> np.ndarray:
        return self.draws.std(axis=0, ddof=1)

    def logit_mean(self) -> np.ndarray:
        return logit(self.draws).mean(axis=0)

    def logit_sd(self) -> np.ndarray:
        return logit(self.draws).std(axis=0, ddof=1)


@dataclass(frozen=True)
class PredictionResult:
    """Classification of one evaluation unit from its T draws."""

    eu_id: str
    t_samples: np.ndarray
    q: float
    q_mc_stderr: float
    threshold: float
    decision: str
    q_rule: str
    q_cut: float

    @property
    def n_draws(self) -> int:
        return len(self.t_samples)

    @classmethod
    def from_samples(cls, eu_id, t_samples, threshold, q_cut=DEFAULT_Q_CUT,
                     q_rule="at_least") -> "PredictionResult":
        t = np.asarray(t_samples, dtype=float)
        q, se = elimination_probability(t, threshold)
        return cls(
            eu_id=eu_id,
            t_samples=t,
            q=q,
            q_mc_stderr=se,
            threshold=float(threshold),
            decision=classify_eu(q, q_cut, q_rule),
            q_rule=q_rule,
            q_cut=float(q_cut),
        )


def _resolve_params(fit_or_params) -> ModelParams:
    if isinstance(fit_or_params, FitResult):
        return fit_or_params.estimates
    if isinstance(fit_or_params, ModelParams):
        return fit_or_params
    raise PredictError(f"expected ModelParams or FitResult, got {type(fit_or_params)!r}")


def predict_surface(
    data,
    fit_or_params,
    grid,
    config: FitConfig | None = None,
    n_draws: int = DEFAULT_N_DRAWS,
    seed: int = 0,
    covariates=None,
    grid_covariates=None,
) -> SurfaceSamples:
    """Sample the prevalence surface at every grid cell given the data.

    With data present, the latent chain at the data sites is extended to the
    grid cells by exact conditional simulation per retained draw.  With no
    data the draws are unconditional field realisations.  ``config``
    overrides the chain tuning; otherwise a chain retaining ``n_draws``
    samples is derived from the default configuration.  Deterministic given
    ``seed``.

    Args:
        data: PrevalenceRecords, possibly empty.
        fit_or_params: ModelParams, or a FitResult whose estimates to use.
        grid: PredictionGrid of cells to predict at.
        config: Optional chain tuning; its seed is ignored in favour of
            ``seed``.
        n_draws: Surface draws to return when ``config`` is not given.
        seed: Stream seed for the chain or the unconditional sampler.
        covariates: Per-site covariate values when the model has covariates.
        grid_covariates: Same, per grid cell.

    Returns:
        SurfaceSamples with one row per retained draw.
    """
    params = _resolve_params(fit_or_params)
    if grid.n_cells == 0:
        raise PredictError("prediction grid has no cells")
    if n_draws < 1:
        raise PredictError("n_draws must be positive")

    data = list(data)
    if not data:
        sampler = FieldSampler(params, grid, covariates=grid_covariates)
        _, p = sampler.draw_many(stream(seed, "predict-unconditional"), n_draws)
        return SurfaceSamples(grid=grid, draws=p, seed=seed)

    if config is None:
        config = FitConfig(mc_samples=n_draws * 8, burn_in=2000, thin=8, seed=seed)
    lat = sample_latent(
        data,
        params,
        config,
        prediction_points=grid.points(),
        covariates=covariates,
        pred_covariates=grid_covariates,
        rng=stream(seed, "predict-chain"),
    )
    return SurfaceSamples(grid=grid, draws=expit(lat.pred_samples), seed=seed)


def population_weighted_T(surface: SurfaceSamples, grid, eu_id: str) -> np.ndarray:
    """Population-weighted mean prevalence over one EU, per surface draw.

    Cells have equal area, so the weights reduce to the population densities
    at the EU's cells.

    Returns:
        (n_draws,) array of T values.

    Raises:
        PredictError: The EU has no cells or no population mass.
    """
    idx = grid.cells_in_eu(eu_id)
    if idx.size == 0:
        raise PredictError(f"evaluation unit {eu_id!r} has no grid cells")
    weights = np.asarray(grid.pd, dtype=float)[idx]
    mass = float(weights.sum())
    if mass <= 0.0:
        raise PredictError(f"evaluation unit {eu_id!r} has zero population mass")
    return surface.draws[:, idx] @ (weights / mass)


def elimination_probability(t_samples, c: float):
    """Share of T draws strictly below the threshold, with its MC error.

    Returns:
        (q, stderr) where stderr = sqrt(q (1 - q) / n_draws).
    """
    t = np.asarray(t_samples, dtype=float)
    if t.size == 0:
        raise PredictError("no T samples")
    q = float(np.mean(t < c))
    return q, math.sqrt(q * (1.0 - q) / t.size)


def classify_eu(q: float, q_cut: float = DEFAULT_Q_CUT, q_rule: str = "at_least") -> str:
    """Pass/fail decision from the predictive probability.

    ``at_least`` passes on q >= q_cut, ``strict`` requires q > q_cut; the two
    differ only exactly at the cut-off.
    """
    if not 0.0 <= q <= 1.0:
        raise PredictError(f"q must lie in [0, 1], got {q}")
    if q_rule not in Q_RULES:
        raise PredictError(f"unknown q_rule {q_rule!r}; expected one of {Q_RULES}")
    passed = q > q_cut if q_rule == "strict" else q >= q_cut
    return "pass" if passed else "fail"


def classify_units(
    surface: SurfaceSamples,
    threshold: float = DEFAULT_THRESHOLD,
    q_cut: float = DEFAULT_Q_CUT,
    q_rule: str = "at_least",
    eu_ids=None,
) -> list:
    """PredictionResult for every (or each named) EU on the surface's grid."""
    grid = surface.grid
    ids = list(eu_ids) if eu_ids is not None else grid.eu_list()
    if not ids:
        raise PredictError("grid carries no evaluation units")
    results = []
    for eu_id in ids:
        t = population_weighted_T(surface, grid, eu_id)
        results.append(PredictionResult.from_samples(eu_id, t, threshold, q_cut, q_rule))
    return results


def write_decisions(results, path) -> None:
    """Per-EU decision table: eu_id,q,q_mc_stderr,threshold,decision,n_draws."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["eu_id", "q", "q_mc_stderr", "threshold", "decision", "n_draws"])
        for r in results:
            writer.writerow(
                [r.eu_id, repr(r.q), repr(r.q_mc_stderr), repr(r.threshold),
                 r.decision, r.n_draws]
            )


def write_t_samples(results, path) -> None:
    """Full T-draw dump, one row per (eu, draw)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["eu_id", "draw", "t"])
        for r in results:
            for i, t in enumerate(r.t_samples):
                writer.writerow([r.eu_id, i, repr(float(t))])
