"""Unconditional simulation of stationary Gaussian fields on the logit scale
and their prevalence surfaces.

Convention for where the intercept lives: an intercept-only model treats the
field itself as logit prevalence, so simulated ``s_values`` carry the mean and
``p = invlogit(s)``.  With covariates the field is mean zero and the regression
part ``alpha + beta . d(x)`` is added when mapping to prevalence.  The
standalone :func:`field_to_prevalence` always adds the model's intercept to its
input, i.e. it expects a mean-zero field.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import expit

from .corrfun import CorrelationSpec, corr, covariance_factor, practical_range
from .streams import stream, substream_seed

__all__ = [
    "ModelParams",
    "FieldRealisation",
    "FieldSampler",
    "FieldError",
    "simulate_field",
    "standardise",
    "field_to_prevalence",
    "figure2_demo",
    "DemoPanel",
    "realisation_to_csv",
    "curve_to_csv",
    "MAX_FIELD_POINTS",
]

MAX_FIELD_POINTS = 40_000


class FieldError(ValueError):
    """Invalid field-simulation request."""


@dataclass(frozen=True)
class ModelParams:
    """Parameters of the binomial-logit spatial model.

    Intercept-only form: logit P(x) = S(x) with S a stationary Gaussian
    process of mean ``mu`` and variance ``sigma2``.  Covariate form:
    logit P(x) = alpha + beta . d(x) + S(x) with S mean zero; ``alpha``
    replaces ``mu`` as the intercept.
    """

    mu: float
    sigma2: float
    corr: CorrelationSpec
    alpha: float | None = None
    beta: tuple = ()
    covariate_names: tuple = ()

    def __post_init__(self) -> None:
        if not (math.isfinite(self.sigma2) and self.sigma2 > 0):
            raise ValueError(f"sigma2 must be > 0, got {self.sigma2}")
        if not math.isfinite(self.mu):
            raise ValueError("mu must be finite")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))
        if len(self.beta) != len(self.covariate_names):
            raise ValueError("beta and covariate_names must have equal length")
        if self.covariate_names:
            if self.alpha is None:
                raise ValueError("covariate model needs an alpha intercept")
        elif self.alpha is not None:
            raise ValueError("alpha is only meaningful with covariates; use mu")

    @property
    def has_covariates(self) -> bool:
        return bool(self.covariate_names)

    @property
    def intercept(self) -> float:
        return self.alpha if self.has_covariates else self.mu

    @property
    def phi(self) -> float:
        return self.corr.phi

    def with_mu(self, mu: float) -> "ModelParams":
        return replace(self, mu=float(mu))

    def to_dict(self) -> dict:
        out = {"mu": self.mu, "sigma2": self.sigma2, "corr": self.corr.to_dict()}
        if self.has_covariates:
            out["alpha"] = self.alpha
            out["beta"] = list(self.beta)
            out["covariate_names"] = list(self.covariate_names)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ModelParams":
        return cls(
            mu=float(d["mu"]),
            sigma2=float(d["sigma2"]),
            corr=CorrelationSpec.from_dict(d["corr"]),
            alpha=d.get("alpha"),
            beta=tuple(d.get("beta", ())),
            covariate_names=tuple(d.get("covariate_names", ())),
        )


@dataclass(frozen=True)
class FieldRealisation:
    """One simulated field: locations, logit-scale values, prevalence values."""

    points: np.ndarray
    s_values: np.ndarray
    p_values: np.ndarray
    seed: int
    grid: object = None

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.s_values)):
            raise FieldError("field values must be finite")


def _as_points(where):
    if hasattr(where, "points"):
        return where.points(), where
    pts = np.asarray(where, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise FieldError("point set must have shape (n, 2)")
    return pts, None


def _covariate_matrix(params: ModelParams, n: int, covariates) -> np.ndarray:
    """Stack covariate columns, validating presence and cellwise completeness."""
    if covariates is None:
        raise FieldError(
            f"model uses covariates {list(params.covariate_names)} but none were supplied"
        )
    cols = []
    for name in params.covariate_names:
        if name not in covariates:
            raise FieldError(f"covariate '{name}' not supplied")
        col = np.asarray(covariates[name], dtype=float)
        if col.shape != (n,):
            raise FieldError(f"covariate '{name}' has length {col.size}, expected {n}")
        bad = np.flatnonzero(~np.isfinite(col))
        if bad.size:
            raise FieldError(f"covariate '{name}' missing at cell {bad[0]}")
        cols.append(col)
    return np.column_stack(cols)


def field_to_prevalence(s_values, params: ModelParams, covariates=None) -> np.ndarray:
    """Map a mean-zero field to prevalence: invlogit(intercept + beta.d + s).

    Args:
        s_values: Mean-zero field values, one per cell.
        params: Model parameters; the intercept (mu, or alpha with covariates)
            is added here.
        covariates: Mapping name -> per-cell values; required when the model
            has covariates.

    Returns:
        Prevalence values in (0, 1), same shape as ``s_values``.
    """
    s = np.asarray(s_values, dtype=float)
    eta = params.intercept + s
    if params.has_covariates:
        X = _covariate_matrix(params, s.shape[-1], covariates)
        eta = eta + X @ np.asarray(params.beta)
    return expit(eta)


class FieldSampler:
    """Reusable unconditional sampler at a fixed point set.

    Factors the covariance once so repeated draws (replicate loops) cost one
    matrix-vector product each.
    """

    def __init__(self, params: ModelParams, where, covariates=None, max_points: int = MAX_FIELD_POINTS):
        points, grid = _as_points(where)
        if len(points) == 0:
            raise FieldError("empty point set")
        if len(points) > max_points:
            raise FieldError(
                f"{len(points)} points exceeds the dense-factorisation cap of {max_points}"
            )
        self.params = params
        self.points = points
        self.grid = grid
        self.covariates = covariates
        if params.has_covariates:
            # validate eagerly so a bad cell fails before any sampling
            _covariate_matrix(params, len(points), covariates)
        self.factor, self.jittered = covariance_factor(points, params.sigma2, params.corr)

    def draw(self, rng: np.random.Generator):
        """One field draw; returns (s_values, p_values)."""
        resid = self.factor @ rng.standard_normal(len(self.points))
        return self._finish(resid)

    def draw_many(self, rng: np.random.Generator, n_draws: int):
        """``n_draws`` independent draws; returns (S, P) of shape (n_draws, n)."""
        z = rng.standard_normal((n_draws, len(self.points)))
        resid = z @ self.factor.T
        return self._finish(resid)

    def _finish(self, resid):
        if self.params.has_covariates:
            s = resid
            p = field_to_prevalence(s, self.params, self.covariates)
        else:
            s = self.params.mu + resid
            p = expit(s)
        return s, p


def simulate_field(params: ModelParams, where, seed: int, covariates=None) -> FieldRealisation:
    """Simulate one stationary Gaussian field and its prevalence surface.

    Args:
        params: Model parameters.
        where: PredictionGrid or (n, 2) array of planar-km points.
        seed: Integer stream seed; the same (params, points, seed) triple
            always reproduces the same realisation.
        covariates: Per-cell covariate values when the model has covariates.

    Returns:
        FieldRealisation with ``s_values`` equal to mu + L z for the
        intercept-only model (mean-zero L z with covariates) and ``p_values``
        the cellwise prevalence.
    """
    sampler = FieldSampler(params, where, covariates=covariates)
    s, p = sampler.draw(stream(int(seed), "field"))
    return FieldRealisation(
        points=sampler.points, s_values=s, p_values=p, seed=int(seed), grid=sampler.grid
    )


def standardise(realisation: FieldRealisation, params: ModelParams) -> np.ndarray:
    """Centre and scale a field to mean zero, variance one: (S - mean)/sigma."""
    centre = 0.0 if params.has_covariates else params.mu
    return (realisation.s_values - centre) / math.sqrt(params.sigma2)


# ---------------------------------------------------------------------------
# demonstration fields: three standardised processes on the unit square


@dataclass(frozen=True)
class DemoPanel:
    """One demo realisation plus its correlation-distance curve."""

    label: str
    spec: CorrelationSpec
    target_range: float
    realisation: FieldRealisation
    curve_u: np.ndarray
    curve_rho: np.ndarray


def _unit_square_grid(n: int) -> np.ndarray:
    centres = (np.arange(n) + 0.5) / n
    xg, yg = np.meshgrid(centres, centres)
    return np.column_stack([xg.ravel(), yg.ravel()])


def figure2_demo(seed: int, ranges=(0.15, 0.3), n: int = 50) -> list:
    """Three standardised field realisations on the unit square.

    Panels: the shorter practical range with a non-differentiable field, then
    the longer range with non-differentiable and once-differentiable fields.
    Scale parameters are calibrated so the practical range (correlation 0.05)
    equals the requested value exactly.

    Returns:
        List of three DemoPanel; each curve contains the exact range among its
        distance values.
    """
    short, long_ = sorted(float(r) for r in ranges)
    panels_def = [
        ("short_range_rough", 0.5, short),
        ("long_range_rough", 0.5, long_),
        ("long_range_smooth", 1.5, long_),
    ]
    points = _unit_square_grid(n)
    out = []
    for j, (label, kappa, rng_target) in enumerate(panels_def):
        unit = CorrelationSpec("matern", 1.0, kappa=kappa)
        phi = rng_target / practical_range(unit)
        spec = CorrelationSpec("matern", phi, kappa=kappa)
        params = ModelParams(mu=0.0, sigma2=1.0, corr=spec)
        real = simulate_field(params, points, seed=substream_seed(seed, "figure-demo", j))
        u = np.unique(np.concatenate([np.linspace(0.0, 2.0 * long_, 121), [rng_target]]))
        out.append(
            DemoPanel(
                label=label,
                spec=spec,
                target_range=rng_target,
                realisation=real,
                curve_u=u,
                curve_rho=corr(spec, u),
            )
        )
    return out


# ---------------------------------------------------------------------------
# delimited exports


def realisation_to_csv(path, realisation: FieldRealisation) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cell_id", "x", "y", "s", "p"])
        for i in range(len(realisation.points)):
            writer.writerow(
                [
                    i,
                    repr(float(realisation.points[i, 0])),
                    repr(float(realisation.points[i, 1])),
                    repr(float(realisation.s_values[i])),
                    repr(float(realisation.p_values[i])),
                ]
            )


def curve_to_csv(path, u, rho) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["u", "rho"])
        for ui, ri in zip(np.asarray(u), np.asarray(rho)):
            writer.writerow([repr(float(ui)), repr(float(ri))])
