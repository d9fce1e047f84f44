"""Spatial correlation functions, practical range, and covariance matrices.

The Matern family is restricted to the half-integer smoothness values that
have closed forms (kappa = 0.5, 1.5, 2.5), in the sqrt(2*kappa)-scaled
parameterisation, so kappa = 0.5 coincides exactly with the exponential
function exp(-u/phi).  That is all the modelling here needs: a continuous but
non-differentiable surface (kappa = 0.5) versus a differentiable one
(kappa >= 1.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "CorrelationSpec",
    "corr",
    "practical_range",
    "covariance_matrix",
    "covariance_factor",
    "bivariate_conditional_variance",
    "FactorisationError",
]

_ALLOWED_KAPPA = (0.5, 1.5, 2.5)

# relative diagonal bump applied once when a Cholesky factorisation fails
JITTER_REL = 1e-8


class FactorisationError(RuntimeError):
    """Covariance matrix could not be Cholesky-factorised."""


@dataclass(frozen=True)
class CorrelationSpec:
    """Stationary isotropic correlation model.

    Attributes:
        family: "exponential" or "matern".
        phi: Distance scale, > 0, in ``unit``.
        kappa: Matern smoothness; one of 0.5, 1.5, 2.5.  Ignored for the
            exponential family (which equals matern with kappa = 0.5).
        nugget: Relative non-spatial variance tau2 added on the diagonal of
            covariance matrices.  Off (0) by default.
        unit: Declared distance unit of ``phi``.  Kept alongside the value so
            fitted scales are never silently mixed between unit systems.
    """

    family: str
    phi: float
    kappa: float = 0.5
    nugget: float = 0.0
    unit: str = "km"

    def __post_init__(self) -> None:
        if self.family not in ("exponential", "matern"):
            raise ValueError(f"unknown correlation family {self.family!r}")
        if not (self.phi > 0 and math.isfinite(self.phi)):
            raise ValueError(f"phi must be positive and finite, got {self.phi}")
        if self.family == "matern" and self.kappa not in _ALLOWED_KAPPA:
            raise ValueError(
                f"kappa must be one of {_ALLOWED_KAPPA} (closed forms only), got {self.kappa}"
            )
        if self.nugget < 0:
            raise ValueError(f"nugget must be >= 0, got {self.nugget}")

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "phi": self.phi,
            "kappa": self.kappa,
            "nugget": self.nugget,
            "unit": self.unit,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CorrelationSpec":
        return cls(
            family=d["family"],
            phi=float(d["phi"]),
            kappa=float(d.get("kappa", 0.5)),
            nugget=float(d.get("nugget", 0.0)),
            unit=str(d.get("unit", "km")),
        )


def corr(spec: CorrelationSpec, u):
    """Correlation rho(u) at distance(s) u >= 0.

    Vectorised over u.  rho(0) = 1 and rho is strictly decreasing.
    """
    u_arr = np.asarray(u, dtype=float)
    if np.any(u_arr < 0):
        raise ValueError("distance u must be >= 0")

    kappa = 0.5 if spec.family == "exponential" else spec.kappa
    t = u_arr / spec.phi
    if kappa == 0.5:
        rho = np.exp(-t)
    elif kappa == 1.5:
        a = math.sqrt(3.0) * t
        rho = (1.0 + a) * np.exp(-a)
    else:  # kappa == 2.5
        a = math.sqrt(5.0) * t
        rho = (1.0 + a + a * a / 3.0) * np.exp(-a)
    return rho if rho.ndim else float(rho)


def practical_range(spec: CorrelationSpec, level: float = 0.05) -> float:
    """Distance u* at which rho(u*) falls to ``level`` (conventionally 0.05).

    Exponential has the analytic answer -phi*ln(level); the Matern cases are
    solved by monotone bisection to |rho(u*) - level| < 1e-10.
    """
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    if spec.family == "exponential" or spec.kappa == 0.5:
        return -spec.phi * math.log(level)

    lo, hi = 0.0, spec.phi
    while corr(spec, hi) > level:
        hi *= 2.0
    # rho is continuous and strictly decreasing, so bisection converges
    while hi - lo > 1e-14 * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if corr(spec, mid) > level:
            lo = mid
        else:
            hi = mid
        if abs(corr(spec, 0.5 * (lo + hi)) - level) < 1e-12:
            break
    return 0.5 * (lo + hi)


def covariance_matrix(points, sigma2: float, spec: CorrelationSpec) -> np.ndarray:
    """Dense covariance sigma2 * [rho(|xi - xj|) + nugget * 1{i=j}].

    Args:
        points: (n, 2) array of planar coordinates in ``spec.unit``.
        sigma2: Marginal variance, > 0.
        spec: Correlation model.

    Returns:
        (n, n) symmetric matrix.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    if pts.shape[0] < 1:
        raise ValueError("need at least one point")
    if not sigma2 > 0:
        raise ValueError(f"sigma2 must be > 0, got {sigma2}")
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    cov = sigma2 * corr(spec, dist)
    if spec.nugget > 0:
        cov[np.diag_indices_from(cov)] += sigma2 * spec.nugget
    return cov


def cholesky_with_jitter(
    cov: np.ndarray, sigma2: float, allow_jitter: bool = True
) -> tuple[np.ndarray, bool]:
    """Lower Cholesky factor, retrying once with a 1e-8*sigma2 diagonal bump.

    Returns (L, jitter_applied).  Unlimited silent jitter is deliberately not
    offered: one recorded retry, then failure.
    """
    try:
        return np.linalg.cholesky(cov), False
    except np.linalg.LinAlgError:
        if not allow_jitter:
            raise FactorisationError("Cholesky factorisation failed (jitter disabled)")
    bumped = cov + JITTER_REL * sigma2 * np.eye(cov.shape[0])
    try:
        return np.linalg.cholesky(bumped), True
    except np.linalg.LinAlgError as exc:
        raise FactorisationError(
            "Cholesky factorisation failed even after one diagonal jitter"
        ) from exc


def covariance_factor(
    points, sigma2: float, spec: CorrelationSpec, allow_jitter: bool = True
) -> tuple[np.ndarray, bool]:
    """Covariance of ``points`` and its Cholesky factor in one step.

    On failure with jitter disabled, the error names the closest pair of
    points (the usual culprit is an exact duplicate with zero nugget).
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    cov = covariance_matrix(pts, sigma2, spec)
    try:
        return cholesky_with_jitter(cov, sigma2, allow_jitter=allow_jitter)
    except FactorisationError:
        if pts.shape[0] >= 2:
            diff = pts[:, None, :] - pts[None, :, :]
            dist = np.sqrt(np.sum(diff * diff, axis=-1))
            dist[np.diag_indices_from(dist)] = np.inf
            i, j = np.unravel_index(np.argmin(dist), dist.shape)
            raise FactorisationError(
                f"covariance factorisation failed; closest point pair is "
                f"({i}, {j}) at distance {dist[i, j]:.6g} {spec.unit}"
            ) from None
        raise


def bivariate_conditional_variance(sigma2: float, rho: float) -> float:
    """Variance of one field value given another: sigma2 * (1 - rho**2)."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be >= 0")
    if abs(rho) > 1:
        raise ValueError(f"correlation must satisfy |rho| <= 1, got {rho}")
    return sigma2 * (1.0 - rho * rho)
