"""Likelihood machinery for the binomial-logit spatial model: latent-field
MCMC, Monte Carlo maximum likelihood, and Wald intervals on the transformed
scale.

The marginal likelihood L(theta) integrates the binomial likelihood over the
latent Gaussian field.  Estimation follows the importance-sampling identity
log L(theta) - log L(theta0) = log E[ N(W; theta) / N(W; theta0) ] with W
drawn from the conditional law [W | y; theta0] by MCMC, re-anchoring theta0 at
the current estimate for a configurable number of cycles.  Optimisation and
interval construction happen on (intercepts, log sigma2, log phi).
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.optimize import minimize
from scipy.special import expit, gammaln, log_expit, logsumexp

from .corrfun import FactorisationError, cholesky_with_jitter, covariance_matrix
from .gpfield import ModelParams, _covariate_matrix
from .streams import stream

__all__ = [
    "FitConfig",
    "FitResult",
    "LatentSamples",
    "FitError",
    "loglik_given_latent",
    "loglik_grad_given_latent",
    "sample_latent",
    "marginal_loglik",
    "mcml_fit",
    "profile_deviance",
]

LOG2PI = math.log(2.0 * math.pi)

# search boxes on the transformed scale; hitting an edge is a diagnostic, not
# a silent clamp (the objective is -inf outside, so estimates stay interior
# unless the data genuinely push against an edge)
INTERCEPT_BOX = (-20.0, 10.0)
LOG_SIGMA2_BOX = (-25.0, 12.0)
LOG_PHI_BOX = (math.log(1e-4), math.log(1e5))

# below this, a fixed sigma2 means "no spatial component": the model reduces
# to ordinary logistic regression, fitted exactly
SIGMA2_DEGENERATE = 1e-8

MIN_SITES_WARN = 30
WEAK_POSITIVE_SITES = 10


class FitError(RuntimeError):
    """Fitting failed; carries the optimiser trajectory when one exists."""

    def __init__(self, message, trajectory=()):
        super().__init__(message)
        self.trajectory = tuple(trajectory)


@dataclass(frozen=True)
class FitConfig:
    """Monte Carlo and optimiser tuning for MCML fitting.

    ``mc_samples`` counts post-burn-in MCMC iterations; every ``thin``-th one
    is retained as an importance sample.
    """

    mc_samples: int = 10_000
    burn_in: int = 2_000
    thin: int = 8
    relaxation_cycles: int = 3
    optimizer_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("mc_samples", "burn_in", "thin", "relaxation_cycles"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.mc_samples < self.thin:
            raise ValueError("mc_samples must be at least thin")
        if self.optimizer_tol <= 0:
            raise ValueError("optimizer_tol must be positive")

    @property
    def n_retained(self) -> int:
        return (self.mc_samples + self.thin - 1) // self.thin


# ---------------------------------------------------------------------------
# binomial log-likelihood given the latent field


def _records_ny(data):
    y = np.array([r.n_positive for r in data], dtype=float)
    n = np.array([r.n_tested for r in data], dtype=float)
    return n, y


def _binom_loglik(y, n, t, include_coeff):
    ll = y * log_expit(t) + (n - y) * log_expit(-t)
    if include_coeff:
        ll = ll + gammaln(n + 1.0) - gammaln(y + 1.0) - gammaln(n - y + 1.0)
    return float(np.sum(ll))


def loglik_given_latent(data, eta_plus_s, include_coeff: bool = True) -> float:
    """Binomial log-likelihood of the data given logit prevalence at each site.

    Args:
        data: PrevalenceRecords.
        eta_plus_s: Linear predictor plus latent field, one value per record,
            in the same order as ``data``.
        include_coeff: Include the log binomial coefficients (default), making
            values comparable with external likelihood evaluations.

    Returns:
        Log-likelihood as a float.
    """
    n, y = _records_ny(data)
    t = np.asarray(eta_plus_s, dtype=float)
    if t.shape != y.shape:
        raise ValueError(f"expected {y.shape[0]} latent values, got {t.shape}")
    return _binom_loglik(y, n, t, include_coeff)


def loglik_grad_given_latent(data, eta_plus_s) -> np.ndarray:
    """Gradient of :func:`loglik_given_latent` in each latent coordinate."""
    n, y = _records_ny(data)
    t = np.asarray(eta_plus_s, dtype=float)
    return y - n * expit(t)


# ---------------------------------------------------------------------------
# latent-field MCMC


@dataclass
class LatentSamples:
    """Retained MCMC draws of logit prevalence.

    ``samples[r, i]`` is the r-th retained draw of eta_i + S_i at data site i;
    ``pred_samples`` holds the conditional extension to prediction points when
    requested.
    """

    samples: np.ndarray
    pred_samples: np.ndarray | None
    acceptance_rate: float
    ess: np.ndarray
    step_size: float
    jittered: bool
    warnings: tuple

    @property
    def ess_min(self) -> float:
        return float(np.min(self.ess))


def _ess_series(x: np.ndarray) -> float:
    """Effective sample size via Geyer's initial positive sequence."""
    x = np.asarray(x, dtype=float)
    R = len(x)
    x = x - x.mean()
    var = float(x @ x) / R
    if var <= 0 or R < 4:
        return float(R)
    nfft = 1 << (2 * R - 1).bit_length()
    f = np.fft.rfft(x, nfft)
    acov = np.fft.irfft(f * np.conj(f), nfft)[:R].real / R
    rho = acov / acov[0]
    total = 0.0
    t = 1
    while t + 1 < R:
        pair = rho[t] + rho[t + 1]
        if pair <= 0:
            break
        total += pair
        t += 2
    return float(R / (1.0 + 2.0 * total))


def _mala_chain(y, n, eta, L, config: FitConfig, rng):
    """Whitened MALA targeting [z | y] with S = eta + L z, z ~ N(0, I)."""
    m = len(y)

    def posterior(z):
        s = eta + L @ z
        p = expit(s)
        ll = float(y @ log_expit(s) + (n - y) @ log_expit(-s))
        lp = ll - 0.5 * float(z @ z)
        grad = L.T @ (y - n * p) - z
        return lp, grad

    z = np.zeros(m)
    lp, grad = posterior(z)
    if not math.isfinite(lp):
        raise FitError("non-finite log-posterior at initialisation")

    h = 0.5 / m ** (1.0 / 3.0)
    total = config.burn_in + config.mc_samples
    retained = np.empty((config.n_retained, m))
    kept = 0
    accepted_post = 0
    batch_acc = 0
    batch_n = 0
    for it in range(total):
        xi = rng.standard_normal(m)
        z_prop = z + 0.5 * h * grad + math.sqrt(h) * xi
        lp_prop, grad_prop = posterior(z_prop)
        fwd = z_prop - z - 0.5 * h * grad
        rev = z - z_prop - 0.5 * h * grad_prop
        log_alpha = lp_prop - lp - (float(rev @ rev) - float(fwd @ fwd)) / (2.0 * h)
        accept = log_alpha >= 0 or rng.random() < math.exp(max(log_alpha, -745.0))
        if accept:
            z, lp, grad = z_prop, lp_prop, grad_prop
        if it < config.burn_in:
            batch_acc += accept
            batch_n += 1
            if batch_n == 40:
                h = float(np.clip(h * math.exp(0.66 * (batch_acc / 40.0 - 0.55)), 1e-7, 10.0))
                batch_acc = 0
                batch_n = 0
        else:
            accepted_post += accept
            if (it - config.burn_in) % config.thin == 0:
                retained[kept] = eta + L @ z
                kept += 1
    return retained[:kept], accepted_post / config.mc_samples, h


def _linear_predictor(params: ModelParams, m: int, covariates) -> np.ndarray:
    eta = np.full(m, params.intercept, dtype=float)
    if params.has_covariates:
        X = _covariate_matrix(params, m, covariates)
        eta = eta + X @ np.asarray(params.beta)
    return eta


def sample_latent(
    data,
    params: ModelParams,
    config: FitConfig,
    prediction_points=None,
    covariates=None,
    pred_covariates=None,
    rng=None,
) -> LatentSamples:
    """Draw MCMC samples of logit prevalence given the data at fixed parameters.

    The chain runs on the whitened field z = L^-1 (W - eta) with
    gradient-informed proposals, step size tuned toward 55% acceptance during
    burn-in only.  Prediction points, when given, are filled per retained draw
    from the exact conditional Gaussian given the data-site values.

    Args:
        data: PrevalenceRecords; sample columns follow this order.
        params: Model parameters held fixed.
        config: Chain lengths and seed.
        prediction_points: Optional (n_pred, 2) planar points.
        covariates: Per-site covariate values when the model has covariates.
        pred_covariates: Same, for the prediction points.
        rng: Generator override; defaults to a stream derived from config.seed.

    Returns:
        LatentSamples with diagnostics; warnings flag acceptance outside
        [0.2, 0.8] and per-site ESS below 200.
    """
    if len(data) == 0:
        raise FitError("no data sites to sample at")
    pts = np.array([[r.x, r.y] for r in data], dtype=float)
    n, y = _records_ny(data)
    m = len(pts)
    eta = _linear_predictor(params, m, covariates)
    if rng is None:
        rng = stream(config.seed, "latent")

    cov_dd = covariance_matrix(pts, params.sigma2, params.corr)
    L, jittered = cholesky_with_jitter(cov_dd, params.sigma2)
    samples, acc, h = _mala_chain(y, n, eta, L, config, rng)
    ess = np.array([_ess_series(samples[:, i]) for i in range(m)])

    warnings = []
    if not 0.2 <= acc <= 0.8:
        warnings.append(f"acceptance rate {acc:.3f} outside [0.2, 0.8]")
    if np.min(ess) < 200:
        warnings.append(f"minimum effective sample size {np.min(ess):.0f} below 200")

    pred = None
    if prediction_points is not None and len(prediction_points):
        pred_pts = np.asarray(prediction_points, dtype=float)
        joint = np.vstack([pts, pred_pts])
        cov_joint = covariance_matrix(joint, params.sigma2, params.corr)
        cross_t = cov_joint[:m, m:]  # data x pred block
        cov_pp = cov_joint[m:, m:]
        half = solve_triangular(L, cross_t, lower=True)
        cond_cov = cov_pp - half.T @ half
        Lc, jit_pred = cholesky_with_jitter(cond_cov, params.sigma2)
        jittered = jittered or jit_pred
        # regression of prediction values on data values: mean = eta_p + M (W - eta)
        MT = solve_triangular(L.T, half, lower=False)  # (m, n_pred); M = MT.T
        eta_p = _linear_predictor(params, len(pred_pts), pred_covariates)
        means = eta_p + (samples - eta) @ MT
        noise = rng.standard_normal((len(samples), len(pred_pts)))
        pred = means + noise @ Lc.T

    return LatentSamples(
        samples=samples,
        pred_samples=pred,
        acceptance_rate=acc,
        ess=ess,
        step_size=h,
        jittered=jittered,
        warnings=tuple(warnings),
    )


# ---------------------------------------------------------------------------
# direct marginal-likelihood estimation (importance sampling)


def marginal_loglik(
    data,
    params: ModelParams,
    covariates=None,
    seed: int = 0,
    target_stderr: float = 1e-4,
    max_samples: int = 1 << 22,
    include_coeff: bool = True,
):
    """Importance-sampling estimate of the marginal log-likelihood.

    The proposal is a Student-t (7 df) centred at the posterior mode with the
    Laplace covariance; its tails dominate the Gaussian-tailed integrand, so
    the weights are bounded and the reported standard error is trustworthy.
    Draws are antithetic about the mode, and Gaussian-to-proposal density
    ratios at three scales serve as control variates (each integrates to one
    exactly), which makes near-Gaussian integrands resolve to high relative
    accuracy.  The sample size doubles until the estimated standard error of
    the log-likelihood falls below ``target_stderr`` (or ``max_samples`` is
    reached).

    Returns:
        (loglik, stderr) for the log of the marginal likelihood.
    """
    pts = np.array([[r.x, r.y] for r in data], dtype=float)
    n, y = _records_ny(data)
    m = len(pts)
    eta = _linear_predictor(params, m, covariates)
    cov = covariance_matrix(pts, params.sigma2, params.corr)
    L, _ = cholesky_with_jitter(cov, params.sigma2)
    chol = (L, True)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))

    def joint(W):
        resid = W - eta
        quad = float(resid @ cho_solve(chol, resid))
        return _binom_loglik(y, n, W, include_coeff) - 0.5 * (m * LOG2PI + logdet + quad)

    # Newton ascent to the posterior mode (binomial part concave, prior Gaussian)
    W = eta.copy()
    for _ in range(200):
        p = expit(W)
        grad = (y - n * p) - cho_solve(chol, W - eta)
        fisher = np.diag(n * p * (1.0 - p)) + cho_solve(chol, np.eye(m))
        step = np.linalg.solve(fisher, grad)
        f0 = joint(W)
        scale = 1.0
        while scale > 1e-8 and joint(W + scale * step) < f0:
            scale *= 0.5
        W = W + scale * step
        if float(np.abs(grad).max()) < 1e-11:
            break

    p = expit(W)
    prec_prop = np.diag(n * p * (1.0 - p)) + cho_solve(chol, np.eye(m))
    cov_prop = np.linalg.inv(prec_prop)
    Lp = np.linalg.cholesky(cov_prop)
    logdet_prop = 2.0 * float(np.sum(np.log(np.diag(Lp))))

    centre = joint(W)
    nu = 7.0
    log_t_norm = gammaln((nu + m) / 2.0) - gammaln(nu / 2.0) - 0.5 * m * math.log(nu * math.pi)
    cv_scales = (0.75, 0.9, 1.0, 1.15, 1.35)

    def log_weight(disp, qform):
        # disp: (R, m) displacements in whitened proposal coordinates; qform
        # is the per-row squared norm (shared by a pair, it only depends on
        # the magnitude).  Returns log integrand ratio, shifted by centre.
        Wb = W + disp @ Lp.T
        ll = y * log_expit(Wb) + (n - y) * log_expit(-Wb)
        if include_coeff:
            ll = ll + gammaln(n + 1.0) - gammaln(y + 1.0) - gammaln(n - y + 1.0)
        resid = Wb - eta
        quad = np.einsum("ri,ri->r", resid @ cho_solve(chol, np.eye(m)), resid)
        log_joint = ll.sum(axis=1) - 0.5 * (m * LOG2PI + logdet + quad)
        # proposal density in whitened coordinates; the Jacobian of the
        # whitening map is restored once, in the returned value
        log_prop = log_t_norm - 0.5 * (nu + m) * np.log1p(qform / nu)
        return log_joint - log_prop - centre

    def control_columns(qform):
        # Gaussian(scale)/proposal density ratios in whitened coordinates;
        # each has expectation exactly 1 under the proposal and decays to
        # zero in the tails, so the regression sees no leverage points.
        log_q = log_t_norm - 0.5 * (nu + m) * np.log1p(qform / nu)
        cols = [
            np.exp(-0.5 * m * LOG2PI - m * math.log(s) - qform / (2.0 * s * s) - log_q) - 1.0
            for s in cv_scales
        ]
        return np.column_stack(cols)

    rng = stream(seed, "marginal")
    pair_means = []
    controls = []
    n_pairs = 4096
    total = 0
    while True:
        z = rng.standard_normal((n_pairs, m))
        radial = np.sqrt(nu / rng.chisquare(nu, n_pairs))
        disp = z * radial[:, None]
        qform = np.einsum("ri,ri->r", disp, disp)
        w = 0.5 * (np.exp(log_weight(disp, qform)) + np.exp(log_weight(-disp, qform)))
        pair_means.append(w)
        controls.append(control_columns(qform))
        total += n_pairs
        w_all = np.concatenate(pair_means)
        basis = np.concatenate(controls)
        # control-variate coefficients are cross-fitted on the opposite half
        # so the adjustment stays unbiased and the stderr stays honest
        half = len(w_all) // 2
        w_adj = w_all.copy()
        for fit_sl, app_sl in (
            (slice(0, half), slice(half, len(w_all))),
            (slice(half, len(w_all)), slice(0, half)),
        ):
            coef, *_ = np.linalg.lstsq(
                basis[fit_sl], w_all[fit_sl] - w_all[fit_sl].mean(), rcond=None
            )
            w_adj[app_sl] = w_all[app_sl] - basis[app_sl] @ coef
        mean_w = float(np.mean(w_adj))
        se_w = float(np.std(w_adj, ddof=1) / math.sqrt(len(w_adj)))
        stderr = se_w / mean_w if mean_w > 0 else math.inf
        if stderr < target_stderr or 2 * total >= max_samples:
            break
        n_pairs *= 2
    return centre + math.log(mean_w) + 0.5 * logdet_prop, stderr


# ---------------------------------------------------------------------------
# MCML objective with per-phi factorisation cache


class _MCMLObjective:
    """log of the importance-sampling likelihood ratio against a fixed anchor.

    Given retained draws W_r from [W | y; theta0], evaluates
    lhat(theta) = log mean_r exp(log N(W_r; theta) - log N(W_r; theta0)).
    Factorisations are keyed by phi and kept in a small LRU cache so intercept
    and variance moves are cheap.
    """

    CACHE_SIZE = 4

    def __init__(self, pts, X, W, anchor: ModelParams, anchor_eta):
        self.pts = pts
        self.X = X  # (m, n_coef) design: intercept column then covariates
        self.W = W  # (R, m)
        self.m = pts.shape[0]
        self.R = W.shape[0]
        self.corr_template = anchor.corr
        self._cache = OrderedDict()
        L0, logdet0, A0, _ = self._factor(anchor.corr.phi)
        resid0 = solve_triangular(L0, (W - anchor_eta).T, lower=True)
        q0 = np.einsum("ir,ir->r", resid0, resid0)
        self.logN0 = -0.5 * (
            self.m * LOG2PI + self.m * math.log(anchor.sigma2) + logdet0 + q0 / anchor.sigma2
        )

    def _factor(self, phi):
        if phi in self._cache:
            self._cache.move_to_end(phi)
            return self._cache[phi]
        spec = replace(self.corr_template, phi=phi)
        R1 = covariance_matrix(self.pts, 1.0, spec)
        L, _ = cholesky_with_jitter(R1, 1.0)
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        A = solve_triangular(L, self.W.T, lower=True)  # (m, R)
        B = solve_triangular(L, self.X, lower=True)  # (m, n_coef)
        self._cache[phi] = (L, logdet, A, B)
        if len(self._cache) > self.CACHE_SIZE:
            self._cache.popitem(last=False)
        return self._cache[phi]

    def lhat(self, coefs, log_sigma2, log_phi) -> float:
        if not (INTERCEPT_BOX[0] <= coefs[0] <= INTERCEPT_BOX[1]):
            return -math.inf
        if not (LOG_SIGMA2_BOX[0] <= log_sigma2 <= LOG_SIGMA2_BOX[1]):
            return -math.inf
        if not (LOG_PHI_BOX[0] <= log_phi <= LOG_PHI_BOX[1]):
            return -math.inf
        sigma2 = math.exp(log_sigma2)
        try:
            _, logdet, A, B = self._factor(math.exp(log_phi))
        except FactorisationError:
            return -math.inf
        D = A - (B @ coefs)[:, None]
        q = np.einsum("ir,ir->r", D, D)
        logN = -0.5 * (self.m * LOG2PI + self.m * log_sigma2 + logdet + q / sigma2)
        d = logN - self.logN0
        return float(logsumexp(d) - math.log(self.R))

    def weights_at(self, coefs, log_sigma2, log_phi) -> np.ndarray:
        """Unnormalised importance weights exp(d_r - max d_r) at theta."""
        sigma2 = math.exp(log_sigma2)
        _, logdet, A, B = self._factor(math.exp(log_phi))
        D = A - (B @ coefs)[:, None]
        q = np.einsum("ir,ir->r", D, D)
        logN = -0.5 * (self.m * LOG2PI + self.m * log_sigma2 + logdet + q / sigma2)
        d = logN - self.logN0
        return np.exp(d - d.max())


# ---------------------------------------------------------------------------
# result container


@dataclass
class FitResult:
    """Point estimates, 95% intervals, and fitting diagnostics."""

    estimates: ModelParams
    ci95: dict
    mc_stderr: float
    diagnostics: dict
    trajectory: tuple = ()
    _state: object = field(default=None, repr=False, compare=False)

    def parameter_rows(self):
        """Rows (parameter, estimate, ci_lower, ci_upper, status)."""
        est = self.estimates
        names = []
        if est.has_covariates:
            names.append(("alpha", est.alpha))
            for name, b in zip(est.covariate_names, est.beta):
                names.append((f"beta_{name}", b))
        else:
            names.append(("mu", est.mu))
        names.append(("sigma2", est.sigma2))
        names.append(("phi", est.corr.phi))
        rows = []
        for name, value in names:
            if name in self.ci95:
                lo, hi = self.ci95[name]
                rows.append((name, value, lo, hi, "estimated"))
            else:
                rows.append((name, value, None, None, "fixed"))
        return rows

    def write_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["parameter", "estimate", "ci_lower", "ci_upper", "status"])
            for name, value, lo, hi, status in self.parameter_rows():
                writer.writerow(
                    [
                        name,
                        repr(float(value)),
                        "" if lo is None else repr(float(lo)),
                        "" if hi is None else repr(float(hi)),
                        status,
                    ]
                )

    def report_text(self) -> str:
        lines = ["model fit", "========="]
        for name, value, lo, hi, status in self.parameter_rows():
            if status == "estimated":
                lines.append(f"{name:<10} {value: .6g}   95% CI ({lo:.6g}, {hi:.6g})")
            else:
                lines.append(f"{name:<10} {value: .6g}   (fixed)")
        lines.append(f"mc_stderr  {self.mc_stderr:.3g}")
        lines.append("")
        lines.append("diagnostics")
        lines.append("-----------")
        for key in sorted(self.diagnostics):
            lines.append(f"{key}: {self.diagnostics[key]}")
        return "\n".join(lines) + "\n"

    def write_report(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.report_text())


# ---------------------------------------------------------------------------
# MCML fitting


def _sorted_records(data, covariates):
    pts = np.array([[r.x, r.y] for r in data], dtype=float)
    n, y = _records_ny(data)
    order = np.lexsort((y, n, pts[:, 1], pts[:, 0]))
    sorted_data = [data[i] for i in order]
    sorted_cov = None
    if covariates is not None:
        sorted_cov = {k: np.asarray(v, dtype=float)[order] for k, v in covariates.items()}
    return sorted_data, sorted_cov


def _design_matrix(params: ModelParams, m, covariates):
    cols = [np.ones(m)]
    if params.has_covariates:
        X = _covariate_matrix(params, m, covariates)
        cols.extend(X.T)
    return np.column_stack(cols)


def _coef_names(params: ModelParams):
    if params.has_covariates:
        return ["alpha"] + [f"beta_{n}" for n in params.covariate_names]
    return ["mu"]


def _params_from(init: ModelParams, coefs, sigma2, phi) -> ModelParams:
    corr = replace(init.corr, phi=float(phi))
    if init.has_covariates:
        return replace(
            init, alpha=float(coefs[0]), beta=tuple(float(b) for b in coefs[1:]),
            sigma2=float(sigma2), corr=corr,
        )
    return replace(init, mu=float(coefs[0]), sigma2=float(sigma2), corr=corr)


def _logistic_reduction(data, init, config, fixed, covariates, diagnostics):
    """Exact logistic-regression fit for a disabled spatial component."""
    n, y = _records_ny(data)
    m = len(data)
    X = _design_matrix(init, m, covariates)
    k = X.shape[1]
    total_n, total_y = float(n.sum()), float(y.sum())
    if k == 1:
        if 0 < total_y < total_n:
            p_hat = total_y / total_n
        else:
            # continuity correction keeps the boundary cases finite
            p_hat = (total_y + 0.5) / (total_n + 1.0)
            diagnostics["boundary_corrected"] = True
        coefs = np.array([math.log(p_hat / (1.0 - p_hat))])
        info = np.array([[total_n * p_hat * (1.0 - p_hat)]])
    else:
        coefs = np.zeros(k)
        for _ in range(100):
            p = expit(X @ coefs)
            Wd = n * p * (1.0 - p)
            grad = X.T @ (y - n * p)
            info = X.T @ (X * Wd[:, None])
            step = np.linalg.solve(info, grad)
            coefs = coefs + step
            if float(np.abs(step).max()) < 1e-12:
                break
        p = expit(X @ coefs)
        info = X.T @ (X * (n * p * (1.0 - p))[:, None])
    se = np.sqrt(np.diag(np.linalg.inv(info)))
    names = _coef_names(init)
    ci95 = {nm: (c - 1.959963984540054 * s, c + 1.959963984540054 * s)
            for nm, c, s in zip(names, coefs, se)}
    sigma2 = max(float(fixed["sigma2"]), 1e-12)
    estimates = _params_from(init, coefs, sigma2, fixed.get("phi", init.corr.phi))
    diagnostics["mode"] = "logistic (spatial component disabled)"
    return FitResult(
        estimates=estimates, ci95=ci95, mc_stderr=0.0, diagnostics=diagnostics
    )


def mcml_fit(data, init: ModelParams, config: FitConfig, fixed=None, covariates=None) -> FitResult:
    """Monte Carlo maximum likelihood estimation of the spatial model.

    Args:
        data: PrevalenceRecords (at least 2 distinct sites).
        init: Starting parameters; also the first importance-sampling anchor.
        config: Chain and optimiser tuning.
        fixed: Mapping holding any of "mu", "sigma2", "phi" to freeze at the
            given value.  A fixed sigma2 at or below 1e-8 reduces the model to
            exact logistic regression.
        covariates: Per-site covariate values when the model has covariates.

    Returns:
        FitResult; ci95 covers estimated parameters (sigma2 and phi intervals
        come from log-scale Wald intervals, exponentiated).

    Raises:
        FitError: Non-convergence (with trajectory), all-zero data with free
            covariance parameters, or fewer than 2 distinct sites.
    """
    fixed = dict(fixed or {})
    data = list(data)
    if len({(r.x, r.y) for r in data}) < 2:
        raise FitError("need at least 2 distinct data sites")
    diagnostics = {"n_sites": len(data)}
    warnings = []
    if len(data) < MIN_SITES_WARN:
        warnings.append(f"only {len(data)} sites; parameter estimates will be imprecise")
    n_positive_sites = sum(1 for r in data if r.n_positive > 0)
    diagnostics["weakly_identified"] = n_positive_sites < WEAK_POSITIVE_SITES

    # estimates must not depend on row order: canonicalise before any sampling
    data, covariates = _sorted_records(data, covariates)

    if "mu" in fixed and init.has_covariates:
        raise FitError("fix 'alpha' via init and fixed coefficients are not supported")

    if "sigma2" in fixed and float(fixed["sigma2"]) <= SIGMA2_DEGENERATE:
        diagnostics["warnings"] = tuple(warnings)
        return _logistic_reduction(data, init, config, fixed, covariates, diagnostics)

    total_y = sum(r.n_positive for r in data)
    corr_free = "sigma2" not in fixed or "phi" not in fixed
    if total_y == 0 and corr_free:
        raise FitError(
            "all observed counts are zero: covariance parameters are not "
            "identifiable by maximum likelihood; fix sigma2 and phi (or use a "
            "Bayesian analysis with informative priors) instead"
        )

    pts = np.array([[r.x, r.y] for r in data], dtype=float)
    m = len(pts)
    X = _design_matrix(init, m, covariates)
    n_coef = X.shape[1]
    coef_names = _coef_names(init)

    # transformed parameter vector: [coefs..., log sigma2, log phi]
    def to_psi(params: ModelParams):
        coefs = [params.alpha, *params.beta] if params.has_covariates else [params.mu]
        return np.array([*coefs, math.log(params.sigma2), math.log(params.corr.phi)])

    free = np.ones(n_coef + 2, dtype=bool)
    if "mu" in fixed:
        free[0] = False
    if "sigma2" in fixed:
        free[n_coef] = False
    if "phi" in fixed:
        free[n_coef + 1] = False
    template = to_psi(init)
    if "mu" in fixed:
        template[0] = float(fixed["mu"])
    if "sigma2" in fixed:
        template[n_coef] = math.log(float(fixed["sigma2"]))
    if "phi" in fixed:
        template[n_coef + 1] = math.log(float(fixed["phi"]))
    free_idx = np.flatnonzero(free)
    if free_idx.size == 0:
        raise FitError("no free parameters to estimate")

    anchor = _params_from(init, template[:n_coef], math.exp(template[n_coef]),
                          math.exp(template[n_coef + 1]))
    trajectory = []
    jitter_events = 0
    obj = None
    psi = template.copy()

    for cycle in range(config.relaxation_cycles):
        rng = stream(config.seed, "mcml", cycle)
        lat = sample_latent(data, anchor, config, covariates=covariates, rng=rng)
        jitter_events += int(lat.jittered)
        warnings.extend(w for w in lat.warnings if w not in warnings)
        eta0 = _linear_predictor(anchor, m, covariates)
        obj = _MCMLObjective(pts, X, lat.samples, anchor, eta0)
        last_lat = lat

        def neg(psi_free, _obj=obj):
            full = template.copy()
            full[free_idx] = psi_free
            return -_obj.lhat(full[:n_coef], full[n_coef], full[n_coef + 1])

        res = minimize(
            neg,
            psi[free_idx],
            method="Nelder-Mead",
            options={
                "xatol": config.optimizer_tol,
                "fatol": config.optimizer_tol * 0.1,
                "maxiter": 4000,
                "maxfev": 6000,
            },
        )
        trajectory.append((cycle, tuple(res.x), float(-res.fun), int(res.nfev)))
        if not res.success or not math.isfinite(res.fun):
            raise FitError(
                f"optimiser failed in cycle {cycle}: {res.message}", trajectory=trajectory
            )
        psi = template.copy()
        psi[free_idx] = res.x
        anchor = _params_from(init, psi[:n_coef], math.exp(psi[n_coef]), math.exp(psi[n_coef + 1]))

    def lhat_full(full):
        return obj.lhat(full[:n_coef], full[n_coef], full[n_coef + 1])

    # numerical Hessian on the transformed scale (central differences); the
    # objective is a smooth deterministic function of the retained samples
    hstep = 1e-4
    kfree = free_idx.size
    H = np.empty((kfree, kfree))
    f0 = lhat_full(psi)
    for a in range(kfree):
        ea = np.zeros_like(psi)
        ea[free_idx[a]] = hstep
        H[a, a] = (lhat_full(psi + ea) - 2.0 * f0 + lhat_full(psi - ea)) / hstep**2
        for b in range(a + 1, kfree):
            eb = np.zeros_like(psi)
            eb[free_idx[b]] = hstep
            H[a, b] = H[b, a] = (
                lhat_full(psi + ea + eb)
                - lhat_full(psi + ea - eb)
                - lhat_full(psi - ea + eb)
                + lhat_full(psi - ea - eb)
            ) / (4.0 * hstep**2)

    variances = None
    try:
        cov_psi = np.linalg.inv(-H)
        if np.all(np.diag(cov_psi) > 0):
            variances = np.diag(cov_psi)
    except np.linalg.LinAlgError:
        pass
    if variances is None:
        diag = np.diag(H)
        if np.any(diag >= 0):
            raise FitError(
                "information matrix is not positive definite at the optimum",
                trajectory=trajectory,
            )
        variances = -1.0 / diag
        warnings.append("off-diagonal information ignored for interval construction")
    ses = np.sqrt(variances)

    z975 = 1.959963984540054
    all_names = coef_names + ["sigma2", "phi"]
    ci95 = {}
    for pos, se in zip(free_idx, ses):
        name = all_names[pos]
        lo, hi = psi[pos] - z975 * se, psi[pos] + z975 * se
        if pos >= n_coef:
            ci95[name] = (math.exp(lo), math.exp(hi))
        else:
            ci95[name] = (lo, hi)

    estimates = _params_from(init, psi[:n_coef], math.exp(psi[n_coef]), math.exp(psi[n_coef + 1]))

    w = obj.weights_at(psi[:n_coef], psi[n_coef], psi[n_coef + 1])
    ess_w = _ess_series(w)
    mc_stderr = float(np.std(w, ddof=1) / (math.sqrt(ess_w) * np.mean(w)))

    diagnostics.update(
        {
            "acceptance_rate": round(last_lat.acceptance_rate, 4),
            "ess_min": round(last_lat.ess_min, 1),
            "jitter_events": jitter_events,
            "relaxation_cycles": config.relaxation_cycles,
            "retained_samples": int(obj.R),
            "importance_weight_ess": round(float(ess_w), 1),
            "mode": "mcml"
            + ("" if not fixed else f" (fixed: {', '.join(sorted(fixed))})"),
            "warnings": tuple(warnings),
        }
    )
    return FitResult(
        estimates=estimates,
        ci95=ci95,
        mc_stderr=mc_stderr,
        diagnostics=diagnostics,
        trajectory=tuple(trajectory),
        _state=(obj, psi, all_names, n_coef),
    )


def profile_deviance(data, fit: FitResult, parameter: str, grid) -> list:
    """Relative Monte Carlo log-likelihood along one transformed coordinate.

    Other coordinates stay at their estimates; values are lhat(value) -
    lhat(estimate), so the maximum is 0 at the estimate by construction.

    Args:
        data: The records the fit used (unused beyond validation, kept for
            interface symmetry).
        fit: Result of :func:`mcml_fit`.
        parameter: One of the fitted parameter names ("mu", "sigma2", "phi",
            "alpha", "beta_<name>").
        grid: Natural-scale values to profile over; sigma2/phi must be > 0.

    Returns:
        List of (value, relative log-likelihood) pairs.
    """
    if fit._state is None:
        raise FitError("profile unavailable: fit carries no Monte Carlo state")
    obj, psi_hat, all_names, n_coef = fit._state
    if parameter not in all_names:
        raise FitError(f"unknown parameter {parameter!r}; expected one of {all_names}")
    pos = all_names.index(parameter)
    log_scale = pos >= n_coef
    values = np.asarray(grid, dtype=float)
    if log_scale and np.any(values <= 0):
        raise FitError(f"{parameter} grid must be strictly positive")
    base = obj.lhat(psi_hat[:n_coef], psi_hat[n_coef], psi_hat[n_coef + 1])
    out = []
    for v in values:
        psi = psi_hat.copy()
        psi[pos] = math.log(v) if log_scale else v
        out.append((float(v), obj.lhat(psi[:n_coef], psi[n_coef], psi[n_coef + 1]) - base))
    return out
