"""Maximum-likelihood fitters for the per-interval conditional models.

Four families are supported: ordinary least squares, logistic regression,
exponential hazard regression with right censoring, and NB2 negative
binomial regression with a log-exposure offset.  Aliased design columns are
detected with a pivoted QR decomposition and dropped; the returned
coefficient vector and covariance are laid out over *all* design columns with
zeros in the dropped positions, so ``W @ beta`` works on the full design.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.special import digamma, gammaln, polygamma

from .rng import draw_chi_square, draw_mvn

RANK_TOL = 1e-9
COEF_TOL = 1e-8
MAX_ITER = 50
SEPARATION_RIDGE = 1e-4
# |linear predictor| beyond this during IRLS is treated as divergence
SEPARATION_ETA = 30.0
MIN_DISPERSION = 1e-6
MAX_DISPERSION = 1e8


class FitError(RuntimeError):
    """A conditional model could not be fitted."""


class InsufficientDataError(FitError):
    pass


class ConvergenceError(FitError):
    pass


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    labels: tuple[str, ...]

    def __post_init__(self):
        values = np.atleast_2d(np.asarray(self.values, dtype=float))
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "labels", tuple(self.labels))
        if values.shape[1] != len(self.labels):
            raise ValueError(f"{values.shape[1]} columns but {len(self.labels)} labels")
        if not np.all(np.isfinite(values)):
            raise ValueError("design matrix has non-finite entries")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def rank(self) -> int:
        return len(retained_columns(self.values))


@dataclass
class FittedModel:
    family: str
    beta: np.ndarray
    cov_beta: np.ndarray
    labels: tuple[str, ...]
    n: int
    p: int
    sigma2: Optional[float] = None
    dispersion: Optional[float] = None
    dropped_columns: tuple[str, ...] = ()
    notes: tuple[str, ...] = ()
    loglik: float = float("nan")
    iterations: int = 0


@dataclass
class ParameterDraw:
    beta_tilde: np.ndarray
    sigma2_tilde: Optional[float] = None


@dataclass
class _Newton:
    beta: np.ndarray
    loglik: float
    info: np.ndarray
    iterations: int
    diverged: bool = False
    extra: dict = field(default_factory=dict)


def retained_columns(X: np.ndarray, tol: float = RANK_TOL) -> np.ndarray:
    """Indices (ascending) of a maximal linearly independent set of columns."""
    if X.shape[1] == 0 or X.shape[0] == 0:
        return np.arange(0)
    _, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    if diag.size == 0 or diag[0] == 0.0:
        return np.arange(0)
    rank = int(np.sum(diag > tol * diag[0]))
    return np.sort(piv[:rank])


def _expand(X: DesignMatrix, keep, beta_k, cov_k, **kw) -> FittedModel:
    p_all = X.values.shape[1]
    beta = np.zeros(p_all)
    cov = np.zeros((p_all, p_all))
    beta[keep] = beta_k
    cov[np.ix_(keep, keep)] = 0.5 * (cov_k + cov_k.T)
    dropped = tuple(lab for k, lab in enumerate(X.labels) if k not in set(keep.tolist()))
    return FittedModel(beta=beta, cov_beta=cov, labels=X.labels, n=X.n, p=len(keep),
                       dropped_columns=dropped, **kw)


def _prepare(X: DesignMatrix, y, min_extra: int):
    if not isinstance(X, DesignMatrix):
        X = DesignMatrix(np.asarray(X, dtype=float),
                         tuple(f"c{k}" for k in range(np.shape(X)[1])))
    y = np.asarray(y, dtype=float)
    if y.shape != (X.n,):
        raise ValueError(f"response length {y.shape} does not match {X.n} design rows")
    keep = retained_columns(X.values)
    if len(keep) == 0:
        raise FitError("design matrix is entirely aliased")
    if X.n <= len(keep) + min_extra:
        raise InsufficientDataError(f"{X.n} rows for {len(keep)} columns")
    return X, y, keep


def _inv_pd(info: np.ndarray) -> np.ndarray:
    try:
        c = scipy.linalg.cho_factor(info)
        return scipy.linalg.cho_solve(c, np.eye(info.shape[0]))
    except np.linalg.LinAlgError:
        return np.linalg.pinv(info)


def _solve(info, g):
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(info), g)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(info, g, rcond=None)[0]


def _newton(objective, beta0, ridge=0.0, max_iter=MAX_ITER, eta_limit=None):
    """Damped Newton ascent on a concave log-likelihood.

    ``objective(beta)`` returns ``(loglik, gradient, information, eta)``.
    A ridge adds ``-ridge/2 * |beta|^2`` to the objective.
    """
    beta = np.array(beta0, dtype=float)
    ll, g, info, eta = objective(beta)
    ll -= 0.5 * ridge * beta @ beta
    for it in range(1, max_iter + 1):
        gp = g - ridge * beta
        step = _solve(info + ridge * np.eye(len(beta)), gp)
        t = 1.0
        while True:
            cand = beta + t * step
            ll_c, g_c, info_c, eta_c = objective(cand)
            ll_c -= 0.5 * ridge * cand @ cand
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * (1 + abs(ll)):
                break
            t *= 0.5
            if t < 1e-10:
                break
        delta = cand - beta
        beta, ll, g, info, eta = cand, ll_c, g_c, info_c, eta_c
        if eta_limit is not None and np.max(np.abs(eta), initial=0.0) > eta_limit:
            return _Newton(beta, ll, info, it, diverged=True)
        if np.max(np.abs(delta) / np.maximum(np.abs(beta), 1.0)) < COEF_TOL:
            return _Newton(beta, ll, info, it)
    raise ConvergenceError(f"Newton iterations did not converge in {max_iter} steps")


def _newton_or_ridge(objective, beta0):
    """Plain Newton; on divergence or non-convergence, refit with a small ridge.

    Returns ``(result, ridge)`` where ``ridge`` is 0 for an unpenalised fit.
    """
    try:
        res = _newton(objective, beta0, eta_limit=SEPARATION_ETA)
        if not res.diverged:
            return res, 0.0
    except ConvergenceError:
        pass
    return _newton(objective, beta0, ridge=SEPARATION_RIDGE, max_iter=200), SEPARATION_RIDGE


# -- linear -----------------------------------------------------------------

def fit_linear(X: DesignMatrix, y) -> FittedModel:
    """OLS with ``sigma2 = RSS / (n - p)`` and ``cov = sigma2 (X'X)^{-1}``."""
    X, y, keep = _prepare(X, y, min_extra=1)
    A = X.values[:, keep]
    Q, R = np.linalg.qr(A)
    beta = scipy.linalg.solve_triangular(R, Q.T @ y)
    resid = y - A @ beta
    n, p = A.shape
    sigma2 = float(resid @ resid) / (n - p)
    Rinv = scipy.linalg.solve_triangular(R, np.eye(p))
    xtx_inv = Rinv @ Rinv.T
    ll = -0.5 * n * (np.log(2 * np.pi * max(sigma2, 1e-300)) + 1.0) if sigma2 > 0 else np.inf
    return _expand(X, keep, beta, sigma2 * xtx_inv, family="linear", sigma2=sigma2,
                   loglik=float(ll))


def draw_linear_params(fit: FittedModel, rng) -> ParameterDraw:
    """One posterior-style draw of ``(beta, sigma2)`` for a linear fit.

    ``sigma2~ = sigma2^ (n-p-1) / xi`` with ``xi ~ chi2(n-p-1)`` and
    ``beta~ ~ N(beta^, sigma2~/sigma2^ * cov)``.
    """
    if fit.family != "linear":
        raise ValueError("draw_linear_params needs a linear fit")
    df = fit.n - fit.p - 1
    if df < 1:
        raise InsufficientDataError(f"chi-square df {df} < 1")
    if not fit.sigma2 or fit.sigma2 <= 0:
        raise FitError("residual variance is zero; nothing to perturb")
    xi = draw_chi_square(rng, df)
    sigma2_tilde = fit.sigma2 * df / xi
    beta_tilde = draw_mvn(rng, fit.beta, (sigma2_tilde / fit.sigma2) * fit.cov_beta)
    return ParameterDraw(beta_tilde=beta_tilde, sigma2_tilde=float(sigma2_tilde))


# -- logistic ---------------------------------------------------------------

def logistic_loglik(A, y, beta):
    eta = A @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def _logistic_objective(A, y):
    def f(beta):
        eta = A @ beta
        p = 0.5 * (1.0 + np.tanh(0.5 * eta))
        ll = np.sum(y * eta - np.logaddexp(0.0, eta))
        w = p * (1.0 - p)
        return ll, A.T @ (y - p), (A.T * w) @ A, eta
    return f


def fit_logistic(X: DesignMatrix, y) -> FittedModel:
    """Logistic MLE by IRLS; a fixed ridge is applied when the data separate."""
    X, y, keep = _prepare(X, y, min_extra=0)
    if np.any((y != 0) & (y != 1)):
        raise ValueError("logistic response must be 0/1")
    A = X.values[:, keep]
    obj = _logistic_objective(A, y)
    ybar = y.mean()
    notes = ()
    res = None
    if 0.0 < ybar < 1.0:
        beta0 = np.zeros(A.shape[1])
        try:
            res = _newton(obj, beta0, eta_limit=SEPARATION_ETA)
        except ConvergenceError:
            res = None
        if res is not None and res.diverged:
            res = None
    if res is None:
        notes = ("separation_ridge",)
        res = _newton(obj, np.zeros(A.shape[1]), ridge=SEPARATION_RIDGE, max_iter=200)
        info = res.info + SEPARATION_RIDGE * np.eye(A.shape[1])
    else:
        info = res.info
    return _expand(X, keep, res.beta, _inv_pd(info), family="logistic", notes=notes,
                   loglik=logistic_loglik(A, y, res.beta), iterations=res.iterations)


# -- exponential hazard -----------------------------------------------------

def exp_hazard_loglik(A, time, event, beta):
    eta = A @ beta
    return float(np.sum(event * eta - time * np.exp(eta)))


def _exp_hazard_objective(A, time, event):
    def f(beta):
        eta = A @ beta
        mu = time * np.exp(eta)
        return np.sum(event * eta - mu), A.T @ (event - mu), (A.T * mu) @ A, eta
    return f


def fit_exp_hazard(X: DesignMatrix, time, event) -> FittedModel:
    """Constant-hazard regression ``lambda = exp(W theta)`` with right censoring."""
    X, time, keep = _prepare(X, time, min_extra=0)
    event = np.asarray(event, dtype=float)
    if np.any(time <= 0):
        raise ValueError("exposure times must be positive")
    d = event.sum()
    if d == 0:
        raise FitError("zero events")
    A = X.values[:, keep]

    obj = _exp_hazard_objective(A, time, event)
    # start from the intercept-only solution along the mean column direction
    beta0, *_ = np.linalg.lstsq(A, np.full(X.n, np.log(d / time.sum())), rcond=None)
    res, ridge = _newton_or_ridge(obj, beta0)
    return _expand(X, keep, res.beta, _inv_pd(res.info + ridge * np.eye(len(res.beta))),
                   family="exp_hazard", notes=("separation_ridge",) if ridge else (),
                   loglik=exp_hazard_loglik(A, time, event, res.beta), iterations=res.iterations)


# -- negative binomial ------------------------------------------------------

def negbin_loglik(A, y, offset, beta, alpha):
    """NB2 log-likelihood; ``alpha == 0`` gives the Poisson limit."""
    eta = A @ beta + offset
    mu = np.exp(eta)
    if alpha <= 0:
        return float(np.sum(y * eta - mu - gammaln(y + 1)))
    r = 1.0 / alpha
    am = alpha * mu
    return float(np.sum(gammaln(y + r) - gammaln(r) - gammaln(y + 1)
                        - r * np.log1p(am) + y * (np.log(am) - np.log1p(am))))


def _nb_alpha_derivs(y, mu, alpha):
    """First and second derivative of the NB2 log-likelihood in ``alpha``."""
    r = 1.0 / alpha
    am = alpha * mu
    l1p = np.log1p(am)
    dpsi = digamma(y + r) - digamma(r)
    dpsi1 = polygamma(1, y + r) - polygamma(1, r)
    g = np.sum(-r * r * dpsi + r * r * l1p + r * (y - mu) / (1 + am))
    h = np.sum(2 * r**3 * dpsi + r**4 * dpsi1
               - 2 * r**3 * l1p + r * r * mu / (1 + am)
               - r * r * (y - mu) / (1 + am) - r * (y - mu) * mu / (1 + am) ** 2)
    return g, h


def _nb_beta_objective(A, y, offset, alpha):
    def f(beta):
        eta = A @ beta + offset
        mu = np.exp(eta)
        ll = negbin_loglik(A, y, offset, beta, alpha)
        if alpha > 0:
            score = (y - mu) / (1 + alpha * mu)
            w = mu * (1 + alpha * y) / (1 + alpha * mu) ** 2
        else:
            score, w = y - mu, mu
        return ll, A.T @ score, (A.T * w) @ A, eta
    return f


def _nb_update_alpha(A, y, offset, beta, alpha):
    """Newton ascent in ``log(alpha)`` with step halving; returns new alpha."""
    mu = np.exp(A @ beta + offset)
    a = np.log(alpha)
    for _ in range(MAX_ITER):
        ll = negbin_loglik(A, y, offset, beta, np.exp(a))
        g, h = _nb_alpha_derivs(y, mu, np.exp(a))
        ga = np.exp(a) * g
        ha = np.exp(a) * g + np.exp(2 * a) * h
        step = -ga / ha if ha < 0 else np.sign(ga) * 1.0
        step = float(np.clip(step, -5.0, 5.0))
        t = 1.0
        while t > 1e-10:
            cand = a + t * step
            if negbin_loglik(A, y, offset, beta, np.exp(cand)) >= ll - 1e-12 * (1 + abs(ll)):
                break
            t *= 0.5
        moved = t * step
        a = a + moved
        if np.exp(a) < MIN_DISPERSION or np.exp(a) > MAX_DISPERSION:
            break
        if abs(moved) < COEF_TOL:
            break
    return float(np.exp(a))


def fit_negbin(X: DesignMatrix, count, offset) -> FittedModel:
    """NB2 regression with log link and offset; dispersion by alternating Newton.

    When the data show no over-dispersion (score for the dispersion at zero is
    non-positive, or the estimate falls below ``MIN_DISPERSION``) the Poisson
    fit is returned with the note ``"poisson_fallback"``.
    """
    X, y, keep = _prepare(X, count, min_extra=0)
    offset = np.asarray(offset, dtype=float)
    if offset.shape != y.shape or not np.all(np.isfinite(offset)):
        raise ValueError("offset must be finite and match the counts")
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise ValueError("counts must be non-negative integers")
    if y.sum() == 0:
        raise FitError("all counts are zero")
    A = X.values[:, keep]
    beta0, *_ = np.linalg.lstsq(A, np.full(X.n, np.log(y.sum() / np.exp(offset).sum())), rcond=None)
    pois, ridge = _newton_or_ridge(_nb_beta_objective(A, y, offset, 0.0), beta0)
    penalty = ridge * np.eye(A.shape[1])
    ridge_note = ("separation_ridge",) if ridge else ()

    def poisson_result(note):
        return _expand(X, keep, pois.beta, _inv_pd(pois.info + penalty), family="negbin",
                       dispersion=0.0, notes=(note, *ridge_note),
                       loglik=negbin_loglik(A, y, offset, pois.beta, 0.0), iterations=pois.iterations)

    mu = np.exp(A @ pois.beta + offset)
    score0 = np.sum((y - mu) ** 2 - y)
    if score0 <= 0:
        return poisson_result("poisson_fallback")
    alpha = max(score0 / np.sum(mu**2), 1e-3)
    beta = pois.beta
    ll = negbin_loglik(A, y, offset, beta, alpha)
    iterations = 0
    for outer in range(1, 4 * MAX_ITER + 1):
        new_alpha = _nb_update_alpha(A, y, offset, beta, alpha)
        if new_alpha < MIN_DISPERSION:
            return poisson_result("poisson_fallback")
        res = _newton(_nb_beta_objective(A, y, offset, new_alpha), beta, ridge=ridge,
                      max_iter=200 if ridge else MAX_ITER)
        iterations += res.iterations
        beta_prev = beta
        change = max(abs(np.log(new_alpha) - np.log(alpha)),
                     np.max(np.abs(res.beta - beta) / np.maximum(np.abs(res.beta), 1.0)))
        beta, alpha = res.beta, new_alpha
        ll_new = negbin_loglik(A, y, offset, beta, alpha)
        # a near-flat likelihood in alpha leaves log(alpha) jittering at
        # rounding level, so a stalled likelihood also counts as converged
        flat = abs(ll_new - ll) <= 1e-12 * (1.0 + abs(ll)) and \
            np.max(np.abs(res.beta - beta_prev) / np.maximum(np.abs(beta), 1.0)) < COEF_TOL
        ll = ll_new
        if change < COEF_TOL or flat:
            break
    else:
        raise ConvergenceError("negative binomial alternation did not converge")
    if alpha > MAX_DISPERSION:
        raise ConvergenceError("negative binomial dispersion diverged")
    return _expand(X, keep, beta, _inv_pd(res.info + penalty), family="negbin", dispersion=alpha,
                   notes=ridge_note, loglik=negbin_loglik(A, y, offset, beta, alpha), iterations=iterations)


def draw_glm_params(fit: FittedModel, rng) -> ParameterDraw:
    """``theta~ ~ N(theta^, cov)``; the NB dispersion is held fixed."""
    if fit.family not in ("logistic", "exp_hazard", "negbin"):
        raise ValueError(f"draw_glm_params does not handle family {fit.family!r}")
    return ParameterDraw(beta_tilde=draw_mvn(rng, fit.beta, fit.cov_beta))
