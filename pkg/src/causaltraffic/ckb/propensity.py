"""Logistic-regression propensity scores fitted by damped Newton iterations."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

log = logging.getLogger(__name__)

RIDGE_FALLBACK = 1e-4
# a standardized coefficient this large means the data are (quasi-)separated
SEPARATION_BOUND = 30.0


class SeparationError(RuntimeError):
    """Treatment is (nearly) perfectly predicted by the confounders.

    Refit with a ridge penalty, e.g. ``ridge=1e-4``.
    """


@dataclass(frozen=True)
class LogitModel:
    """``P(T=1 | x) = sigmoid(intercept + coefficients @ x)`` on the raw scale."""

    intercept: float
    coefficients: np.ndarray
    covariance: np.ndarray | None = None
    n_iter: int = 0
    ridge: float = 0.0
    losses: tuple[float, ...] = ()

    @property
    def standard_errors(self) -> np.ndarray:
        """Standard errors of ``[intercept, *coefficients]``."""
        if self.covariance is None:
            raise ValueError("model carries no covariance")
        return np.sqrt(np.diag(self.covariance))

    def linear(self, X) -> np.ndarray:
        return self.intercept + np.asarray(X, dtype=np.float64) @ self.coefficients

    def score(self, X) -> np.ndarray:
        return _sigmoid(self.linear(X))


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def propensity_score(model: LogitModel, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.coefficients.shape:
        raise ValueError(f"confounder vector of length {x.size}, model expects "
                         f"{model.coefficients.size}")
    return float(_sigmoid(model.intercept + x @ model.coefficients))


def _objective(beta, Z, t, ridge):
    eta = Z @ beta
    # mean negative log-likelihood, written to avoid overflow
    nll = np.mean(np.logaddexp(0.0, eta) - t * eta)
    return nll + 0.5 * ridge * np.sum(beta[1:] ** 2)


def _newton(Z, t, ridge, max_iter, tol, check_separation):
    n, p = Z.shape
    beta = np.zeros(p)
    pen = np.full(p, ridge)
    pen[0] = 0.0
    loss = _objective(beta, Z, t, ridge)
    losses = [loss]
    it = 0
    for it in range(1, max_iter + 1):
        mu = _sigmoid(Z @ beta)
        grad = Z.T @ (mu - t) / n + pen * beta
        if np.abs(grad).max() <= tol:
            break
        w = mu * (1.0 - mu)
        H = (Z * w[:, None]).T @ Z / n + np.diag(pen)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise SeparationError("singular Hessian while fitting propensity model") from None
        # backtracking keeps the objective monotone
        lr = 1.0
        while True:
            cand = beta - lr * step
            new = _objective(cand, Z, t, ridge)
            if new <= loss + 1e-4 * lr * (-grad @ step) or lr < 1e-10:
                break
            lr *= 0.5
        if new > loss:
            break
        beta, loss = cand, new
        losses.append(loss)
        if check_separation and np.abs(beta[1:]).max(initial=0.0) > SEPARATION_BOUND:
            raise SeparationError(
                "coefficient norm diverging: treatment is separable by the confounders; "
                f"refit with ridge={RIDGE_FALLBACK}")
    mu = _sigmoid(Z @ beta)
    w = mu * (1.0 - mu)
    H = (Z * w[:, None]).T @ Z + n * np.diag(pen)
    try:
        cov = np.linalg.inv(H)
    except np.linalg.LinAlgError:
        cov = None
    return beta, cov, it, tuple(losses)


def fit_propensity(X, treated, *, ridge: float = 0.0, max_iter: int = 500, tol: float = 1e-8,
                   auto_ridge: bool = True) -> LogitModel:
    """Maximum-likelihood logistic regression of treatment on confounders.

    Columns are standardized before fitting (constant columns get a zero
    coefficient) and the result is mapped back to the raw scale. Newton
    steps are damped by backtracking so the loss never increases. Stops when
    the gradient's max-norm is at most ``tol`` or after ``max_iter`` steps.

    Raises:
        SeparationError: treatment is separable and ``auto_ridge`` is off.
            With ``auto_ridge`` the fit is retried once with ``ridge=1e-4``.
    """
    X = np.asarray(X, dtype=np.float64)
    t = np.asarray(treated, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != t.shape[0]:
        raise ValueError("X must be (n, p) with one treatment flag per row")
    if X.shape[0] < 20:
        raise ValueError(f"need at least 20 rows, got {X.shape[0]}")
    if not (t.min() == 0 and t.max() == 1) or not np.isin(t, (0, 1)).all():
        raise ValueError("need both treated and control rows with 0/1 flags")
    if not np.isfinite(X).all():
        raise ValueError("confounders must be finite")

    mu_x = X.mean(axis=0)
    sd_x = X.std(axis=0)
    active = sd_x > 1e-12
    Xs = (X[:, active] - mu_x[active]) / sd_x[active]
    Z = np.hstack([np.ones((X.shape[0], 1)), Xs])
    try:
        beta, cov, it, losses = _newton(Z, t, ridge, max_iter, tol, check_separation=ridge == 0)
    except SeparationError:
        if not auto_ridge or ridge > 0:
            raise
        warnings.warn(f"propensity model separated; refitting with ridge={RIDGE_FALLBACK}",
                      RuntimeWarning, stacklevel=2)
        beta, cov, it, losses = _newton(Z, t, RIDGE_FALLBACK, max_iter, tol, False)
        ridge = RIDGE_FALLBACK

    p = X.shape[1]
    # raw-scale parameters are a linear map A of the standardized ones
    k = int(active.sum())
    A = np.zeros((p + 1, k + 1))
    A[0, 0] = 1.0
    cols = np.flatnonzero(active)
    for j, c in enumerate(cols):
        A[c + 1, j + 1] = 1.0 / sd_x[c]
        A[0, j + 1] = -mu_x[c] / sd_x[c]
    raw = A @ beta
    raw_cov = A @ cov @ A.T if cov is not None else None
    return LogitModel(float(raw[0]), raw[1:], raw_cov, it, ridge, losses)
