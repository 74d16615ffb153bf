"""Logistic-regression nuisance models and cross-fitted prediction.

``m(x) = E(Y | L=1, X=x)`` is fit on labeled rows only and ``g(x) = P(L=1 | X=x)``
on all rows. Covariate subsets select which columns enter each model, which
is how misspecified working models are expressed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy.special import expit

from .data import Dataset, FoldAssignment
from .exceptions import DegenerateTargetError, FoldStarvationError, NumericalError

G_BOUND = 1e-3
M_BOUND = 1e-6
COEF_LIMIT = 30.0
SEPARATION_RESIDUAL = 1e-6


@dataclass(frozen=True)
class NuisanceSpec:
    """Covariate subsets (0-based column indices) and solver settings.

    An empty subset gives an intercept-only model.
    """

    m_covariates: tuple[int, ...] = ()
    g_covariates: tuple[int, ...] = ()
    include_intercept: bool = True
    max_iter: int = 100
    tol: float = 1e-8
    g_bound: float = G_BOUND
    m_bound: float = M_BOUND

    def __post_init__(self):
        object.__setattr__(self, "m_covariates", tuple(int(j) for j in self.m_covariates))
        object.__setattr__(self, "g_covariates", tuple(int(j) for j in self.g_covariates))
        if not self.include_intercept and not (self.m_covariates and self.g_covariates):
            raise ValueError("a model without intercept needs at least one covariate")

    @classmethod
    def all_covariates(cls, d: int, **kw) -> NuisanceSpec:
        return cls(tuple(range(d)), tuple(range(d)), **kw)


@dataclass(frozen=True, eq=False)
class LogisticModel:
    coefficients: np.ndarray
    covariate_subset: tuple[int, ...]
    include_intercept: bool = True
    bound: float = 0.0
    converged: bool = True
    separated: bool = False
    n_iter: int = 0

    def linear_predictor(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        Z = X[:, list(self.covariate_subset)]
        if self.include_intercept:
            return self.coefficients[0] + Z @ self.coefficients[1:]
        return Z @ self.coefficients

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        p = expit(self.linear_predictor(X))
        if self.bound > 0:
            p = np.clip(p, self.bound, 1.0 - self.bound)
        return p


def _design(X: np.ndarray, subset: Sequence[int], intercept: bool) -> np.ndarray:
    Z = np.asarray(X, dtype=np.float64)[:, list(subset)]
    if intercept:
        Z = np.column_stack([np.ones(Z.shape[0]), Z])
    return Z


def _loglik(eta: np.ndarray, y: np.ndarray) -> float:
    # sum y*eta - log(1 + e^eta), stable for large |eta|
    return float(y @ eta - np.sum(np.logaddexp(0.0, eta)))


def fit_logistic(
    features: np.ndarray,
    targets: np.ndarray,
    subset: Sequence[int],
    spec: NuisanceSpec | None = None,
    bound: float = 0.0,
) -> LogisticModel:
    """Maximum likelihood logistic regression by Newton-Raphson with step halving.

    Stops when the sup-norm of the gradient is below ``spec.tol``. If a
    coefficient exceeds 30 in magnitude (quasi-separation) the iterate is
    clamped, returned, and flagged with ``separated=True``.
    """
    spec = spec or NuisanceSpec()
    y = np.asarray(targets, dtype=np.float64)
    if y.size < 2:
        raise DegenerateTargetError("need at least two rows")
    if np.all(y == y[0]):
        raise DegenerateTargetError("all targets are identical")
    Z = _design(features, subset, spec.include_intercept)
    beta = np.zeros(Z.shape[1])
    if spec.include_intercept:
        ybar = y.mean()
        beta[0] = np.log(ybar / (1.0 - ybar))
    eta = Z @ beta
    ll = _loglik(eta, y)
    converged = separated = False
    it = 0
    for it in range(1, spec.max_iter + 1):
        p = expit(eta)
        grad = Z.T @ (y - p)
        if np.max(np.abs(grad)) <= spec.tol:
            converged = True
            it -= 1
            break
        w = p * (1.0 - p)
        if not np.all(np.isfinite(w)):
            raise NumericalError("non-finite IRLS working weights")
        info = (Z * w[:, None]).T @ Z
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            eta_c = Z @ cand
            ll_c = _loglik(eta_c, y)
            if ll_c >= ll or t < 1e-10:
                break
            t *= 0.5
        if ll_c < ll:
            # no ascent possible at machine precision
            converged = np.max(np.abs(grad)) <= np.sqrt(spec.tol)
            break
        beta, eta, ll = cand, eta_c, ll_c
        if np.max(np.abs(beta)) > COEF_LIMIT:
            beta = np.clip(beta, -COEF_LIMIT, COEF_LIMIT)
            separated = True
            break
    if not separated and np.max(np.abs(y - expit(eta))) < SEPARATION_RESIDUAL:
        # the gradient vanishes before the coefficient limit when every
        # target is predicted almost exactly
        separated = True
    return LogisticModel(
        coefficients=beta,
        covariate_subset=tuple(subset),
        include_intercept=spec.include_intercept,
        bound=bound,
        converged=converged,
        separated=separated,
        n_iter=it,
    )


def predict_proba(model: LogisticModel, x: np.ndarray) -> float | np.ndarray:
    """Bounded predicted probability for one covariate vector or a matrix of rows."""
    x = np.asarray(x, dtype=np.float64)
    p = model.predict_proba(x)
    return float(p[0]) if x.ndim == 1 else p


class Learner(Protocol):
    """Anything that fits binary targets and returns an object with ``predict_proba``."""

    def fit(self, X: np.ndarray, y: np.ndarray): ...


@dataclass(frozen=True)
class LogisticLearner:
    subset: tuple[int, ...]
    spec: NuisanceSpec = field(default_factory=NuisanceSpec)
    bound: float = 0.0

    def fit(self, X: np.ndarray, y: np.ndarray) -> LogisticModel:
        return fit_logistic(X, y, self.subset, self.spec, self.bound)


@dataclass(frozen=True, eq=False)
class CrossFittedNuisance:
    """Out-of-fold predictions ``m_hat`` and ``g_hat`` with the per-fold models."""

    m_hat: np.ndarray
    g_hat: np.ndarray
    fold_models: tuple
    folds: FoldAssignment | None = None

    @property
    def flags(self) -> list[str]:
        out = []
        for j, pair in enumerate(self.fold_models):
            for name, model in zip("mg", pair):
                if getattr(model, "separated", False):
                    out.append(f"fold {j}: {name} model hit the coefficient limit")
                elif not getattr(model, "converged", True):
                    out.append(f"fold {j}: {name} model did not converge")
        return out


def _learners(spec: NuisanceSpec, m_learner, g_learner):
    m_learner = m_learner or LogisticLearner(spec.m_covariates, spec, spec.m_bound)
    g_learner = g_learner or LogisticLearner(spec.g_covariates, spec, spec.g_bound)
    return m_learner, g_learner


def _bounded(model, X: np.ndarray, bound: float) -> np.ndarray:
    return np.clip(model.predict_proba(X), bound, 1.0 - bound)


def fit_cross_fitted(
    dataset: Dataset,
    folds: FoldAssignment,
    spec: NuisanceSpec,
    m_learner: Learner | None = None,
    g_learner: Learner | None = None,
) -> CrossFittedNuisance:
    """Fit ``m`` and ``g`` on each training fold and predict on the held-out fold."""
    if folds.n != dataset.n:
        raise ValueError("fold assignment does not match dataset size")
    m_learner, g_learner = _learners(spec, m_learner, g_learner)
    X, L = dataset.features, dataset.label
    Y = dataset.outcome_filled()
    m_hat = np.empty(dataset.n)
    g_hat = np.empty(dataset.n)
    models = []
    for j in range(folds.J):
        train, valid = folds.training(j), folds.validation(j)
        lab = train[L[train] == 1]
        if lab.size == 0:
            raise FoldStarvationError(f"training fold {j} has no labeled units")
        m_model = m_learner.fit(X[lab], Y[lab])
        g_model = g_learner.fit(X[train], L[train])
        m_hat[valid] = _bounded(m_model, X[valid], spec.m_bound)
        g_hat[valid] = _bounded(g_model, X[valid], spec.g_bound)
        models.append((m_model, g_model))
    return CrossFittedNuisance(m_hat, g_hat, tuple(models), folds)


def fit_full_sample(
    dataset: Dataset,
    spec: NuisanceSpec,
    m_learner: Learner | None = None,
    g_learner: Learner | None = None,
) -> CrossFittedNuisance:
    """In-sample nuisance fits (no cross-fitting); same container as the cross-fitted version."""
    m_learner, g_learner = _learners(spec, m_learner, g_learner)
    X, lab = dataset.features, dataset.labeled
    m_model = m_learner.fit(X[lab], dataset.outcome[lab])
    g_model = g_learner.fit(X, dataset.label)
    return CrossFittedNuisance(
        _bounded(m_model, X, spec.m_bound),
        _bounded(g_model, X, spec.g_bound),
        ((m_model, g_model),),
        None,
    )
