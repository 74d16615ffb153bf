"""Efficient influence function for the class proportion in unlabeled data.

For ``theta = E(Y | L=0)`` with nuisances ``m(x) = E(Y | L=1, x)`` and
``g(x) = P(L=1 | x)`` the influence function is

    lambda(Z) = L/g * (1-g)/(1-rho) * (Y - m) + (1-L)/(1-rho) * (m - theta)

and it splits into scores for the outcome, label and covariate factors of
the likelihood, each carried by a "clever covariate".
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Dataset


@dataclass(frozen=True, eq=False)
class CleverCovariates:
    H: np.ndarray
    M: np.ndarray
    lambda_X: np.ndarray
    theta_ref: float
    rho: float


@dataclass(frozen=True, eq=False)
class EifEvaluation:
    lambda_: np.ndarray
    psi: np.ndarray

    @property
    def mean_lambda(self) -> float:
        return float(np.mean(self.lambda_))

    @property
    def mean_psi(self) -> float:
        return float(np.mean(self.psi))

    @property
    def mean_lambda_sq(self) -> float:
        return float(np.mean(self.lambda_**2))


def _check_range(m, g, rho):
    if not 0.0 < rho < 1.0:
        raise ValueError(f"rho must lie in (0, 1), got {rho}")
    if np.any(g <= 0.0) or np.any(g >= 1.0):
        raise ZeroDivisionError("g must lie strictly inside (0, 1)")
    if np.any(m < 0.0) or np.any(m > 1.0):
        raise ValueError("m must lie in [0, 1]")


# H and the centered residual k = (m - theta)/(1 - rho) are shared by the
# influence function and its score components, so the decomposition holds
# up to the rounding of a single addition.
def _outcome_weight(g, rho):
    return (1.0 - g) / (g * (1.0 - rho))


def _centered(m, theta, rho):
    return (m - theta) / (1.0 - rho)


def clever_covariates(m: np.ndarray, g: np.ndarray, theta: float, rho: float) -> CleverCovariates:
    m = np.asarray(m, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    _check_range(m, g, rho)
    k = _centered(m, theta, rho)
    return CleverCovariates(_outcome_weight(g, rho), -k, (1.0 - g) * k, float(theta), float(rho))


def eif(dataset: Dataset, m: np.ndarray, g: np.ndarray, theta: float, rho: float) -> EifEvaluation:
    """Influence function values and the variance integrand ``psi`` at every unit.

    ``psi`` uses the Bernoulli conditional variance ``m (1 - m)``.
    """
    m = np.asarray(m, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    _check_range(m, g, rho)
    L = dataset.label.astype(np.float64)
    Y = dataset.outcome_filled()
    lam = L * _outcome_weight(g, rho) * (Y - m) + (1.0 - L) * _centered(m, theta, rho)
    psi = (1.0 - g) / (1.0 - rho) ** 2 * ((1.0 - g) / g * m * (1.0 - m) + (m - theta) ** 2)
    return EifEvaluation(lam, psi)


def score_components(
    dataset: Dataset, clever: CleverCovariates, m: np.ndarray, g: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Outcome, label and covariate scores; they sum to the influence function."""
    L = dataset.label.astype(np.float64)
    Y = dataset.outcome_filled()
    lam_Y = L * clever.H * (Y - m)
    lam_L = clever.M * (L - g)
    return lam_Y, lam_L, clever.lambda_X.copy()


def plugin_theta(m: np.ndarray, g: np.ndarray, weights: np.ndarray, rho: float) -> float:
    """``sum_i w_i (1 - g_i) m_i / (1 - rho)``: the parameter at fixed labeled fraction ``rho``."""
    w = np.asarray(weights, dtype=np.float64)
    return float(w @ ((1.0 - np.asarray(g)) * np.asarray(m)) / (1.0 - rho))


def tilted_plugin_theta(m: np.ndarray, g: np.ndarray, weights: np.ndarray) -> float:
    """``E_w[(1-g) m] / E_w[1-g]``, i.e. ``E(m(X) | L=0)`` under the weighted covariate law.

    Unlike :func:`plugin_theta` it does not need ``rho`` and is invariant to
    rescaling the weights. It agrees with :func:`plugin_theta` whenever
    ``sum_i w_i (1 - g_i) = 1 - rho``.
    """
    a = np.asarray(weights, dtype=np.float64) * (1.0 - np.asarray(g))
    return float(a @ np.asarray(m) / a.sum())
