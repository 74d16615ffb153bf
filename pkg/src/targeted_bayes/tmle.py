"""Least favorable submodel and the iterative cross-fitted targeted MLE.

A single fluctuation parameter ``eps`` moves all three factors of the
likelihood at once::

    logit m_eps = logit m + eps * H
    logit g_eps = logit g + eps * M
    p_eps(x)   ∝ exp(eps * lambda_X(x)) p(x)

where ``p`` is a set of weights on the sample points (uniform to start).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .eif import CleverCovariates, clever_covariates, eif, plugin_theta
from .nuisance import CrossFittedNuisance

EPS_BRACKET = 10.0
EPS_SCORE_TOL = 1e-10


def logit(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _logsumexp(t: np.ndarray) -> tuple[float, np.ndarray]:
    """Return ``log sum exp(t)`` and the shifted exponentials ``exp(t - max t)``."""
    tmax = t.max()
    q = np.exp(t - tmax)
    return tmax + np.log(q.sum()), q


def _theta_terms(u: np.ndarray, v: np.ndarray, t: np.ndarray):
    """Shared pieces of the parameter map at logits ``u`` (m), ``v`` (g), log-weights ``t``."""
    m = _sigmoid(u)
    one_minus_g = _sigmoid(-v)
    q = np.exp(t - t.max())
    a = q * one_minus_g
    D = a.sum()
    theta = float(a @ m / D)
    return m, one_minus_g, q, a, D, theta


@dataclass(frozen=True, eq=False)
class SubmodelState:
    """Current fluctuated nuisances on the logit scale plus log tilt weights.

    ``log_weights`` are normalized (``sum(exp(log_weights)) == 1``). ``theta``
    is the parameter under the tilted covariate law, ``E_w[(1-g) m] / E_w[1-g]``.
    """

    m_logit: np.ndarray
    g_logit: np.ndarray
    log_weights: np.ndarray
    rho: float
    theta: float = field(init=False)

    def __post_init__(self):
        for name in ("m_logit", "g_logit", "log_weights"):
            a = np.array(getattr(self, name), dtype=np.float64)
            a.setflags(write=False)
            object.__setattr__(self, name, a)
        object.__setattr__(self, "theta", _theta_terms(self.m_logit, self.g_logit, self.log_weights)[-1])

    @classmethod
    def initial(cls, m: np.ndarray, g: np.ndarray, rho: float) -> SubmodelState:
        n = len(m)
        return cls(logit(m), logit(g), np.full(n, -np.log(n)), rho)

    @property
    def n(self) -> int:
        return self.m_logit.size

    @property
    def m(self) -> np.ndarray:
        return _sigmoid(self.m_logit)

    @property
    def g(self) -> np.ndarray:
        return _sigmoid(self.g_logit)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def clever(self) -> CleverCovariates:
        return clever_covariates(self.m, self.g, self.theta, self.rho)


def fluctuate(state: SubmodelState, clever: CleverCovariates, epsilon: float) -> SubmodelState:
    if epsilon == 0.0:
        return state
    t = state.log_weights + epsilon * clever.lambda_X
    lse, _ = _logsumexp(t)
    return SubmodelState(
        state.m_logit + epsilon * clever.H,
        state.g_logit + epsilon * clever.M,
        t - lse,
        state.rho,
    )


class LeastFavorablePath:
    """The one-dimensional submodel through ``state`` in direction ``clever``.

    Evaluates the log-likelihood (up to the constant ``sum log w_i``), its
    first two derivatives, the parameter map and its derivative.
    """

    def __init__(self, state: SubmodelState, clever: CleverCovariates, dataset: Dataset | None = None):
        self.state = state
        self.u0, self.v0, self.t0 = state.m_logit, state.g_logit, state.log_weights
        self.H, self.M, self.lam = clever.H, clever.M, clever.lambda_X
        self.n = state.n
        self.lam_sum = float(self.lam.sum())
        if dataset is not None:
            if dataset.n != self.n:
                raise ValueError("dataset size does not match the submodel state")
            lab = dataset.labeled
            self.L = dataset.label.astype(np.float64)
            self.lab = lab
            # labeled contribution is -softplus(sign * u), sign = -1 for Y=1 and +1 for Y=0
            sign = np.where(dataset.outcome[lab] == 1.0, -1.0, 1.0)
            self.su0 = sign * self.u0[lab]
            self.sH = sign * self.H[lab]
            self.H_lab = self.H[lab]
            self.Y_lab = dataset.outcome[lab]
            self.u0_lab = self.u0[lab]

    # -- parameter map -------------------------------------------------
    def theta(self, eps: float) -> float:
        return _theta_terms(self.u0 + eps * self.H, self.v0 + eps * self.M, self.t0 + eps * self.lam)[-1]

    def _dtheta(self, m, one_minus_g, q, a, D, theta) -> float:
        g = 1.0 - one_minus_g
        inner = (self.lam - g * self.M) * (m - theta) + m * (1.0 - m) * self.H
        return float(a @ inner / D)

    def dtheta(self, eps: float) -> float:
        terms = _theta_terms(self.u0 + eps * self.H, self.v0 + eps * self.M, self.t0 + eps * self.lam)
        return self._dtheta(*terms)

    # -- likelihood ----------------------------------------------------
    def loglik(self, eps: float) -> float:
        ll_m = -_softplus(self.su0 + eps * self.sH).sum()
        v = self.v0 + eps * self.M
        ll_g = self.L @ v - _softplus(v).sum()
        lse, _ = _logsumexp(self.t0 + eps * self.lam)
        return float(ll_m + ll_g + eps * self.lam_sum - self.n * lse)

    def score(self, eps: float) -> float:
        return self.score_and_hessian(eps)[0]

    def score_and_hessian(self, eps: float) -> tuple[float, float]:
        m = _sigmoid(self.u0_lab + eps * self.H_lab)
        g = _sigmoid(self.v0 + eps * self.M)
        _, q = _logsumexp(self.t0 + eps * self.lam)
        w = q / q.sum()
        wl = w @ self.lam
        s = self.H_lab @ (self.Y_lab - m) + self.M @ (self.L - g) + self.lam_sum - self.n * wl
        h = -(self.H_lab**2 @ (m * (1.0 - m))) - (self.M**2 @ (g * (1.0 - g))) - self.n * (w @ self.lam**2 - wl**2)
        return float(s), float(h)

    def evaluate(self, eps: float) -> tuple[float, float, float]:
        """Log-likelihood, parameter map and its derivative in one pass.

        Uses the same expressions as :meth:`theta` so draws and the map agree
        bit for bit; the likelihood reuses the exponentials when no logit is
        large enough to overflow.
        """
        u = self.u0 + eps * self.H
        v = self.v0 + eps * self.M
        t = self.t0 + eps * self.lam
        terms = _theta_terms(u, v, t)
        m, one_minus_g, q, a, D, theta = terms
        x = self.su0 + eps * self.sH
        if max(v.max(), x.max()) < 700.0:
            ll_m = -np.log1p(np.exp(x)).sum()
            ll_g = self.L @ v + np.log(one_minus_g).sum()
            lse = t.max() + np.log(q.sum())
        else:
            ll_m = -_softplus(x).sum()
            ll_g = self.L @ v - _softplus(v).sum()
            lse, _ = _logsumexp(t)
        ll = float(ll_m + ll_g + eps * self.lam_sum - self.n * lse)
        return ll, theta, self._dtheta(*terms)


def submodel_loglik(dataset: Dataset, state: SubmodelState, clever: CleverCovariates, epsilon: float) -> float:
    return LeastFavorablePath(state, clever, dataset).loglik(epsilon)


def _solve_epsilon(path: LeastFavorablePath, tol: float = EPS_SCORE_TOL, bracket: float = EPS_BRACKET):
    """Safeguarded Newton for the root of the (decreasing) score. Returns ``(eps, ok)``."""
    s, h = path.score_and_hessian(0.0)
    if abs(s) <= tol:
        return 0.0, True
    lo, hi = -bracket, bracket
    if path.score(lo) <= 0.0 or path.score(hi) >= 0.0:
        return 0.0, False
    eps = 0.0
    for _ in range(200):
        if s > 0:
            lo = eps
        else:
            hi = eps
        step = -s / h if h < 0 else np.inf
        cand = eps + step
        if not lo < cand < hi:
            cand = 0.5 * (lo + hi)
        if abs(cand - eps) <= 4 * np.finfo(float).eps * max(1.0, abs(eps)):
            eps = cand
            break
        eps = cand
        s, h = path.score_and_hessian(eps)
        if abs(s) <= tol:
            break
    return float(eps), True


def fit_epsilon(dataset: Dataset, state: SubmodelState, clever: CleverCovariates) -> float:
    """Maximum likelihood estimate of the fluctuation along the submodel.

    Returns 0 with a warning when the score does not change sign on [-10, 10].
    """
    eps, ok = _solve_epsilon(LeastFavorablePath(state, clever, dataset))
    if not ok:
        warnings.warn("score has no sign change on the epsilon bracket; returning 0", RuntimeWarning, stacklevel=2)
    return eps


@dataclass(frozen=True, eq=False)
class TargetedFit:
    state: SubmodelState
    clever: CleverCovariates
    theta_tilde: float
    se: float
    converged: bool
    epsilon_trace: list[float]
    score_trace: list[float]
    theta_trace: list[float]
    mean_lambda: float
    lambda_sq: float
    theta_uniform: float
    flags: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return self.state.n

    @property
    def rho(self) -> float:
        return self.state.rho

    @property
    def n_iter(self) -> int:
        return len(self.epsilon_trace)

    def path(self, dataset: Dataset | None = None) -> LeastFavorablePath:
        return LeastFavorablePath(self.state, self.clever, dataset)

    def diagnostics(self) -> dict:
        return {
            "theta_tilde": self.theta_tilde,
            "theta_uniform_weights": self.theta_uniform,
            "se": self.se,
            "rho": self.rho,
            "converged": self.converged,
            "iterations": self.n_iter,
            "mean_lambda": self.mean_lambda,
            "epsilon_trace": list(self.epsilon_trace),
            "score_trace": list(self.score_trace),
            "theta_trace": list(self.theta_trace),
            "flags": list(self.flags),
        }

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.diagnostics(), fh, indent=2)


def run_tmle(
    dataset: Dataset,
    nuisance: CrossFittedNuisance,
    rho: float,
    eps_tol: float = 1e-6,
    score_tol: float | None = None,
    max_iter: int = 200,
) -> TargetedFit:
    """Iterate fit-epsilon / fluctuate until the influence-function equation is solved.

    ``score_tol`` defaults to ``1e-8 * max(1, sd(lambda))`` evaluated at the
    current iterate. Non-convergence is reported through ``converged=False``.
    """
    state = SubmodelState.initial(nuisance.m_hat, nuisance.g_hat, rho)
    eps_trace: list[float] = []
    score_trace: list[float] = []
    theta_trace: list[float] = []
    flags: list[str] = list(nuisance.flags)
    converged = False
    for _ in range(max_iter + 1):
        clever = state.clever()
        lam = eif(dataset, state.m, state.g, state.theta, rho).lambda_
        mean_lam = float(lam.mean())
        tol = score_tol if score_tol is not None else 1e-8 * max(1.0, float(lam.std(ddof=1)))
        score_trace.append(abs(mean_lam))
        theta_trace.append(state.theta)
        if abs(mean_lam) <= tol and (not eps_trace or abs(eps_trace[-1]) <= eps_tol):
            converged = True
            break
        if len(eps_trace) == max_iter:
            break
        eps, ok = _solve_epsilon(LeastFavorablePath(state, clever, dataset))
        if not ok:
            flags.append(f"iteration {len(eps_trace)}: no sign change of the score on the epsilon bracket")
            break
        eps_trace.append(eps)
        state = fluctuate(state, clever, eps)
    n = dataset.n
    return TargetedFit(
        state=state,
        clever=clever,
        theta_tilde=state.theta,
        se=float(np.sqrt(np.mean(lam**2) / n)),
        converged=converged,
        epsilon_trace=eps_trace,
        score_trace=score_trace,
        theta_trace=theta_trace,
        mean_lambda=mean_lam,
        lambda_sq=float(np.mean(lam**2)),
        theta_uniform=plugin_theta(state.m, state.g, np.full(n, 1.0 / n), rho),
        flags=flags,
    )
