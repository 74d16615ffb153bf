"""Targeted posterior for the class proportion.

A Beta prior on ``theta`` is pulled back to the fluctuation parameter ``eps``
through the map ``eps -> theta(eps)`` along the least favorable path and its
Jacobian. The ``eps`` posterior under the submodel likelihood is sampled with
random-walk Metropolis-Hastings and every draw is pushed back through the map.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import betaln

from .data import Dataset
from .exceptions import InvalidMomentsError
from .tmle import LeastFavorablePath, TargetedFit

DEFAULT_LEVELS = (0.95, 0.99)


@dataclass(frozen=True)
class BetaPrior:
    alpha: float
    beta: float

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise InvalidMomentsError(f"Beta parameters must be positive, got ({self.alpha}, {self.beta})")

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    @property
    def variance(self) -> float:
        s = self.alpha + self.beta
        return self.alpha * self.beta / (s * s * (s + 1.0))

    def logpdf(self, theta: float) -> float:
        if not 0.0 < theta < 1.0:
            return -math.inf
        return (
            (self.alpha - 1.0) * math.log(theta)
            + (self.beta - 1.0) * math.log1p(-theta)
            - betaln(self.alpha, self.beta)
        )


def beta_from_moments(mean: float, variance: float) -> BetaPrior:
    """Beta distribution with the given mean and variance."""
    if not 0.0 < mean < 1.0:
        raise InvalidMomentsError(f"mean must lie in (0, 1), got {mean}")
    if not variance > 0.0:
        raise InvalidMomentsError(f"variance must be positive, got {variance}")
    if variance >= mean * (1.0 - mean):
        raise InvalidMomentsError(
            f"variance {variance} must be below mean*(1-mean) = {mean * (1.0 - mean):.6g}"
        )
    alpha = mean * (mean * (1.0 - mean) / variance - 1.0)
    return BetaPrior(alpha, alpha * (1.0 / mean - 1.0))


@dataclass(frozen=True)
class McmcConfig:
    num_samples: int = 100_000
    burn_in: int = 10_000
    thin: int = 1
    proposal_sd: float | str = "auto"
    seed: int = 0
    init_epsilon: float = 0.0
    target_acceptance: tuple[float, float] = (0.30, 0.45)
    adapt_batch: int = 50
    delayed_acceptance: bool = False

    def __post_init__(self):
        if self.num_samples < 2:
            raise ValueError("num_samples must be at least 2")
        if self.burn_in < 0 or self.thin < 1:
            raise ValueError("burn_in must be >= 0 and thin >= 1")
        if self.proposal_sd != "auto" and not float(self.proposal_sd) > 0:
            raise ValueError("proposal_sd must be positive or 'auto'")


@dataclass(frozen=True, eq=False)
class PosteriorSample:
    eps_draws: np.ndarray
    theta_draws: np.ndarray
    acceptance_rate: float
    proposal_sd: float
    summaries: dict
    diagnostics: list[str] = field(default_factory=list)

    @property
    def K(self) -> int:
        return self.theta_draws.size

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["eps", "theta"])
            for e, t in zip(self.eps_draws, self.theta_draws):
                w.writerow([repr(float(e)), repr(float(t))])


def theta_map(epsilon: float, fit: TargetedFit) -> float:
    """Class proportion at fluctuation ``epsilon`` along the fitted least favorable path."""
    return fit.path().theta(epsilon)


def theta_map_deriv(epsilon: float, fit: TargetedFit) -> float:
    return fit.path().dtheta(epsilon)


class _LogPosterior:
    """Callable ``eps -> (log posterior, theta)`` bound to one dataset, fit and prior."""

    def __init__(self, dataset: Dataset, fit: TargetedFit, prior: BetaPrior, use_likelihood: bool = True):
        self.path = fit.path(dataset)
        self.prior = prior
        self.use_likelihood = use_likelihood

    def __call__(self, eps: float) -> tuple[float, float]:
        ll, theta, dtheta = self.path.evaluate(eps)
        if not (0.0 < theta < 1.0) or dtheta == 0.0 or not math.isfinite(dtheta):
            return -math.inf, theta
        lp = math.log(abs(dtheta)) + self.prior.logpdf(theta)
        if self.use_likelihood:
            lp += ll
        return (lp if math.isfinite(lp) else -math.inf), theta


def log_posterior_eps(epsilon: float, dataset: Dataset, fit: TargetedFit, prior: BetaPrior) -> float:
    """Unnormalized log density of the ``eps`` posterior; ``-inf`` outside the prior support."""
    return _LogPosterior(dataset, fit, prior)(epsilon)[0]


def auto_proposal_sd(fit: TargetedFit) -> float:
    """``2.4`` times the asymptotic posterior sd of ``eps``, ``1/sqrt(n * P_n lambda^2)``."""
    return 2.4 / math.sqrt(fit.n * fit.lambda_sq)


def sample_posterior(
    dataset: Dataset,
    fit: TargetedFit,
    prior: BetaPrior,
    config: McmcConfig = McmcConfig(),
    use_likelihood: bool = True,
    levels: Sequence[float] = DEFAULT_LEVELS,
) -> PosteriorSample:
    """Random-walk Metropolis-Hastings on ``eps`` with Gaussian proposals.

    The proposal scale adapts during burn-in (Robbins-Monro on the log scale,
    toward the middle of ``config.target_acceptance``) and is frozen afterwards.
    With ``config.delayed_acceptance`` each proposal first passes a test
    against a Gaussian fitted to the burn-in states, and only survivors pay
    for an exact evaluation; the second stage corrects for the screen so the
    chain still targets the exact posterior.
    ``use_likelihood=False`` samples the pulled-back prior alone.
    """
    diagnostics: list[str] = []
    if config.num_samples < 1000:
        msg = f"num_samples={config.num_samples} is below 1000; summaries may be unstable"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        diagnostics.append(msg)
    logpost = _LogPosterior(dataset, fit, prior, use_likelihood)
    rng = np.random.default_rng(config.seed)
    sd = auto_proposal_sd(fit) if config.proposal_sd == "auto" else float(config.proposal_sd)
    target = 0.5 * (config.target_acceptance[0] + config.target_acceptance[1])

    eps = float(config.init_epsilon)
    lp, theta = logpost(eps)
    if not math.isfinite(lp):
        raise ValueError(f"initial epsilon {eps} has zero posterior density")

    # burn-in with adaptation
    log_sd = math.log(sd)
    batch_acc = 0
    n_batch = 0
    z = rng.standard_normal(config.burn_in)
    logu = np.log(rng.random(config.burn_in))
    burn_eps = np.empty(config.burn_in)
    for i in range(config.burn_in):
        prop = eps + sd * z[i]
        lp_p, th_p = logpost(prop)
        if logu[i] < lp_p - lp:
            eps, lp, theta = prop, lp_p, th_p
            batch_acc += 1
        if (i + 1) % config.adapt_batch == 0:
            n_batch += 1
            log_sd += (batch_acc / config.adapt_batch - target) * min(1.0, 2.0 / math.sqrt(n_batch))
            sd = math.exp(log_sd)
            batch_acc = 0
        burn_eps[i] = eps

    total = config.num_samples * config.thin
    z = rng.standard_normal(total)
    logu = np.log(rng.random(total))
    screen = None
    if config.delayed_acceptance and burn_eps.size >= 100:
        # Gaussian surrogate from the second half of burn-in; a cheap first-stage
        # test that leaves the target unchanged
        tail = burn_eps[burn_eps.size // 2 :]
        mu, s2 = float(tail.mean()), float(tail.var())
        if s2 > 0:
            screen = (mu, 0.5 / s2)
            logu1 = np.log(rng.random(total))
    eps_draws = np.empty(config.num_samples)
    theta_draws = np.empty(config.num_samples)
    accepted = 0
    k = 0
    for i in range(total):
        prop = eps + sd * z[i]
        if screen is None:
            lp_p, th_p = logpost(prop)
            ok = logu[i] < lp_p - lp
        else:
            mu, c = screen
            ds = c * ((eps - mu) ** 2 - (prop - mu) ** 2)
            ok = logu1[i] < ds
            if ok:
                lp_p, th_p = logpost(prop)
                ok = logu[i] < lp_p - lp - ds
        if ok:
            eps, lp, theta = prop, lp_p, th_p
            accepted += 1
        if (i + 1) % config.thin == 0:
            eps_draws[k] = eps
            theta_draws[k] = theta
            k += 1
    rate = accepted / total
    if not 0.05 <= rate <= 0.8:
        msg = f"acceptance rate {rate:.3f} outside [0.05, 0.8]"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        diagnostics.append(msg)
    return PosteriorSample(eps_draws, theta_draws, rate, sd, summarize(theta_draws, levels), diagnostics)


def summarize(draws: np.ndarray | PosteriorSample, levels: Sequence[float] = DEFAULT_LEVELS) -> dict:
    """Mean, median, sd and central quantile intervals of the draws."""
    if isinstance(draws, PosteriorSample):
        draws = draws.theta_draws
    x = np.asarray(draws, dtype=np.float64)
    if x.size < 2:
        raise ValueError("need at least two draws")
    mean = math.fsum(x) / x.size
    sd = math.sqrt(math.fsum((x - mean) ** 2) / (x.size - 1))
    out = {"mean": mean, "median": float(np.median(x)), "sd": sd}
    for level in levels:
        lo, hi = np.quantile(x, [(1.0 - level) / 2.0, (1.0 + level) / 2.0])
        out[f"ci{round(level * 100):d}"] = [float(lo), float(hi)]
    return out


def posterior_report(fit: TargetedFit, sample: PosteriorSample) -> dict:
    """JSON-ready summary of a targeted posterior run."""
    s = sample.summaries
    report = {
        "tmle": fit.theta_tilde,
        "se": fit.se,
        "converged": fit.converged,
        "post_mean": s["mean"],
        "post_median": s["median"],
        "post_sd": s["sd"],
        "acceptance_rate": sample.acceptance_rate,
        "K": sample.K,
    }
    report.update({k: v for k, v in s.items() if k.startswith("ci")})
    return report


def write_report(path, report: dict) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
