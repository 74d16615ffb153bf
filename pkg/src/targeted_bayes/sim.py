"""Monte Carlo study of the targeted posterior's frequentist behaviour.

Data come from a three-covariate logistic design::

    X_j ~ Uniform(-1, 1), j = 1, 2, 3
    L | X ~ Bernoulli(expit(X1 + X2 + X3))
    Y | L=1, X ~ Bernoulli(expit(1 - X1 - X2 - X3))

Nuisance models are either correctly specified or restricted to ``X1``,
which gives four scenarios (a)-(d). Each cell of scenario x prior x n is
replicated and summarized by relative efficiency, credible-interval coverage
and scaled bias of the posterior mean.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import integrate
from scipy.special import expit

from .bayes import BetaPrior, McmcConfig, beta_from_moments, sample_posterior
from .data import Dataset, SamplingDesign, estimate_rho, make_folds
from .exceptions import TargetedBayesError
from .nuisance import NuisanceSpec, fit_cross_fitted, fit_full_sample
from .tmle import run_tmle

log = logging.getLogger(__name__)

N_COVARIATES = 3
TRUE_THETA_REPORTED = 0.77
INCORRECT_MEAN = 0.23
LARGE_VARIANCE = 0.16
SMALL_VARIANCE = 0.018
SAMPLE_SIZES = (400, 900, 1600, 2500, 4900)
_CHUNK = 1_000_000


def true_g(X: np.ndarray) -> np.ndarray:
    return expit(X.sum(axis=1))


def true_m(X: np.ndarray) -> np.ndarray:
    return expit(1.0 - X.sum(axis=1))


# -- data generation -------------------------------------------------------


@dataclass(frozen=True)
class DgpSpec:
    n: int
    seed: int = 0

    def __post_init__(self):
        if self.n < 20:
            raise ValueError("n must be at least 20")


def generate(spec: DgpSpec, rng: np.random.Generator | None = None) -> Dataset:
    """Draw one dataset; ``rng`` overrides ``spec.seed`` when given."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    n = spec.n
    X = rng.uniform(-1.0, 1.0, size=(n, N_COVARIATES))
    L = (rng.random(n) < true_g(X)).astype(np.int8)
    y_draw = (rng.random(n) < true_m(X)).astype(np.float64)
    Y = np.where(L == 1, y_draw, np.nan)
    return Dataset(X, L, Y)


# -- oracle quantities -----------------------------------------------------


@dataclass(frozen=True)
class Oracle:
    theta: float
    theta_mc_error: float
    bound: float
    bound_mc_error: float
    rho: float
    precision: int
    method: str

    def as_dict(self) -> dict:
        return {k: (float(v) if isinstance(v, float) else v) for k, v in dataclasses.asdict(self).items()}


def _chunks(precision: int, seed: int):
    ss = np.random.SeedSequence(seed)
    done = 0
    for child in ss.spawn(math.ceil(precision / _CHUNK)):
        size = min(_CHUNK, precision - done)
        done += size
        yield np.random.default_rng(child), size


def _oracle_mc(precision: int, seed: int, m_fn: Callable, g_fn: Callable) -> Oracle:
    sums = np.zeros(5)
    for rng, size in _chunks(precision, seed):
        X = rng.uniform(-1.0, 1.0, size=(size, N_COVARIATES))
        m, g = m_fn(X), g_fn(X)
        sums += [g.sum(), ((1 - g) * m).sum(), (1 - g).sum(), 0.0, 0.0]
    N = precision
    rho = sums[0] / N
    theta = sums[1] / sums[2]
    # second pass for the error terms, same draws
    acc = np.zeros(4)
    for rng, size in _chunks(precision, seed):
        X = rng.uniform(-1.0, 1.0, size=(size, N_COVARIATES))
        m, g = m_fn(X), g_fn(X)
        r = (1 - g) * (m - theta)
        psi = (1 - g) / (1 - rho) ** 2 * ((1 - g) / g * m * (1 - m) + (m - theta) ** 2)
        acc += [(r**2).sum(), psi.sum(), (psi**2).sum(), 0.0]
    mean_1mg = sums[2] / N
    theta_err = math.sqrt(acc[0] / N) / mean_1mg / math.sqrt(N)
    bound = acc[1] / N
    bound_err = math.sqrt(max(acc[2] / N - bound**2, 0.0) / N)
    return Oracle(theta, theta_err, bound, bound_err, rho, precision, "mc")


def _sum_density(s: float) -> float:
    # density of X1+X2+X3 with X_j ~ U(-1, 1)
    t = (s + 3.0) / 2.0
    if t < 0 or t > 3:
        return 0.0
    if t < 1:
        f = t * t / 2
    elif t < 2:
        f = (-2 * t * t + 6 * t - 3) / 2
    else:
        f = (3 - t) ** 2 / 2
    return f / 2.0


def _oracle_quadrature() -> Oracle:
    def E(h):
        return sum(
            integrate.quad(lambda s: h(s) * _sum_density(s), a, b, epsabs=1e-13, epsrel=1e-12)[0]
            for a, b in ((-3, -1), (-1, 1), (1, 3))
        )

    g = expit
    m = lambda s: expit(1.0 - s)  # noqa: E731
    rho = E(g)
    theta = E(lambda s: (1 - g(s)) * m(s)) / E(lambda s: 1 - g(s))
    bound = E(
        lambda s: (1 - g(s)) / (1 - rho) ** 2 * ((1 - g(s)) / g(s) * m(s) * (1 - m(s)) + (m(s) - theta) ** 2)
    )
    return Oracle(theta, 0.0, bound, 0.0, rho, 0, "quadrature")


@lru_cache(maxsize=16)
def oracle_values(
    precision: int = 10**7,
    seed: int = 20190101,
    method: str = "mc",
    m_fn: Callable | None = None,
    g_fn: Callable | None = None,
) -> Oracle:
    """True class proportion and efficiency bound under the simulation law.

    ``method="mc"`` averages over ``precision`` covariate draws and reports
    Monte Carlo errors; ``method="quadrature"`` integrates exactly over the
    density of ``X1+X2+X3`` (only for the built-in nuisance functions).
    """
    if method == "quadrature":
        if m_fn is not None or g_fn is not None:
            raise ValueError("quadrature only supports the built-in nuisance functions")
        return _oracle_quadrature()
    if method != "mc":
        raise ValueError(f"unknown oracle method {method!r}")
    return _oracle_mc(precision, seed, m_fn or true_m, g_fn or true_g)


def true_theta(precision: int = 10**7, seed: int = 20190101, m_fn: Callable | None = None) -> float:
    return oracle_values(precision, seed, "mc", m_fn).theta


def efficiency_bound(precision: int = 10**7, seed: int = 20190101) -> float:
    return oracle_values(precision, seed, "mc").bound


def eif_variance_mc(precision: int, seed: int, theta: float, rho: float) -> tuple[float, float]:
    """Mean of ``lambda(Z)^2`` under the true law, with its Monte Carlo error."""
    s1 = s2 = 0.0
    for rng, size in _chunks(precision, seed):
        X = rng.uniform(-1.0, 1.0, size=(size, N_COVARIATES))
        g, m = true_g(X), true_m(X)
        L = rng.random(size) < g
        Y = rng.random(size) < m
        lam = np.where(L, (1 - g) / (g * (1 - rho)) * (Y - m), (m - theta) / (1 - rho))
        sq = lam * lam
        s1 += sq.sum()
        s2 += (sq * sq).sum()
    mean = s1 / precision
    return mean, math.sqrt(max(s2 / precision - mean**2, 0.0) / precision)


# -- scenarios and priors --------------------------------------------------

_FULL = (0, 1, 2)
_X1 = (0,)
SCENARIOS = {
    "a": (_FULL, _FULL),
    "b": (_X1, _FULL),
    "c": (_FULL, _X1),
    "d": (_X1, _X1),
}
PRIORS = ("p1", "p2", "p3", "p4")


@dataclass(frozen=True)
class ScenarioSpec:
    """Nuisance working models; ``m_covariates``/``g_covariates`` are 0-based columns."""

    id: str

    def __post_init__(self):
        if self.id not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.id!r}")

    @property
    def m_covariates(self) -> tuple[int, ...]:
        return SCENARIOS[self.id][0]

    @property
    def g_covariates(self) -> tuple[int, ...]:
        return SCENARIOS[self.id][1]

    def nuisance_spec(self) -> NuisanceSpec:
        return NuisanceSpec(self.m_covariates, self.g_covariates)


@dataclass(frozen=True)
class PriorSpec:
    id: str
    mean: float
    variance: float

    @classmethod
    def from_id(
        cls,
        id: str,
        large_variance: float = LARGE_VARIANCE,
        small_variance: float = SMALL_VARIANCE,
        correct_mean: float = TRUE_THETA_REPORTED,
        incorrect_mean: float = INCORRECT_MEAN,
    ) -> PriorSpec:
        """(p1) correct mean, large variance; (p2) correct, small; (p3) incorrect, large; (p4) incorrect, small."""
        table = {
            "p1": (correct_mean, large_variance),
            "p2": (correct_mean, small_variance),
            "p3": (incorrect_mean, large_variance),
            "p4": (incorrect_mean, small_variance),
        }
        if id not in table:
            raise ValueError(f"unknown prior {id!r}")
        return cls(id, *table[id])


def prior_from_spec(spec: PriorSpec) -> BetaPrior:
    return beta_from_moments(spec.mean, spec.variance)


# -- study -----------------------------------------------------------------


@dataclass(frozen=True)
class StudyConfig:
    scenarios: tuple[str, ...] = ("a", "b", "c", "d")
    priors: tuple[str, ...] = PRIORS
    sample_sizes: tuple[int, ...] = SAMPLE_SIZES
    reps: int = 200
    seed: int = 2019
    folds: int = 10
    crossfit: bool = True
    num_samples: int = 20_000
    burn_in: int = 2_000
    delayed_acceptance: bool = True
    large_variance: float = LARGE_VARIANCE
    small_variance: float = SMALL_VARIANCE
    oracle_precision: int = 10**7
    oracle_seed: int = 20190101
    oracle_method: str = "mc"

    def __post_init__(self):
        for name in ("scenarios", "priors", "sample_sizes"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for s in self.scenarios:
            ScenarioSpec(s)
        for p in self.priors:
            PriorSpec.from_id(p)
        if any(n < 20 for n in self.sample_sizes):
            raise ValueError("sample sizes must be at least 20")
        if self.reps < 1:
            raise ValueError("reps must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> StudyConfig:
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown study config keys: {sorted(unknown)}")
        return cls(**d)

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)

    def cell_key(self) -> dict:
        """Settings that determine the result of any single cell."""
        d = self.as_dict()
        for k in ("scenarios", "priors", "sample_sizes", "oracle_precision", "oracle_seed", "oracle_method"):
            d.pop(k)
        return d

    def hash(self) -> str:
        return _hash(self.as_dict())

    def cells(self) -> list[tuple[str, str, int]]:
        return [(s, p, n) for s in self.scenarios for p in self.priors for n in self.sample_sizes]


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def run_rep(config: StudyConfig, scenario: str, prior: str, n: int, rep: int) -> dict:
    """One replication; datasets and folds are shared across scenarios and priors."""
    s_idx = "abcd".index(scenario)
    p_idx = PRIORS.index(prior)
    record = {"rep": rep, "ok": False}
    try:
        data = generate(DgpSpec(n), _stream(config.seed, 0, n, rep))
        spec = ScenarioSpec(scenario).nuisance_spec()
        if config.crossfit:
            folds = make_folds(n, config.folds, _stream(config.seed, 1, n, rep), strata=data.label)
            nuisance = fit_cross_fitted(data, folds, spec)
        else:
            nuisance = fit_full_sample(data, spec)
        fit = run_tmle(data, nuisance, estimate_rho(data, SamplingDesign.random()))
        record.update(theta_tilde=fit.theta_tilde, se=fit.se, converged=fit.converged, iterations=fit.n_iter)
        if not fit.converged:
            record["reason"] = "tmle did not converge"
            return record
        prior_beta = prior_from_spec(
            PriorSpec.from_id(prior, config.large_variance, config.small_variance)
        )
        mcmc_seed = int(np.random.SeedSequence(config.seed, spawn_key=(2, n, rep, s_idx, p_idx)).generate_state(1, np.uint64)[0])
        mcmc = McmcConfig(
            num_samples=config.num_samples,
            burn_in=config.burn_in,
            seed=mcmc_seed,
            delayed_acceptance=config.delayed_acceptance,
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            post = sample_posterior(data, fit, prior_beta, mcmc, levels=(0.95,))
        s = post.summaries
        record.update(
            ok=True,
            post_mean=s["mean"],
            post_sd=s["sd"],
            ci95_lo=s["ci95"][0],
            ci95_hi=s["ci95"][1],
            acceptance=post.acceptance_rate,
        )
    except (TargetedBayesError, ValueError, ArithmeticError) as exc:
        record["reason"] = f"{type(exc).__name__}: {exc}"
    return record


@dataclass(frozen=True)
class MetricsRow:
    scenario: str
    prior: str
    n: int
    reps: int
    n_ok: int
    n_failed: int
    rel_efficiency: float
    rel_efficiency_mc_se: float
    coverage95: float
    coverage95_mc_se: float
    sqrt_n_abs_bias: float
    sqrt_n_abs_bias_mc_se: float
    mean_post_sd: float
    mean_tmle_se: float
    tmle_rel_efficiency: float
    tmle_coverage95: float
    mean_acceptance: float

    @classmethod
    def fields(cls) -> list[str]:
        return [f.name for f in dataclasses.fields(cls)]


def aggregate(scenario: str, prior: str, n: int, records: Sequence[dict], oracle: Oracle) -> MetricsRow:
    ok = [r for r in sorted(records, key=lambda r: r["rep"]) if r["ok"]]
    R = len(ok)
    nan = float("nan")
    if R == 0:
        return MetricsRow(scenario, prior, n, len(records), 0, len(records), *([nan] * 11))
    theta0, bound = float(oracle.theta), float(oracle.bound)
    err = np.array([r["post_mean"] for r in ok]) - theta0
    sq = err**2
    cover = np.array([r["ci95_lo"] <= theta0 <= r["ci95_hi"] for r in ok], dtype=float)
    tm = np.array([r["theta_tilde"] for r in ok])
    se = np.array([r["se"] for r in ok])
    sd_or_0 = lambda x: float(x.std(ddof=1)) if x.size > 1 else 0.0  # noqa: E731
    cov = float(cover.mean())
    return MetricsRow(
        scenario=scenario,
        prior=prior,
        n=n,
        reps=len(records),
        n_ok=R,
        n_failed=len(records) - R,
        rel_efficiency=float(n * sq.mean() / bound),
        rel_efficiency_mc_se=n * sd_or_0(sq) / math.sqrt(R) / bound,
        coverage95=cov,
        coverage95_mc_se=math.sqrt(cov * (1 - cov) / R),
        sqrt_n_abs_bias=float(math.sqrt(n) * abs(err.mean())),
        sqrt_n_abs_bias_mc_se=math.sqrt(n) * sd_or_0(err) / math.sqrt(R),
        mean_post_sd=float(np.mean([r["post_sd"] for r in ok])),
        mean_tmle_se=float(se.mean()),
        tmle_rel_efficiency=float(n * np.mean((tm - theta0) ** 2) / bound),
        tmle_coverage95=float(np.mean(np.abs(tm - theta0) <= 1.959963984540054 * se)),
        mean_acceptance=float(np.mean([r["acceptance"] for r in ok])),
    )


def _run_rep_args(args):
    return run_rep(*args)


def _checkpoint_path(directory: Path, config: StudyConfig, cell) -> Path:
    s, p, n = cell
    return directory / f"cell_{s}_{p}_{n}_{_hash(config.cell_key())}.json"


def run_cell(config: StudyConfig, cell, threads: int = 1, pool=None) -> list[dict]:
    s, p, n = cell
    args = [(config, s, p, n, rep) for rep in range(config.reps)]
    if pool is None:
        return [run_rep(*a) for a in args]
    return list(pool.map(_run_rep_args, args, chunksize=max(1, config.reps // (4 * threads))))


@dataclass
class StudyResult:
    rows: list[MetricsRow]
    oracle: Oracle
    config: StudyConfig
    records: dict = field(default_factory=dict)

    @property
    def failure_counts(self) -> dict:
        return {f"{r.scenario}/{r.prior}/{r.n}": r.n_failed for r in self.rows}


def run_study(
    config: StudyConfig,
    threads: int = 1,
    checkpoint_dir: str | Path | None = None,
    max_cells: int | None = None,
) -> StudyResult:
    """Run every cell of the grid and aggregate metrics.

    Per-replication random streams are keyed by ``(seed, n, rep, scenario,
    prior)``, so results do not depend on ``threads``. With ``checkpoint_dir``
    each finished cell is saved and reused on the next call; ``max_cells``
    stops after that many newly computed cells (used to test resumption).
    """
    if config.reps < 50:
        log.warning("reps=%d is below 50; metrics will be noisy", config.reps)
    oracle = oracle_values(config.oracle_precision, config.oracle_seed, config.oracle_method)
    directory = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if directory is not None:
        directory.mkdir(parents=True, exist_ok=True)
    pool = ProcessPoolExecutor(max_workers=threads) if threads > 1 else None
    rows, all_records = [], {}
    computed = 0
    try:
        for cell in config.cells():
            path = _checkpoint_path(directory, config, cell) if directory is not None else None
            if path is not None and path.exists():
                records = json.loads(path.read_text())["records"]
            else:
                if max_cells is not None and computed >= max_cells:
                    raise StudyInterrupted(computed)
                log.info("cell %s/%s/n=%d: %d reps", *cell, config.reps)
                records = run_cell(config, cell, threads, pool)
                computed += 1
                if path is not None:
                    tmp = path.with_suffix(".tmp")
                    tmp.write_text(json.dumps({"cell": list(cell), "records": records}))
                    tmp.replace(path)
            all_records[cell] = records
            rows.append(aggregate(*cell, records, oracle))
    finally:
        if pool is not None:
            pool.shutdown()
    return StudyResult(rows, oracle, config, all_records)


class StudyInterrupted(Exception):
    """Raised when ``max_cells`` stops a study before the grid is complete."""


def write_metrics_csv(rows: Sequence[MetricsRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MetricsRow.fields())
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, float) else v for v in dataclasses.astuple(r)])


def read_metrics_csv(path: str | Path) -> list[MetricsRow]:
    types = {f.name: f.type for f in dataclasses.fields(MetricsRow)}
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(types) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"metrics CSV is missing columns {sorted(missing)}")
        for line in reader:
            vals = {}
            for k, t in types.items():
                conv = {"str": str, "int": int, "float": float}[t]
                vals[k] = conv(line[k])
            rows.append(MetricsRow(**vals))
    return rows
