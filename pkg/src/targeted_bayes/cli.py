"""Command-line entry point: ``targeted-bayes {estimate,simulate,oracle,report}``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .bayes import BetaPrior, McmcConfig, beta_from_moments, posterior_report, sample_posterior, write_report
from .data import SamplingDesign, estimate_rho, load_csv, make_folds
from .exceptions import TargetedBayesError
from .nuisance import NuisanceSpec, fit_cross_fitted, fit_full_sample
from .sim import (
    MetricsRow,
    StudyConfig,
    _hash,
    oracle_values,
    read_metrics_csv,
    run_study,
    write_metrics_csv,
)
from .tmle import run_tmle

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

log = logging.getLogger("targeted_bayes")

REPORT_METRICS = ("rel_efficiency", "coverage95", "sqrt_n_abs_bias")


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    outputs: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    started: float = field(default_factory=time.perf_counter)

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        doc = {
            "command": self.command,
            "config_hash": _hash(self.config),
            "config": self.config,
            "seed": self.seed,
            "versions": {
                "targeted_bayes": __version__,
                "python": platform.python_version(),
                "numpy": np.__version__,
                "scipy": scipy.__version__,
            },
            "timing_seconds": round(time.perf_counter() - self.started, 3),
            "outputs": sorted(self.outputs),
            **self.extra,
        }
        path.write_text(json.dumps(doc, indent=2))
        return path


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _str_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _covariates(one_based: list[int] | None, d: int, flag: str) -> tuple[int, ...]:
    if one_based is None:
        return tuple(range(d))
    bad = [j for j in one_based if not 1 <= j <= d]
    if bad:
        raise UsageError(f"{flag}: covariate indices {bad} outside 1..{d}")
    return tuple(j - 1 for j in one_based)


def _prior(args) -> BetaPrior:
    moments = args.prior_mean is not None or args.prior_sd is not None
    direct = args.prior_alpha is not None or args.prior_beta is not None
    if moments == direct:
        raise UsageError("give either --prior-mean/--prior-sd or --prior-alpha/--prior-beta")
    if moments:
        if args.prior_mean is None or args.prior_sd is None:
            raise UsageError("--prior-mean and --prior-sd must be given together")
        return beta_from_moments(args.prior_mean, args.prior_sd**2)
    if args.prior_alpha is None or args.prior_beta is None:
        raise UsageError("--prior-alpha and --prior-beta must be given together")
    return BetaPrior(args.prior_alpha, args.prior_beta)


def cmd_estimate(args) -> int:
    out = Path(args.out)
    prior = _prior(args)
    features = _str_list(args.features) if args.features else None
    data = load_csv(args.data, features, args.label_col, args.outcome_col)
    design = SamplingDesign.parse(args.design)
    rho = estimate_rho(data, design)
    spec = NuisanceSpec(
        _covariates(args.m_covs, data.d, "--m-covs"),
        _covariates(args.g_covs, data.d, "--g-covs"),
    )
    rng = np.random.default_rng(np.random.SeedSequence(args.seed, spawn_key=(1,)))
    if args.no_crossfit:
        nuisance = fit_full_sample(data, spec)
    else:
        folds = make_folds(data.n, args.folds, rng, strata=data.label)
        nuisance = fit_cross_fitted(data, folds, spec)
    fit = run_tmle(data, nuisance, rho)
    mcmc_seed = int(np.random.SeedSequence(args.seed, spawn_key=(2,)).generate_state(1, np.uint64)[0])
    config = McmcConfig(
        num_samples=args.mcmc_samples,
        burn_in=args.burn_in,
        thin=args.thin,
        proposal_sd=args.proposal_sd if args.proposal_sd == "auto" else float(args.proposal_sd),
        seed=mcmc_seed,
        delayed_acceptance=args.delayed_acceptance,
    )
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RuntimeWarning)
        sample = sample_posterior(data, fit, prior, config)
    out.mkdir(parents=True, exist_ok=True)
    report = posterior_report(fit, sample)
    report.update(prior={"alpha": prior.alpha, "beta": prior.beta}, rho=rho, n=data.n)
    write_report(out / "posterior.json", report)
    sample.to_csv(out / "draws.csv")
    diagnostics = fit.diagnostics()
    diagnostics["mcmc"] = {
        "acceptance_rate": sample.acceptance_rate,
        "proposal_sd": sample.proposal_sd,
        "warnings": sample.diagnostics,
    }
    (out / "diagnostics.json").write_text(json.dumps(diagnostics, indent=2))
    for w in caught:
        log.warning("%s", w.message)
    manifest = RunManifest(
        "estimate",
        {k: v for k, v in vars(args).items() if k != "func"},
        args.seed,
        ["posterior.json", "draws.csv", "diagnostics.json"],
        {"prior": {"alpha": prior.alpha, "beta": prior.beta}, "converged": fit.converged},
    )
    manifest.write(out)
    print(json.dumps(report, indent=2))
    return 0


def _study_config(args) -> StudyConfig:
    if args.config:
        path = Path(args.config)
        text = path.read_text()
        try:
            raw = tomllib.loads(text) if path.suffix == ".toml" else json.loads(text)
        except (ValueError, tomllib.TOMLDecodeError) as exc:
            raise UsageError(f"cannot parse {path}: {exc}") from None
        raw.pop("output", None)
    else:
        raw = {}
    inline = {
        "scenarios": args.scenarios,
        "priors": args.priors,
        "sample_sizes": args.sizes,
        "reps": args.reps,
        "seed": args.seed,
        "num_samples": args.mcmc_samples,
        "burn_in": args.burn_in,
        "large_variance": args.large_variance,
        "small_variance": args.small_variance,
        "oracle_precision": args.oracle_precision,
    }
    raw.update({k: v for k, v in inline.items() if v is not None})
    if args.no_crossfit:
        raw["crossfit"] = False
    try:
        return StudyConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid study config: {exc}") from None


def cmd_simulate(args) -> int:
    config = _study_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("simulate", config.as_dict(), config.seed)
    result = run_study(config, threads=args.threads, checkpoint_dir=out / "checkpoints")
    write_metrics_csv(result.rows, out / "metrics.csv")
    manifest.outputs.append("metrics.csv")
    manifest.extra = {
        "oracle": result.oracle.as_dict(),
        "failure_counts": result.failure_counts,
        "threads": args.threads,
    }
    manifest.write(out)
    print(f"wrote {len(result.rows)} rows to {out / 'metrics.csv'}")
    return 0


def cmd_oracle(args) -> int:
    o = oracle_values(args.precision, args.seed, args.method)
    doc = {
        "theta_true": o.theta,
        "efficiency_bound": o.bound,
        "mc_error": {"theta_true": o.theta_mc_error, "efficiency_bound": o.bound_mc_error},
        "rho": o.rho,
        "precision": o.precision,
        "method": o.method,
    }
    print(json.dumps(doc, indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "oracle.json").write_text(json.dumps(doc, indent=2))
        RunManifest("oracle", {k: v for k, v in vars(args).items() if k != "func"}, args.seed, ["oracle.json"]).write(out)
    return 0


def cmd_report(args) -> int:
    try:
        rows = read_metrics_csv(args.input)
    except (ValueError, KeyError, OSError) as exc:
        raise UsageError(f"malformed metrics CSV {args.input}: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    order = sorted(rows, key=lambda r: (r.scenario, r.prior, r.n))
    written = []
    for metric in REPORT_METRICS:
        name = f"{metric}.csv"
        with open(out / name, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "scenario", "prior", "value", "mc_se"])
            for r in order:
                w.writerow([r.n, r.scenario, r.prior, repr(getattr(r, metric)), repr(getattr(r, f"{metric}_mc_se"))])
        written.append(name)
    RunManifest("report", {"input": str(args.input)}, None, written).write(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="targeted-bayes", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", help="targeted posterior for a CSV dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--label-col", default="L")
    e.add_argument("--outcome-col", default="Y")
    e.add_argument("--features", help="comma-separated feature columns (default: all others)")
    e.add_argument("--prior-mean", type=float)
    e.add_argument("--prior-sd", type=float)
    e.add_argument("--prior-alpha", type=float)
    e.add_argument("--prior-beta", type=float)
    e.add_argument("--folds", type=int, default=10)
    e.add_argument("--no-crossfit", action="store_true")
    e.add_argument("--design", default="random", help="'random' or 'matched:k'")
    e.add_argument("--m-covs", type=_int_list, help="1-based feature indices for the outcome model")
    e.add_argument("--g-covs", type=_int_list, help="1-based feature indices for the label model")
    e.add_argument("--mcmc-samples", type=int, default=100_000)
    e.add_argument("--burn-in", type=int, default=10_000)
    e.add_argument("--thin", type=int, default=1)
    e.add_argument("--proposal-sd", default="auto")
    e.add_argument("--delayed-acceptance", action="store_true")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("simulate", help="Monte Carlo study over scenarios, priors and sample sizes")
    s.add_argument("--config", help="JSON or TOML study config")
    s.add_argument("--scenarios", type=_str_list)
    s.add_argument("--priors", type=_str_list)
    s.add_argument("--sizes", type=_int_list)
    s.add_argument("--reps", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--mcmc-samples", type=int)
    s.add_argument("--burn-in", type=int)
    s.add_argument("--large-variance", type=float)
    s.add_argument("--small-variance", type=float)
    s.add_argument("--oracle-precision", type=int)
    s.add_argument("--no-crossfit", action="store_true")
    s.add_argument("--threads", type=int, default=1)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    o = sub.add_parser("oracle", help="true class proportion and efficiency bound of the study law")
    o.add_argument("--precision", type=int, default=10**7)
    o.add_argument("--seed", type=int, default=20190101)
    o.add_argument("--method", choices=("mc", "quadrature"), default="mc")
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle)

    r = sub.add_parser("report", help="long-format CSVs per metric from a metrics CSV")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, TargetedBayesError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
