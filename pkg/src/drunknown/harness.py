"""Replicated Monte-Carlo experiments and report files.

An :class:`ExperimentConfig` names an environment preset, the estimators to
run, the sample sizes and the replicate count.  Replicate ``j`` uses the
seed ``seed + j`` for every sample size, so sizes are compared on the same
seed stream.  The known-propensity IPW estimate is always computed because it
is the relative-MSE denominator.

Config files are flat ``key = value`` text; ``#`` starts a comment and list
values are comma separated.  Recognised keys are the field names of
:class:`ExperimentConfig` (``n`` is accepted as an alias of ``sizes``).
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .core import Dataset
from .errors import ConfigError, OPEError
from .estimators import (
    dm_estimate,
    dr_estimate,
    drunknown_estimate,
    fit_value_least_squares,
    ipw_estimate,
    mlipw_estimate,
    mrdr_estimate,
)
from .envs import (
    SyntheticCB,
    SyntheticCBConfig,
    classification_to_bandit,
    classification_true_value,
    constant_logistic_policy,
    default_logging_policy,
    load_labeled_table,
    modelfail,
    modelwin,
    random_target_policy,
    rollout,
    synthetic_classification_table,
    train_base_policy,
    true_value_dp,
)
from .policies import MixturePolicy, Policy, SoftmaxLinearPolicy, fit_mle
from .value_models import ConstantFeatures, LinearFeatures, TimeAugmentedFeatures

ESTIMATORS = ("ipw", "mlipw", "dm", "dr", "mrdr", "drunknown")
ENVIRONMENTS = ("synthetic-cb", "classification", "modelwin", "modelfail")
_NEEDS_FIT = {"mlipw", "dr", "mrdr", "drunknown"}


@dataclass(frozen=True)
class ExperimentConfig:
    """Description of a replicated experiment.

    Parameters
    ----------
    environment : str
        One of ``synthetic-cb``, ``classification``, ``modelwin``, ``modelfail``.
    estimators : tuple of str
        Estimators reported (subset of ``ipw, mlipw, dm, dr, mrdr, drunknown``).
    replicates : int
        Number of datasets ``N`` per sample size.
    sizes : tuple of int
        Sample sizes ``n`` (trajectories per dataset).
    alpha : float, optional
        Mixing rate of the logging policy for ``classification`` (default 0.5)
        and the tabular domains (default 0.5, i.e. 0.75 / 0.25).
    gamma : float, optional
        Discount for the tabular domains (default 1).
    seed : int
        Base seed; replicate ``j`` uses ``seed + j``.
    ci_level : float
        Confidence level of the reported intervals.
    workers : int
        Worker processes (1 runs in-process).  Results do not depend on it.
    """

    environment: str = "synthetic-cb"
    estimators: tuple = ("ipw", "mlipw", "mrdr", "drunknown")
    replicates: int = 100
    sizes: tuple = (1000,)
    alpha: Optional[float] = None
    gamma: Optional[float] = None
    seed: int = 0
    out: Optional[str] = None
    ci_level: float = 0.95
    workers: int = 1
    # synthetic bandit
    n_actions: int = 10
    dim: int = 5
    coef_seed: int = 0
    reward_link: str = "exp"
    logging_link: str = "linear"
    oracle_samples: int = 1_000_000
    # classification
    data_path: Optional[str] = None
    train_fraction: float = 0.5
    # tabular
    horizon: int = 20
    target_prob: float = 0.7
    policy_scope: str = "first"

    def __post_init__(self):
        est = tuple(str(e).strip().lower() for e in _as_tuple(self.estimators))
        sizes = tuple(int(s) for s in _as_tuple(self.sizes))
        object.__setattr__(self, "estimators", est)
        object.__setattr__(self, "sizes", sizes)
        if self.environment not in ENVIRONMENTS:
            raise ConfigError(f"unknown environment {self.environment!r}; expected one of {', '.join(ENVIRONMENTS)}")
        bad = [e for e in est if e not in ESTIMATORS]
        if bad:
            raise ConfigError(f"unknown estimator(s) {', '.join(bad)}; expected names from {', '.join(ESTIMATORS)}")
        if len(set(est)) != len(est):
            raise ConfigError("duplicate estimator names")
        if self.replicates < 1:
            raise ConfigError("replicates must be at least 1")
        if not sizes or any(s < 1 for s in sizes):
            raise ConfigError("sizes must be a non-empty list of positive integers")
        if not 0.0 < self.ci_level < 1.0:
            raise ConfigError("ci_level must lie in (0, 1)")
        if self.alpha is not None and not 0.0 <= self.alpha < 1.0:
            raise ConfigError("alpha must lie in [0, 1)")
        if self.gamma is not None and not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.environment in ("modelwin", "modelfail") and "dm" in est:
            raise ConfigError("the direct method is only provided for one-step environments")
        if self.policy_scope not in ("first", "every"):
            raise ConfigError("policy_scope must be 'first' or 'every'")
        if not 0.0 < self.target_prob < 1.0:
            raise ConfigError("target_prob must lie in (0, 1)")
        if self.horizon < 1:
            raise ConfigError("horizon must be positive")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **{k: v for k, v in changes.items() if v is not None})

    def as_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["estimators"] = list(self.estimators)
        out["sizes"] = list(self.sizes)
        return out


def _as_tuple(value):
    if isinstance(value, str):
        return tuple(v for v in (p.strip() for p in value.split(",")) if v)
    if isinstance(value, (int, np.integer)):
        return (value,)
    return tuple(value)


_FIELDS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
_ALIASES = {"n": "sizes", "env": "environment", "estimator": "estimators", "base_seed": "seed"}


def _coerce(key: str, raw: str):
    name = _ALIASES.get(key, key)
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    raw = raw.strip()
    if name in ("estimators", "sizes"):
        return name, raw
    if raw.lower() in ("", "none", "null"):
        return name, None
    default = _FIELDS[name].default
    kind = type(default) if default is not None else float
    if name in ("out", "data_path"):
        kind = str
    try:
        if kind is int:
            return name, int(raw)
        if kind is float:
            return name, float(raw)
        return name, raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc


def config_from_mapping(mapping: dict, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Build a config from string-valued ``key -> value`` pairs on top of ``base``."""
    values = {}
    for key, raw in mapping.items():
        name, value = _coerce(key.strip().lower().replace("-", "_"), str(raw))
        values[name] = value
    try:
        return dataclasses.replace(base or ExperimentConfig(), **values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Parse a flat ``key = value`` file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    mapping = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        mapping[key.strip()] = value.strip()
    return config_from_mapping(mapping, base)


# --------------------------------------------------------------------------
# scenarios


@dataclass
class Scenario:
    """Everything a replicate needs: a sampler, the policies and the value features."""

    name: str
    target: Policy
    logging_family: Policy
    features: object
    true_value: float
    horizon: int
    gamma: float
    sampler: object = field(repr=False)

    def sample(self, n: int, seed: int) -> Dataset:
        return self.sampler(n, seed)


class _CBSampler:
    def __init__(self, env: SyntheticCB):
        self.env = env

    def __call__(self, n, seed):
        return self.env.sample(n, seed)


class _ClassificationSampler:
    def __init__(self, table, base, alpha, target):
        self.table, self.base, self.alpha, self.target = table, base, alpha, target

    def __call__(self, n, seed):
        return classification_to_bandit(self.table, self.base, self.alpha, self.target, n, seed)


class _RolloutSampler:
    def __init__(self, mdp, logging):
        self.mdp, self.logging = mdp, logging

    def __call__(self, n, seed):
        return rollout(self.mdp, self.logging, n, seed)


def build_scenario(cfg: ExperimentConfig) -> Scenario:
    """Instantiate the environment, policies and true value for ``cfg``."""
    if cfg.environment == "synthetic-cb":
        env = SyntheticCB(SyntheticCBConfig(n=1, n_actions=cfg.n_actions, dim=cfg.dim, coef_seed=cfg.coef_seed,
                                            reward_link=cfg.reward_link, logging_link=cfg.logging_link,
                                            oracle_samples=cfg.oracle_samples))
        family = SoftmaxLinearPolicy(np.zeros(cfg.dim))
        return Scenario(cfg.environment, env.target, family, LinearFeatures(), env.true_value(), 1, 1.0,
                        _CBSampler(env))
    if cfg.environment == "classification":
        alpha = 0.5 if cfg.alpha is None else cfg.alpha
        if alpha <= 0.0:
            raise ConfigError("classification needs alpha in (0, 1)")
        if cfg.data_path:
            table = load_labeled_table(cfg.data_path)
        else:
            table = synthetic_classification_table(seed=cfg.coef_seed).standardized()
        train, test = table.split(cfg.train_fraction, cfg.coef_seed)
        if len(train) == 0 or len(test) == 0:
            raise ConfigError("train_fraction leaves an empty split")
        base = train_base_policy(train)
        target = random_target_policy(table.features.shape[1], table.n_classes, cfg.coef_seed)
        family = MixturePolicy(alpha, base)
        return Scenario(cfg.environment, target, family, ConstantFeatures(), classification_true_value(test, target),
                        1, 1.0, _ClassificationSampler(test, base, alpha, target))
    mdp = modelwin(cfg.horizon) if cfg.environment == "modelwin" else modelfail(cfg.policy_scope)
    if cfg.gamma is not None:
        mdp = dataclasses.replace(mdp, discount=float(cfg.gamma))
    alpha = 0.5 if cfg.alpha is None else cfg.alpha
    logging = default_logging_policy(mdp, alpha)
    target = constant_logistic_policy(mdp, cfg.target_prob)
    return Scenario(cfg.environment, target, logging, TimeAugmentedFeatures(mdp.horizon), true_value_dp(mdp, target),
                    mdp.horizon, mdp.discount, _RolloutSampler(mdp, logging))


def conditioning_warning(gamma: float, horizon: int) -> Optional[str]:
    """Heads-up for heavily discounted long horizons, where ``γ^{2t}`` weights span many decades."""
    if gamma < 0.2 and horizon > 10:
        return (f"gamma={gamma:g} with horizon {horizon}: late steps carry weights down to "
                f"{gamma ** (2 * (horizon - 1)):.1e}; the estimating equation may be ill-conditioned")
    return None


# --------------------------------------------------------------------------
# replicates


@dataclass(frozen=True)
class ReplicateOutcome:
    """One estimator on one dataset: either an estimate with its interval or an error message."""

    estimator: str
    n: int
    replicate: int
    value: float = math.nan
    ci_low: float = math.nan
    ci_high: float = math.nan
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def run_replicate(scenario: Scenario, estimators, n: int, replicate: int, seed: int,
                  ci_level: float = 0.95) -> list:
    """Run ``estimators`` (plus IPW) on the dataset drawn with ``seed``."""
    alpha = 1.0 - ci_level
    data = scenario.sample(n, seed)
    names = ["ipw"] + [e for e in estimators if e != "ipw"]
    fit, fit_error = None, None
    if _NEEDS_FIT.intersection(names):
        try:
            fit = fit_mle(scenario.logging_family, data)
        except OPEError as exc:
            fit_error = f"{type(exc).__name__}: {exc}"
    value_model = None
    out = []
    for name in names:
        try:
            if name in _NEEDS_FIT and fit is None:
                raise _Skipped(fit_error)
            if name in ("dm", "dr") and value_model is None:
                value_model = fit_value_least_squares(data, scenario.features)
            rep = _dispatch(name, data, scenario, fit, value_model, alpha)
            out.append(ReplicateOutcome(name, n, replicate, rep.value, rep.ci_low, rep.ci_high))
        except _Skipped as exc:
            out.append(ReplicateOutcome(name, n, replicate, error=str(exc)))
        except (OPEError, np.linalg.LinAlgError, FloatingPointError) as exc:
            out.append(ReplicateOutcome(name, n, replicate, error=f"{type(exc).__name__}: {exc}"))
    return out


class _Skipped(Exception):
    pass


def _dispatch(name, data, scenario, fit, value_model, alpha):
    target = scenario.target
    if name == "ipw":
        return ipw_estimate(data, target, alpha)
    if name == "mlipw":
        return mlipw_estimate(data, target, scenario.logging_family, alpha, fit=fit)
    if name == "dm":
        return dm_estimate(data, target, value_model, alpha)
    if name == "dr":
        return dr_estimate(data, target, fit.policy, value_model, alpha)
    if name == "mrdr":
        return mrdr_estimate(data, target, scenario.logging_family, scenario.features, alpha, fit=fit)
    return drunknown_estimate(data, target, scenario.logging_family, scenario.features, alpha, fit=fit)


def _replicate_task(args):
    scenario, estimators, n, j, seed, level = args
    return run_replicate(scenario, estimators, n, j, seed, level)


# --------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class SummaryRow:
    estimator: str
    n: int
    mse: float
    rel_mse: float
    coverage: float
    mean_estimate: float
    true_value: float
    excluded: int


@dataclass
class ExperimentReport:
    """Aggregated results; ``squared_errors[(estimator, n)]`` is sorted ascending."""

    config: ExperimentConfig
    true_value: float
    rows: list
    squared_errors: dict
    failures: list
    metadata: dict

    def row(self, estimator: str, n: int) -> SummaryRow:
        for r in self.rows:
            if r.estimator == estimator and r.n == n:
                return r
        raise KeyError((estimator, n))

    def rel_mse(self, estimator: str, n: int) -> float:
        return self.row(estimator, n).rel_mse

    def cdf(self, estimator: str, n: int):
        """``(sorted squared errors, empirical CDF)``."""
        sq = self.squared_errors[(estimator, n)]
        return sq, np.arange(1, sq.size + 1) / max(sq.size, 1)


def _aggregate(cfg, truth, outcomes):
    by_key = {}
    for o in outcomes:
        by_key.setdefault((o.estimator, o.n), []).append(o)
    rows, sq_errors, failures = [], {}, []
    ipw_mse = {}
    for n in cfg.sizes:
        vals = np.array([o.value for o in by_key.get(("ipw", n), []) if o.ok])
        ipw_mse[n] = float(np.mean((vals - truth) ** 2)) if vals.size else math.nan
    for name in cfg.estimators:
        for n in cfg.sizes:
            items = by_key.get((name, n), [])
            good = [o for o in items if o.ok]
            failures.extend((o.estimator, o.n, o.replicate, o.error) for o in items if not o.ok)
            v = np.array([o.value for o in good])
            sq = np.sort((v - truth) ** 2)
            sq_errors[(name, n)] = sq
            if v.size:
                mse = float(np.mean((v - truth) ** 2))
                cover = float(np.mean([o.ci_low <= truth <= o.ci_high for o in good]))
                mean = float(np.mean(v))
            else:
                mse = cover = mean = math.nan
            denom = ipw_mse[n]
            if name == "ipw":
                rel = 1.0 if v.size else math.nan
            else:
                rel = mse / denom if denom > 0 else math.nan
            rows.append(SummaryRow(name, n, mse, rel, cover, mean, truth, len(items) - len(good)))
    return rows, sq_errors, failures


def run_experiment(cfg: ExperimentConfig, scenario: Optional[Scenario] = None) -> ExperimentReport:
    """Run every replicate, recording estimator failures instead of aborting.

    The relative MSE denominator is the IPW MSE over all replicates of the
    same size; estimators with failed replicates are averaged over the rest
    and report the count in ``excluded``.
    """
    scenario = build_scenario(cfg) if scenario is None else scenario
    warning = conditioning_warning(scenario.gamma, scenario.horizon)
    if warning:
        warnings.warn(warning, RuntimeWarning, stacklevel=2)
    tasks = [(scenario, cfg.estimators, n, j, cfg.seed + j, cfg.ci_level)
             for n in cfg.sizes for j in range(cfg.replicates)]
    if cfg.workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            chunk = max(1, len(tasks) // (4 * cfg.workers))
            results = list(pool.map(_replicate_task, tasks, chunksize=chunk))
    else:
        results = [_replicate_task(t) for t in tasks]
    outcomes = [o for res in results for o in res]
    rows, sq, failures = _aggregate(cfg, scenario.true_value, outcomes)
    metadata = {
        "config": cfg.as_dict(),
        "environment": scenario.name,
        "true_value": scenario.true_value,
        "gamma": scenario.gamma,
        "horizon": scenario.horizon,
        "seeds": [cfg.seed, cfg.seed + cfg.replicates - 1],
        "relative_mse_baseline": "ipw with logged propensities, all replicates of the same n",
        "failures": len(failures),
        "warnings": [warning] if warning else [],
    }
    return ExperimentReport(cfg, scenario.true_value, rows, sq, failures, metadata)


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


SUMMARY_COLUMNS = ("estimator", "n", "mse", "rel_mse", "coverage", "mean_estimate", "true_value", "excluded")
CDF_COLUMNS = ("estimator", "n", "squared_error", "empirical_cdf")


def emit_report(report: ExperimentReport, out_dir, formats=("csv", "plot-data")) -> list:
    """Write the report files into ``out_dir`` and return their paths.

    ``csv`` writes ``summary.csv`` and ``cdf.csv``; ``plot-data`` writes
    whitespace-separated ``relmse_<estimator>.dat`` (n, rel_mse) and
    ``cdf_<estimator>_n<n>.dat`` (squared error, CDF).  ``metadata.json`` is
    always written.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for fmt in formats:
        if fmt not in ("csv", "plot-data"):
            raise ValueError(f"unknown report format {fmt!r}")
    if "csv" in formats:
        path = out / "summary.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SUMMARY_COLUMNS)
            for r in report.rows:
                w.writerow([_fmt(getattr(r, c)) for c in SUMMARY_COLUMNS])
        written.append(path)
        path = out / "cdf.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CDF_COLUMNS)
            for (name, n), _ in report.squared_errors.items():
                sq, cdf = report.cdf(name, n)
                for s, c in zip(sq, cdf):
                    w.writerow([name, n, repr(float(s)), repr(float(c))])
        written.append(path)
    if "plot-data" in formats:
        for name in report.config.estimators:
            path = out / f"relmse_{name}.dat"
            lines = [f"{r.n} {r.rel_mse!r}" for r in report.rows if r.estimator == name]
            path.write_text("".join(line + "\n" for line in lines))
            written.append(path)
            for n in report.config.sizes:
                sq, cdf = report.cdf(name, n)
                path = out / f"cdf_{name}_n{n}.dat"
                path.write_text("".join(f"{float(s)!r} {float(c)!r}\n" for s, c in zip(sq, cdf)))
                written.append(path)
    path = out / "metadata.json"
    meta = dict(report.metadata, failure_log=[list(f) for f in report.failures])
    path.write_text(json.dumps(meta, indent=2, sort_keys=True, default=_json_default) + "\n")
    written.append(path)
    return written


def _json_default(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, tuple):
        return list(x)
    raise TypeError(f"not JSON serializable: {type(x).__name__}")


def read_summary(path) -> list:
    """Parse ``summary.csv`` back into :class:`SummaryRow` objects."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [SummaryRow(r["estimator"], int(r["n"]), float(r["mse"]), float(r["rel_mse"]), float(r["coverage"]),
                           float(r["mean_estimate"]), float(r["true_value"]), int(r["excluded"])) for r in reader]
