"""End-to-end trial simulation and Monte Carlo replication.

A replicate owns a counter-based generator keyed by seed XOR replicate index,
realizes the scenario's truth matrix, and runs the compiled per-patient loop;
snapshots of counts and urn proportions are taken at the configured
checkpoints.  Replicates are embarrassingly parallel and results are written
into index-addressed slots, so summaries are byte-identical for any worker
count.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from iud._engine import trial_loop
from iud.config import TrialConfig
from iud.errors import UndefinedMetricError, UnsupportedMetricError
from iud.trial import CountsTensor, theta_hat_matrix


@dataclass(frozen=True)
class Scenario:
    """Truth model: a fixed rate matrix, or per-treatment Beta generators."""

    name: str
    theta: np.ndarray | None = None
    beta_params: tuple[tuple[float, float], ...] | None = None
    covariate_probs: np.ndarray | None = None

    def __post_init__(self) -> None:
        if (self.theta is None) == (self.beta_params is None):
            raise ValueError("specify exactly one of theta / beta_params")
        if self.theta is not None:
            theta = np.asarray(self.theta, dtype=np.float64)
            if theta.ndim != 2:
                raise ValueError("theta must be a (J, H) matrix")
            if (theta < 0.0).any() or (theta > 1.0).any():
                raise ValueError("theta entries must lie in [0, 1]")
            object.__setattr__(self, "theta", theta)
        else:
            params = tuple((float(a), float(b)) for a, b in self.beta_params)
            if any(a <= 0.0 or b <= 0.0 for a, b in params):
                raise ValueError("Beta parameters must be positive")
            object.__setattr__(self, "beta_params", params)
        if self.covariate_probs is not None:
            object.__setattr__(
                self, "covariate_probs", np.asarray(self.covariate_probs, dtype=np.float64)
            )

    @property
    def kind(self) -> str:
        return "deterministic" if self.theta is not None else "random_beta"

    @property
    def num_treatments(self) -> int:
        return self.theta.shape[0] if self.theta is not None else len(self.beta_params)

    def realize(self, rng: np.random.Generator, num_strata: int) -> np.ndarray:
        """Truth matrix for one replicate; Beta scenarios draw a fresh row per treatment."""
        if self.theta is not None:
            if self.theta.shape[1] != num_strata:
                raise ValueError("scenario theta does not match num_strata")
            return self.theta.copy()
        rows = [rng.beta(a, b, size=num_strata) for a, b in self.beta_params]
        return np.asarray(rows, dtype=np.float64)


def builtin_scenarios() -> dict[str, Scenario]:
    """The catalog of two-treatment, five-stratum benchmark scenarios."""
    const = lambda v: (v,) * 5
    det = {
        "S_Bbar": ((0.9, 0.4, 0.6, 0.8, 0.2), (0.45, 0.85, 0.75, 0.6, 0.95)),
        "S_B": (const(0.5), const(0.1)),
        "S_1": ((0.5, 0.5, 0.5, 0.3, 0.3), (0.3, 0.3, 0.3, 0.1, 0.1)),
        "S_2": (const(0.3), (0.1, 0.1, 0.1, 0.5, 0.5)),
        "S_3": ((0.56, 0.5, 0.55, 0.44, 0.45), (0.45, 0.55, 0.50, 0.42, 0.58)),
    }
    catalog = {name: Scenario(name, theta=np.array(rows)) for name, rows in det.items()}
    catalog["S_4"] = Scenario("S_4", beta_params=((49.5, 49.5), (3.5, 31.5)))
    catalog["S_5"] = Scenario("S_5", beta_params=((49.5, 49.5), (49.5, 49.5)))
    return catalog


def lookup_scenario(name: str) -> Scenario:
    catalog = builtin_scenarios()
    key = name.strip()
    if key in catalog:
        return catalog[key]
    # tolerate case differences ("s_b", "S_b")
    for cname, scenario in catalog.items():
        if cname.lower() == key.lower():
            return scenario
    raise KeyError(f"unknown scenario {name!r}; catalog: {sorted(catalog)}")


@dataclass
class TrialTrace:
    """Checkpoint snapshots of one replicate plus the realized truth."""

    scenario_name: str
    mechanism: str
    horizon: int
    checkpoints: tuple[int, ...]
    s_snapshots: np.ndarray  # (K, J, H)
    f_snapshots: np.ndarray
    p_snapshots: np.ndarray
    realized_theta: np.ndarray  # (J, H)
    config: TrialConfig | None = field(default=None, repr=False)

    def checkpoint_index(self, step: int) -> int:
        try:
            return self.checkpoints.index(step)
        except ValueError:
            raise KeyError(f"no snapshot at step {step}; checkpoints: {self.checkpoints}") from None

    def counts_at(self, index: int) -> CountsTensor:
        return CountsTensor(self.s_snapshots[index], self.f_snapshots[index])


def replicate_rng(seed: int, replicate: int) -> np.random.Generator:
    """Independent counter-based substream for one replicate."""
    return np.random.Generator(np.random.Philox(key=seed ^ replicate))


def run_trial(
    config: TrialConfig, scenario: Scenario, rng: np.random.Generator | None = None
) -> TrialTrace:
    """Simulate one replicate; the generator defaults to the config seed's stream."""
    if rng is None:
        rng = replicate_rng(config.seed, 0)
    if scenario.num_treatments != config.num_treatments:
        raise ValueError("scenario treatment count does not match the config")
    p = scenario.covariate_probs if scenario.covariate_probs is not None else config.covariate_probs
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (config.num_strata,):
        raise ValueError("covariate probabilities do not match num_strata")

    theta = scenario.realize(rng, config.num_strata)
    uniforms = rng.random((config.horizon, 3))
    mech = config.mechanism
    c_vals = np.array(
        [mech.c_value(m) for m in range(config.horizon + 1)], dtype=np.float64
    )
    checkpoints = np.asarray(config.checkpoints, dtype=np.int64)
    rule = config.allocation

    s_snap, f_snap, p_snap = trial_loop(
        uniforms, theta, np.cumsum(p),
        mech.variant.code, mech.psi_kind.code, float(mech.psi_max), c_vals,
        float(config.varsigma),
        float(mech.mle.m_max), float(mech.mle.tol), int(mech.mle.max_iters),
        rule.kind.code, float(rule.gamma), float(rule.epsilon), float(rule.cap),
        checkpoints,
    )
    return TrialTrace(
        scenario_name=scenario.name,
        mechanism=mech.variant.value,
        horizon=config.horizon,
        checkpoints=tuple(int(c) for c in config.checkpoints),
        s_snapshots=s_snap,
        f_snapshots=f_snap,
        p_snapshots=p_snap,
        realized_theta=theta,
        config=config,
    )


# --- metrics ----------------------------------------------------------------


def _require_two_arms(trace: TrialTrace) -> None:
    if trace.realized_theta.shape[0] != 2:
        raise UnsupportedMetricError("metric is defined for two-treatment trials only")


def inf_metric_by_stratum(trace: TrialTrace, step: int, estimator: str = "P") -> np.ndarray:
    """Per-stratum |estimated difference - true difference| at one checkpoint."""
    _require_two_arms(trace)
    idx = trace.checkpoint_index(step)
    if estimator == "P":
        est = trace.p_snapshots[idx]
    elif estimator == "theta_hat":
        est = theta_hat_matrix(trace.counts_at(idx))
    else:
        raise ValueError("estimator must be 'P' or 'theta_hat'")
    truth = trace.realized_theta
    return np.abs((est[0] - est[1]) - (truth[0] - truth[1]))


def inf_metric(trace: TrialTrace, step: int, estimator: str = "P") -> float:
    """Euclidean norm across strata of the treatment-difference errors."""
    return float(np.sqrt((inf_metric_by_stratum(trace, step, estimator) ** 2).sum()))


def pw_metric(trace: TrialTrace, step: int) -> tuple[np.ndarray, float]:
    """Share of patients on the inferior arm, per stratum and overall.

    Per-stratum values are nan where the true rates are tied (no inferior arm)
    or the stratum is empty; the overall value is the assignment-weighted
    average over the remaining strata.
    """
    _require_two_arms(trace)
    idx = trace.checkpoint_index(step)
    counts_n = trace.counts_at(idx).n
    truth = trace.realized_theta
    num_s = truth.shape[1]
    per_stratum = np.full(num_s, np.nan)
    weight_sum = 0.0
    weighted = 0.0
    any_untied = False
    for h in range(num_s):
        if truth[0, h] == truth[1, h]:
            continue
        any_untied = True
        worst = 1 if truth[0, h] > truth[1, h] else 0
        n_h = int(counts_n[0, h] + counts_n[1, h])
        if n_h == 0:
            continue
        per_stratum[h] = counts_n[worst, h] / n_h
        weighted += n_h * per_stratum[h]
        weight_sum += n_h
    if not any_untied:
        raise UndefinedMetricError("every stratum has tied true rates")
    overall = weighted / weight_sum if weight_sum > 0 else math.nan
    return per_stratum, float(overall)


# --- Monte Carlo ------------------------------------------------------------


@dataclass(frozen=True)
class MetricRow:
    scenario: str
    mechanism: str
    estimator: str
    n: int
    metric: str
    stratum: int | None  # 0-based; None marks the across-strata summary
    mean: float
    se: float
    replicates: int


@dataclass
class MetricsSummary:
    rows: list[MetricRow]
    replicates: int
    failures: int = 0

    def value(self, metric: str, n: int, estimator: str = "", stratum: int | None = None) -> MetricRow:
        hits = [
            r
            for r in self.rows
            if r.metric == metric and r.n == n and r.estimator == estimator and r.stratum == stratum
        ]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {metric}/{n}/{estimator!r}/{stratum}")
        return hits[0]


def _run_replicate_block(args: tuple) -> list[TrialTrace]:
    config, scenario, start, stop = args
    return [run_trial(config, scenario, replicate_rng(config.seed, rep)) for rep in range(start, stop)]


def collect_traces(
    config: TrialConfig, scenario: Scenario, replicates: int, workers: int = 1
) -> list[TrialTrace]:
    """Replicate traces in slot order, independent of the worker count."""
    if replicates < 1:
        raise ValueError("replicates must be positive")
    if workers <= 1 or replicates == 1:
        return _run_replicate_block((config, scenario, 0, replicates))
    bounds = np.linspace(0, replicates, min(workers, replicates) + 1).astype(int)
    blocks = [
        (config, scenario, int(lo), int(hi))
        for lo, hi in zip(bounds[:-1], bounds[1:])
        if hi > lo
    ]
    traces: list[TrialTrace] = []
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for block in pool.map(_run_replicate_block, blocks):
            traces.extend(block)
    return traces


def _aggregate(values: np.ndarray) -> tuple[float, float, int]:
    """Mean, Monte Carlo standard error and count over the non-nan entries."""
    vals = values[~np.isnan(values)]
    m = vals.size
    if m == 0:
        return math.nan, math.nan, 0
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(m)) if m > 1 else 0.0
    return mean, se, m


def summarize_traces(traces: Sequence[TrialTrace], failures: int = 0) -> MetricsSummary:
    """Long-format metric summary over replicates (two-treatment trials)."""
    if not traces:
        raise ValueError("no traces to summarize")
    first = traces[0]
    reps = len(traces)
    num_s = first.realized_theta.shape[1]
    rows: list[MetricRow] = []
    base = dict(scenario=first.scenario_name, mechanism=first.mechanism)
    for step in first.checkpoints:
        for estimator in ("P", "theta_hat"):
            per = np.array([inf_metric(tr, step, estimator) for tr in traces])
            mean, se, m = _aggregate(per)
            rows.append(MetricRow(**base, estimator=estimator, n=step, metric="INF",
                                  stratum=None, mean=mean, se=se, replicates=m))
            by_h = np.array([inf_metric_by_stratum(tr, step, estimator) for tr in traces])
            for h in range(num_s):
                mean, se, m = _aggregate(by_h[:, h])
                rows.append(MetricRow(**base, estimator=estimator, n=step, metric="INF",
                                      stratum=h, mean=mean, se=se, replicates=m))
        try:
            pw_pairs = [pw_metric(tr, step) for tr in traces]
        except UndefinedMetricError:
            continue
        overall = np.array([pair[1] for pair in pw_pairs])
        mean, se, m = _aggregate(overall)
        rows.append(MetricRow(**base, estimator="", n=step, metric="PW",
                              stratum=None, mean=mean, se=se, replicates=m))
        by_h = np.array([pair[0] for pair in pw_pairs])
        for h in range(num_s):
            mean, se, m = _aggregate(by_h[:, h])
            rows.append(MetricRow(**base, estimator="", n=step, metric="PW",
                                  stratum=h, mean=mean, se=se, replicates=m))
    return MetricsSummary(rows=rows, replicates=reps, failures=failures)


def run_monte_carlo(
    config: TrialConfig, scenario: Scenario, replicates: int, workers: int = 1
) -> MetricsSummary:
    """Replicate the trial and aggregate the performance metrics.

    Fully determined by (config, scenario, replicates); failed replicates are
    counted and excluded rather than aborting the study.
    """
    failures = 0
    try:
        traces = collect_traces(config, scenario, replicates, workers)
    except Exception:
        # fall back to one-at-a-time so a single bad replicate cannot sink the run
        traces = []
        for rep in range(replicates):
            try:
                traces.append(run_trial(config, scenario, replicate_rng(config.seed, rep)))
            except Exception:
                failures += 1
        if not traces:
            raise
    return summarize_traces(traces, failures)
