"""Batch command-line interface: simulate, mle, analyze, scenarios.

Configuration documents are JSON with the layout

    {"trial": {"J", "H", "n", "p", "varsigma", "seed", "checkpoints"},
     "mechanism": {"variant", "psi_kind", "psi_max", "c_rule", "mle": {"m_max", "tol"}},
     "allocation": {"f", "gamma", "epsilon", "cap"},
     "scenarios": ["S_B", {"name": ..., "theta": [[...]]}, ...],
     "replicates": 10000}

Every section is optional except ``scenarios``; unknown keys are rejected with
the offending path.  Exit codes: 0 success, 1 runtime failure, 2 usage or
configuration error.  All emitted CSV uses 9 significant digits.  Strata and
treatments are 1-based on the CLI surface and in CSV output.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import os
import sys
import time
from typing import Any, Sequence

import numpy as np

import iud
from iud.allocation import AllocationKind, AllocationRule
from iud.betabinom import AggregatedSample, MleOptions, fit_mle
from iud.config import TrialConfig
from iud.errors import ConfigurationError
from iud.inference import confidence_interval, sequential_path, wald_from_rates, wald_statistic
from iud.mechanisms import Mechanism, MechanismParams, PsiKind
from iud.simulate import (
    MetricsSummary,
    Scenario,
    TrialTrace,
    builtin_scenarios,
    lookup_scenario,
    replicate_rng,
    run_monte_carlo,
    run_trial,
)
from iud.trial import theta_hat_matrix

TRACE_FORMAT = "iud-trace"
TRACE_VERSION = 1


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def _reject_unknown(section: dict, allowed: set[str], path: str) -> None:
    for key in section:
        if key not in allowed:
            raise ConfigurationError(f"unknown key {path}.{key}")


def _parse_scenario(entry: Any, index: int) -> Scenario:
    if isinstance(entry, str):
        try:
            return lookup_scenario(entry)
        except KeyError as exc:
            raise ConfigurationError(f"scenarios[{index}]: {exc}") from None
    if not isinstance(entry, dict):
        raise ConfigurationError(f"scenarios[{index}] must be a name or an object")
    _reject_unknown(entry, {"name", "theta", "beta", "p"}, f"scenarios[{index}]")
    name = entry.get("name", f"scenario_{index}")
    theta = entry.get("theta")
    beta = entry.get("beta")
    if (theta is None) == (beta is None):
        raise ConfigurationError(f"scenarios[{index}]: give exactly one of theta / beta")
    try:
        if theta is not None:
            return Scenario(name, theta=np.asarray(theta, dtype=float),
                            covariate_probs=entry.get("p"))
        return Scenario(name, beta_params=tuple((a, b) for a, b in beta),
                        covariate_probs=entry.get("p"))
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"scenarios[{index}]: {exc}") from None


def parse_config(doc: dict) -> tuple[TrialConfig, list[Scenario], int]:
    """Validate a configuration document, applying the standard defaults."""
    if not isinstance(doc, dict):
        raise ConfigurationError("configuration must be a JSON object")
    _reject_unknown(doc, {"trial", "mechanism", "allocation", "scenarios", "replicates"}, "$")

    trial = doc.get("trial", {})
    _reject_unknown(trial, {"J", "H", "n", "p", "varsigma", "seed", "checkpoints"}, "trial")
    mech_doc = doc.get("mechanism", {})
    _reject_unknown(
        mech_doc, {"variant", "psi_kind", "psi_max", "c_rule", "mle"}, "mechanism"
    )
    mle_doc = mech_doc.get("mle", {})
    _reject_unknown(mle_doc, {"m_max", "tol", "max_iters", "varsigma"}, "mechanism.mle")
    alloc_doc = doc.get("allocation", {})
    _reject_unknown(alloc_doc, {"f", "gamma", "epsilon", "cap"}, "allocation")

    try:
        mle = MleOptions(
            m_max=float(mle_doc.get("m_max", 1e6)),
            tol=float(mle_doc.get("tol", 1e-8)),
            max_iters=int(mle_doc.get("max_iters", 200)),
            varsigma=float(mle_doc.get("varsigma", trial.get("varsigma", 1.0))),
        )
        mechanism = MechanismParams(
            variant=Mechanism.parse(mech_doc.get("variant", "vanishing")),
            psi_kind=PsiKind.parse(mech_doc.get("psi_kind", "rational")),
            psi_max=float(mech_doc.get("psi_max", 10.0)),
            c_rule=mech_doc.get("c_rule", "inv_log"),
            mle=mle,
        )
        allocation = AllocationRule(
            kind=AllocationKind.parse(alloc_doc.get("f", "inverse_complement")),
            gamma=float(alloc_doc.get("gamma", 1.0)),
            epsilon=float(alloc_doc.get("epsilon", 1e-2)),
            cap=float(alloc_doc.get("cap", 1e6)),
        )
        config = TrialConfig(
            num_treatments=int(trial.get("J", 2)),
            num_strata=int(trial.get("H", 5)),
            horizon=int(trial.get("n", 200)),
            covariate_probs=trial.get("p"),
            varsigma=float(trial.get("varsigma", 1.0)),
            allocation=allocation,
            mechanism=mechanism,
            seed=int(trial.get("seed", 0)),
            checkpoints=trial.get("checkpoints"),
        )
    except ConfigurationError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from None

    if "scenarios" not in doc or not doc["scenarios"]:
        raise ConfigurationError("scenarios list is required")
    scenarios = [_parse_scenario(entry, i) for i, entry in enumerate(doc["scenarios"])]
    replicates = int(doc.get("replicates", 10_000))
    if replicates < 1:
        raise ConfigurationError("replicates must be positive")
    return config, scenarios, replicates


def config_to_doc(config: TrialConfig, scenarios: Sequence[Scenario], replicates: int) -> dict:
    """Resolved, JSON-ready echo of a run configuration."""
    mech = config.mechanism
    scen_list: list[Any] = []
    for sc in scenarios:
        if sc.name in builtin_scenarios() and sc.covariate_probs is None:
            scen_list.append(sc.name)
        elif sc.theta is not None:
            scen_list.append({"name": sc.name, "theta": sc.theta.tolist()})
        else:
            scen_list.append({"name": sc.name, "beta": [list(ab) for ab in sc.beta_params]})
    return {
        "trial": {
            "J": config.num_treatments,
            "H": config.num_strata,
            "n": config.horizon,
            "p": np.asarray(config.covariate_probs).tolist(),
            "varsigma": config.varsigma,
            "seed": config.seed,
            "checkpoints": list(config.checkpoints),
        },
        "mechanism": {
            "variant": mech.variant.value,
            "psi_kind": mech.psi_kind.value,
            "psi_max": mech.psi_max,
            "c_rule": mech.c_rule if isinstance(mech.c_rule, str) else "custom",
            "mle": {
                "m_max": mech.mle.m_max,
                "tol": mech.mle.tol,
                "max_iters": mech.mle.max_iters,
                "varsigma": mech.mle.varsigma,
            },
        },
        "allocation": {
            "f": config.allocation.kind.value,
            "gamma": config.allocation.gamma,
            "epsilon": config.allocation.epsilon,
            "cap": config.allocation.cap,
        },
        "scenarios": scen_list,
        "replicates": replicates,
    }


# --- trace files -------------------------------------------------------------


def save_trace(trace: TrialTrace, path: str) -> None:
    doc = {
        "format": TRACE_FORMAT,
        "version": TRACE_VERSION,
        "scenario": trace.scenario_name,
        "mechanism": trace.mechanism,
        "horizon": trace.horizon,
        "checkpoints": list(trace.checkpoints),
        "realized_theta": trace.realized_theta.tolist(),
        "s": trace.s_snapshots.tolist(),
        "f": trace.f_snapshots.tolist(),
        "p": trace.p_snapshots.tolist(),
    }
    if trace.config is not None:
        doc["config"] = config_to_doc(trace.config, [], 1) | {"scenarios": [trace.scenario_name]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_trace(path: str) -> TrialTrace:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != TRACE_FORMAT or doc.get("version") != TRACE_VERSION:
        raise ConfigurationError(f"{path}: not a version-{TRACE_VERSION} {TRACE_FORMAT} file")
    return TrialTrace(
        scenario_name=doc["scenario"],
        mechanism=doc["mechanism"],
        horizon=int(doc["horizon"]),
        checkpoints=tuple(int(c) for c in doc["checkpoints"]),
        s_snapshots=np.asarray(doc["s"], dtype=np.int64),
        f_snapshots=np.asarray(doc["f"], dtype=np.int64),
        p_snapshots=np.asarray(doc["p"], dtype=np.float64),
        realized_theta=np.asarray(doc["realized_theta"], dtype=np.float64),
    )


# --- subcommands --------------------------------------------------------------

METRICS_HEADER = [
    "scenario", "mechanism", "estimator", "n", "metric", "stratum", "mean", "se", "replicates",
]


def _write_metrics_csv(path: str, summaries: Sequence[MetricsSummary]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for summary in summaries:
            for row in summary.rows:
                writer.writerow([
                    row.scenario,
                    row.mechanism,
                    row.estimator,
                    row.n,
                    row.metric,
                    "" if row.stratum is None else row.stratum + 1,
                    _fmt(row.mean),
                    _fmt(row.se),
                    row.replicates,
                ])


def _cmd_simulate(args: argparse.Namespace) -> int:
    with open(args.config, encoding="utf-8") as fh:
        doc = json.load(fh)
    if isinstance(doc, dict) and doc.get("tool") == "iud" and "config" in doc:
        doc = doc["config"]  # a manifest re-runs its own configuration
    config, scenarios, replicates = parse_config(doc)
    if args.replicates is not None:
        replicates = args.replicates
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    threads = int(os.environ.get("IUD_THREADS", args.threads))

    started = time.time()
    os.makedirs(args.out, exist_ok=True)
    summaries = []
    for scenario in scenarios:
        summaries.append(run_monte_carlo(config, scenario, replicates, workers=threads))
        if args.emit_traces:
            trace_dir = os.path.join(args.out, "traces", scenario.name)
            os.makedirs(trace_dir, exist_ok=True)
            for rep in range(replicates):
                trace = run_trial(config, scenario, replicate_rng(config.seed, rep))
                save_trace(trace, os.path.join(trace_dir, f"rep_{rep:05d}.json"))
    metrics_path = os.path.join(args.out, "metrics.csv")
    _write_metrics_csv(metrics_path, summaries)

    manifest = {
        "tool": "iud",
        "tool_version": iud.__version__,
        "command": "simulate",
        "config": config_to_doc(config, scenarios, replicates),
        "threads": threads,
        "outputs": {"metrics": "metrics.csv"},
        "failures": sum(s.failures for s in summaries),
        "wall_clock_s": round(time.time() - started, 3),
    }
    with open(os.path.join(args.out, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")
    return 0


def _cmd_mle(args: argparse.Namespace) -> int:
    rows: list[tuple[int, int]] = []
    with open(args.counts, newline="", encoding="utf-8") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or not "".join(rec).strip():
                continue
            try:
                n_h, s_h = int(rec[0]), int(rec[1])
            except (ValueError, IndexError):
                if lineno == 1:
                    continue  # header line
                raise ConfigurationError(f"{args.counts}:{lineno}: expected two integers")
            rows.append((n_h, s_h))
    if not rows:
        raise ConfigurationError(f"{args.counts}: no count rows found")
    sample = AggregatedSample(
        np.array([r[0] for r in rows]), np.array([r[1] for r in rows])
    )
    result = fit_mle(sample, MleOptions(varsigma=args.varsigma))
    writer = csv.writer(sys.stdout)
    writer.writerow(["alpha", "beta", "status", "log_likelihood"])
    writer.writerow([_fmt(result.alpha), _fmt(result.beta), result.status.value,
                     _fmt(result.log_likelihood)])
    return 0


def _cmd_analyze(args: argparse.Namespace) -> int:
    trace = load_trace(args.trace)
    try:
        j_cli, l_cli = (int(v) for v in args.pair.split(","))
    except ValueError:
        raise ConfigurationError("--pair expects two comma-separated treatment numbers")
    j, l, h = j_cli - 1, l_cli - 1, args.stratum - 1
    num_t, num_s = trace.realized_theta.shape
    if not (0 <= j < num_t and 0 <= l < num_t and j != l):
        raise ConfigurationError(f"--pair must name two distinct treatments in 1..{num_t}")
    if not (0 <= h < num_s):
        raise ConfigurationError(f"--stratum must lie in 1..{num_s}")

    writer = csv.writer(sys.stdout)
    writer.writerow(["n", "N_j", "N_l", "est_j", "est_l", "diff", "U", "ci_lo", "ci_hi"])
    for idx, step in enumerate(trace.checkpoints):
        counts = trace.counts_at(idx)
        n_j, n_l = int(counts.n[j, h]), int(counts.n[l, h])
        if args.estimator == "P":
            est_j = float(trace.p_snapshots[idx][j, h])
            est_l = float(trace.p_snapshots[idx][l, h])
        else:
            rates = theta_hat_matrix(counts)
            est_j, est_l = float(rates[j, h]), float(rates[l, h])
        try:
            u = (wald_from_rates(est_j, n_j, est_l, n_l) if args.estimator == "P"
                 else wald_statistic(counts, j, l, h))
            lo, hi = confidence_interval(counts, j, l, h, args.level)
            u_s, lo_s, hi_s = _fmt(u), _fmt(lo), _fmt(hi)
        except Exception:
            u_s = lo_s = hi_s = ""
        writer.writerow([step, n_j, n_l, _fmt(est_j), _fmt(est_l),
                         _fmt(est_j - est_l), u_s, lo_s, hi_s])

    if args.times:
        times = [float(t) for t in args.times.split(",")]
        path = sequential_path(trace, j, l, h, times)
        print()
        writer.writerow(["t", "step", "U"])
        for t, u in zip(path.times, path.statistics):
            writer.writerow([_fmt(t), math.floor(trace.horizon * t), _fmt(u)])
    return 0


def _cmd_scenarios(_args: argparse.Namespace) -> int:
    writer = csv.writer(sys.stdout)
    writer.writerow(["name", "kind", "parameters"])
    for name, sc in builtin_scenarios().items():
        if sc.theta is not None:
            desc = "; ".join(
                "(" + ",".join(_fmt(v) for v in row) + ")" for row in sc.theta
            )
        else:
            desc = "; ".join(f"Beta({_fmt(a)},{_fmt(b)})" for a, b in sc.beta_params)
        writer.writerow([name, sc.kind, desc])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iud", description="Interacting urns design: batch simulation and analysis"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run Monte Carlo replications of a configured design")
    sim.add_argument("--config", required=True, help="JSON configuration document")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--replicates", type=int, default=None, help="override document replicates")
    sim.add_argument("--seed", type=int, default=None, help="override document seed")
    sim.add_argument("--threads", type=int, default=1,
                     help="worker processes (env IUD_THREADS overrides)")
    sim.add_argument("--emit-traces", action="store_true", help="also write per-replicate traces")
    sim.set_defaults(func=_cmd_simulate)

    mle = sub.add_parser("mle", help="fit the prior parameters to a counts table")
    mle.add_argument("--counts", required=True, help="CSV with one 'n,s' row per stratum")
    mle.add_argument("--varsigma", type=float, default=1.0,
                     help="smoothing constant for degenerate samples")
    mle.set_defaults(func=_cmd_mle)

    ana = sub.add_parser("analyze", help="statistics tables from a trace file")
    ana.add_argument("--trace", required=True)
    ana.add_argument("--pair", required=True, help="treatments 'j,l' (1-based)")
    ana.add_argument("--stratum", type=int, required=True, help="stratum (1-based)")
    ana.add_argument("--times", default=None, help="information times, e.g. '0.5,1.0'")
    ana.add_argument("--estimator", choices=("theta", "P"), default="theta")
    ana.add_argument("--level", type=float, default=0.95)
    ana.set_defaults(func=_cmd_analyze)

    lst = sub.add_parser("scenarios", help="list the built-in scenario catalog")
    lst.set_defaults(func=_cmd_scenarios)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except json.JSONDecodeError as exc:
        print(f"error: invalid JSON: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
