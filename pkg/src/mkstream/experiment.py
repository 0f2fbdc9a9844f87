"""Replicate averaging, λ/strategy sweeps and CSV output."""
from __future__ import annotations

import csv
import io
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentPlan, SimConfig, Strategy
from .sim_engine import METRICS, simulate

CSV_HEADER = ("lambda", "strategy", "bucket_index", "mean_rate", "stddev")
SUMMARY_HEADER = ("lambda", "strategy", "n_reps") + METRICS


@dataclass
class RunDigest:
    """What a worker sends back for one replicate.

    ``run_rates`` is the time average of the per-bucket rate curve, so it
    matches the per-bucket CSVs; ``pooled_rates`` divides run totals instead.
    """

    seed: int
    bucket_rates: dict[str, np.ndarray]
    run_rates: dict[str, float]
    pooled_rates: dict[str, float]
    totals: dict


@dataclass
class ReplicateStats:
    config: SimConfig
    n_reps: int
    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]
    run_means: dict[str, float]
    pooled_means: dict[str, float]
    runs: list[RunDigest] = field(default_factory=list, repr=False)


def run_one(config: SimConfig) -> RunDigest:
    res = simulate(config)
    sent = np.array([s.sent for s in res.samples], dtype=float)
    bucket_rates = {m: res.rates(m) for m in METRICS}
    run_rates = {m: float(bucket_rates[m].mean()) for m in METRICS}
    total_sent = sent.sum()
    pooled = {
        m: float(sum(getattr(s, m) for s in res.samples) / total_sent) if total_sent else 0.0 for m in METRICS
    }
    return RunDigest(config.seed, bucket_rates, run_rates, pooled, res.totals)


def _map(configs: list[SimConfig], jobs: int) -> list[RunDigest]:
    if jobs <= 1 or len(configs) <= 1:
        return [run_one(c) for c in configs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        # map keeps input order, so output does not depend on scheduling
        return list(pool.map(run_one, configs, chunksize=max(1, len(configs) // (8 * jobs))))


def aggregate(config: SimConfig, runs: list[RunDigest]) -> ReplicateStats:
    """Per-bucket mean and sample standard deviation over replicates (0 for one run)."""
    runs = sorted(runs, key=lambda r: r.seed)
    n = len(runs)
    mean, std = {}, {}
    for m in METRICS:
        stack = np.vstack([r.bucket_rates[m] for r in runs])
        mean[m] = stack.mean(axis=0)
        std[m] = stack.std(axis=0, ddof=1) if n > 1 else np.zeros(stack.shape[1])
    run_means = {m: float(np.mean([r.run_rates[m] for r in runs])) for m in METRICS}
    pooled = {m: float(np.mean([r.pooled_rates[m] for r in runs])) for m in METRICS}
    return ReplicateStats(config, n, mean, std, run_means, pooled, runs)


def replicate_configs(config: SimConfig, n_reps: int) -> list[SimConfig]:
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    return [config.replace(seed=config.seed + i) for i in range(n_reps)]


def run_replicates(config: SimConfig, n_reps: int, jobs: int = 1) -> ReplicateStats:
    """Run seeds ``seed .. seed + n_reps - 1`` and average every rate per bucket."""
    return aggregate(config, _map(replicate_configs(config, n_reps), jobs))


@dataclass
class ExperimentResults:
    plan: ExperimentPlan
    cells: dict[tuple[float, Strategy], ReplicateStats]

    def strategies(self) -> list[Strategy]:
        seen = []
        for _, s in self.cells:
            if s not in seen:
                seen.append(s)
        return seen


def sweep(plan: ExperimentPlan, jobs: int = 1) -> ExperimentResults:
    keys, configs = [], []
    for lam in plan.lambda_grid:
        for strat in plan.strategies:
            cell = plan.base.replace(lam=lam, strategy=strat)
            keys.append((lam, strat))
            configs.extend(replicate_configs(cell, plan.n_reps))
    digests = _map(configs, jobs)
    cells = {}
    for i, key in enumerate(keys):
        chunk = digests[i * plan.n_reps:(i + 1) * plan.n_reps]
        cells[key] = aggregate(configs[i * plan.n_reps], chunk)
    return ExperimentResults(plan, cells)


def _num(x: float) -> str:
    return f"{x:.6f}"


def _lam(x: float) -> str:
    return f"{x:g}"


def render_csvs(results: ExperimentResults) -> dict[str, str]:
    """File name to CSV text, one file per metric plus ``summary.csv``."""
    out = {}
    for m in METRICS:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for (lam, strat), st in results.cells.items():
            for b, (mu, sd) in enumerate(zip(st.mean[m], st.std[m])):
                w.writerow((_lam(lam), strat.value, b, _num(mu), _num(sd)))
        out[f"{m}.csv"] = buf.getvalue()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    for (lam, strat), st in results.cells.items():
        w.writerow((_lam(lam), strat.value, st.n_reps, *(_num(st.run_means[m]) for m in METRICS)))
    out["summary.csv"] = buf.getvalue()
    return out


def prepare_output(path: str) -> None:
    """Create ``path`` and check it is writable, so bad paths fail before any run."""
    os.makedirs(path, exist_ok=True)
    probe = os.path.join(path, ".write-test")
    with open(probe, "w") as fh:
        fh.write("")
    os.remove(probe)


def write_csvs(results: ExperimentResults, path: str) -> list[str]:
    prepare_output(path)
    written = []
    for name, text in render_csvs(results).items():
        target = os.path.join(path, name)
        with open(target, "w", newline="") as fh:
            fh.write(text)
        written.append(target)
    return written


def run_experiment(plan: ExperimentPlan, jobs: int = 1) -> ExperimentResults:
    prepare_output(plan.output_path)
    results = sweep(plan, jobs)
    write_csvs(results, plan.output_path)
    return results


def summary_rows(results: ExperimentResults) -> list[tuple[Strategy, dict[str, float]]]:
    rows = []
    for strat in results.strategies():
        cells = [st for (_, s), st in results.cells.items() if s is strat]
        rows.append((strat, {m: float(np.mean([c.run_means[m] for c in cells])) for m in ("received", "useful", "lost")}))
    return rows


def dominance(results: ExperimentResults, metric: str = "received") -> list[Strategy]:
    """Strategies that beat every other one on ``metric`` at every λ (empty if none)."""
    strategies = results.strategies()
    if len(strategies) < 2:
        return []
    winners = []
    for cand in strategies:
        ok = True
        for lam in results.plan.lambda_grid:
            mine = results.cells[(lam, cand)].run_means[metric]
            others = [results.cells[(lam, s)].run_means[metric] for s in strategies if s is not cand]
            if any(mine <= o for o in others):
                ok = False
                break
        if ok:
            winners.append(cand)
    return winners


def emit_summary(results: ExperimentResults | None, out=None) -> str:
    """Print mean received/useful/lost per strategy over the λ grid."""
    if results is None or not results.cells:
        raise ValueError("no completed runs to summarize")
    out = sys.stdout if out is None else out
    rows = summary_rows(results)
    lines = [f"{'strategy':<15}{'received':>10}{'useful':>10}{'lost':>10}  flags"]
    ranking = sorted(rows, key=lambda r: -r[1]["received"]) if len(rows) > 1 else []
    dominant = set(dominance(results))
    for strat, v in rows:
        flags = []
        if ranking:
            flags.append(f"rank={1 + [s for s, _ in ranking].index(strat)}")
        if strat in dominant:
            flags.append("dominates-received")
        lines.append(f"{strat.value:<15}{v['received']:>10.4f}{v['useful']:>10.4f}{v['lost']:>10.4f}  {' '.join(flags)}".rstrip())
    if ranking:
        lines.append("received ordering: " + " > ".join(s.value for s, _ in ranking))
    text = "\n".join(lines) + "\n"
    out.write(text)
    return text
