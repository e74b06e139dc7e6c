"""Batch drivers: experiment matrices, Pareto sweeps of the adaptive attacker,
ablations over one config axis."""

from __future__ import annotations

import csv
import json
import logging
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .attacks import AttackChoice, adaptive_pgd_attack, feature_weights, honest_statistics, standardized_mse
from .baselines import AggregatorChoice
from .config import ABLATION_AXES, RunManifest, serialize_config, with_value
from .errors import ConfigurationError
from .fingerprint import extract_fingerprint
from .simulator import ExperimentConfig, init_state, run_experiment, run_round, sub_seed, write_result

log = logging.getLogger(__name__)

SUMMARY_COLUMNS = ("entry", "attack", "defense", "seeds", "mean_accuracy", "mean_precision", "mean_runtime_s", "failed")


def seed_dir(out_dir, name: str, seed: int) -> Path:
    return Path(out_dir) / name / f"seed_{seed}"


def _run_job(name: str, config: ExperimentConfig, directory: str) -> tuple[str, int, str | None]:
    try:
        write_result(run_experiment(config), directory)
        return name, config.seed, None
    except Exception as exc:  # recorded per entry, the matrix keeps going
        log.debug("entry %s seed %d failed:\n%s", name, config.seed, traceback.format_exc())
        return name, config.seed, f"{type(exc).__name__}: {exc}"


@dataclass
class MatrixOutcome:
    summary: list[dict]
    executed: int
    failures: dict[tuple[str, int], str]

    @property
    def ok(self) -> bool:
        return not self.failures


def run_matrix(manifest: RunManifest, out_dir=None, seeds: int | None = None, parallel: int = 1) -> MatrixOutcome:
    """Run every entry for ``seeds`` consecutive seeds starting at the entry's own.

    Experiments whose result.json already exists are skipped. Writes one
    directory per entry plus ``summary.csv``.
    """
    out_dir = Path(out_dir or manifest.output_dir)
    seeds = manifest.repetitions if seeds is None else seeds
    if seeds < 1:
        raise ConfigurationError("need at least one seed")
    jobs = []
    for name, config in manifest.entries:
        entry_dir = out_dir / name
        entry_dir.mkdir(parents=True, exist_ok=True)
        (entry_dir / "config.cfg").write_text(serialize_config(config))
        for r in range(seeds):
            cfg = replace(config, seed=config.seed + r)
            directory = seed_dir(out_dir, name, cfg.seed)
            if (directory / "result.json").exists():
                continue
            jobs.append((name, cfg, str(directory)))

    if parallel > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(parallel) as pool:
            done = list(pool.map(_run_job, *zip(*jobs)))
    else:
        done = [_run_job(*job) for job in jobs]
    failures = {(name, seed): err for name, seed, err in done if err is not None}
    for (name, seed), err in sorted(failures.items()):
        log.error("entry %s seed %d failed: %s", name, seed, err)

    summary = []
    for name, config in manifest.entries:
        accs, precs, times, failed = [], [], [], 0
        for r in range(seeds):
            directory = seed_dir(out_dir, name, config.seed + r)
            if not (directory / "result.json").exists():
                failed += 1
                continue
            result = json.loads((directory / "result.json").read_text())
            accs.append(result["final_accuracy"])
            if result["mean_precision"] is not None:
                precs.append(result["mean_precision"])
            timing = directory / "timing.json"
            if timing.exists():
                times.append(json.loads(timing.read_text())["total_runtime_s"])
        summary.append({
            "entry": name,
            "attack": config.attack.kind,
            "defense": config.defense.kind,
            "seeds": len(accs),
            "mean_accuracy": float(np.mean(accs)) if accs else None,
            "mean_precision": float(np.mean(precs)) if precs else None,
            "mean_runtime_s": float(np.mean(times)) if times else None,
            "failed": failed,
        })
    write_csv(out_dir / "summary.csv", SUMMARY_COLUMNS, summary)
    return MatrixOutcome(summary, len(jobs), failures)


def write_csv(path, columns, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow(["NA" if row.get(c) is None else row[c] for c in columns])


def honest_round(config: ExperimentConfig, warmup_rounds: int):
    """Client updates of the round after ``warmup_rounds`` of clean FedAvg,
    with the run's Byzantine ids."""
    clean = replace(config, attack=AttackChoice("none"), defense=AggregatorChoice("fedavg"), rounds=warmup_rounds)
    state = init_state(clean)
    for _ in range(warmup_rounds):
        state, _ = run_round(state, clean)
    state, _ = run_round(state, clean)
    return state.last_updates, state.byzantine


@dataclass
class ParetoResult:
    runs: list[dict]
    frontier: list[dict]
    honest_median_mse: float


PARETO_COLUMNS = ("lambda_s", "fingerprint_mse", "attack_alignment", "seed")
FRONTIER_COLUMNS = ("lambda_s", "fingerprint_mse", "attack_alignment", "seeds", "honest_median_mse")


def run_pareto_sweep(
    config: ExperimentConfig, lambda_values, seeds: int = 5, out_dir=None, warmup_rounds: int = 5
) -> ParetoResult:
    """Adaptive-attack stealth/alignment trade-off over ``lambda_values``.

    Each seed trains its own honest population for ``warmup_rounds`` and
    attacks the next round's honest mean. Reference point for stealth: the
    median standardized MSE of honest clients against the same reference.
    """
    if config.attack.kind != "adaptive_pgd":
        raise ConfigurationError("pareto sweep needs attack.kind = adaptive_pgd")
    lambda_values = sorted(float(x) for x in lambda_values)
    if not lambda_values or seeds < 1:
        raise ConfigurationError("need at least one lambda_s value and one seed")
    a = config.attack
    eps, k = config.detector.epsilon, config.detector.k
    runs, medians = [], []
    for r in range(seeds):
        cfg = replace(config, seed=config.seed + r)
        updates, byz = honest_round(cfg, warmup_rounds)
        ref, scale, fps = honest_statistics(updates, byz, eps, k)
        weights = feature_weights(scale)
        phi_ref = extract_fingerprint(ref, eps, k).features
        medians.append(float(np.median([standardized_mse(f, phi_ref, weights) for f in fps])))
        for lam in lambda_values:
            res = adaptive_pgd_attack(
                ref, ref.replace(-ref.values), lam, a.lambda_a, a.steps, a.step_size,
                seed=sub_seed(cfg.seed, "attack"), feature_scale=scale,
                coords_per_step=a.coords_per_step, decay=a.decay, epsilon=eps, k=k,
            )
            runs.append({"lambda_s": lam, "fingerprint_mse": res.fingerprint_mse,
                         "attack_alignment": res.attack_alignment, "seed": cfg.seed})
    honest_median = float(np.mean(medians))
    frontier = []
    for lam in lambda_values:
        rows = [row for row in runs if row["lambda_s"] == lam]
        frontier.append({
            "lambda_s": lam,
            "fingerprint_mse": float(np.mean([row["fingerprint_mse"] for row in rows])),
            "attack_alignment": float(np.mean([row["attack_alignment"] for row in rows])),
            "seeds": len(rows),
            "honest_median_mse": honest_median,
        })
    if out_dir is not None:
        write_csv(Path(out_dir) / "pareto_runs.csv", PARETO_COLUMNS, runs)
        write_csv(Path(out_dir) / "pareto_frontier.csv", FRONTIER_COLUMNS, frontier)
    return ParetoResult(runs, frontier, honest_median)


ABLATION_COLUMNS = ("axis", "value", "final_accuracy", "mean_precision", "runtime_s", "seeds")


def run_ablation(
    config: ExperimentConfig, axis: str, values, seeds: int = 1, out_dir="ablation", parallel: int = 1
) -> tuple[list[dict], MatrixOutcome]:
    """One matrix entry per axis value; returns rows of seed-averaged results."""
    if axis not in ABLATION_AXES:
        raise ConfigurationError(f"ablation axis must be one of {sorted(ABLATION_AXES)}, got {axis!r}")
    key = ABLATION_AXES[axis]
    entries = []
    for v in values:
        if axis == "n_clients":
            if float(v) != int(v):
                raise ConfigurationError(f"n_clients must be an integer, got {v}")
            v = int(v)
        else:
            v = float(v)
        entries.append((f"{axis}={v}", with_value(config, key, v), v))
    manifest = RunManifest(tuple((name, cfg) for name, cfg, _ in entries), output_dir=str(out_dir), repetitions=seeds)
    outcome = run_matrix(manifest, out_dir, seeds, parallel)
    rows = []
    for (name, _, v), summary in zip(entries, outcome.summary):
        rows.append({"axis": axis, "value": v, "final_accuracy": summary["mean_accuracy"],
                     "mean_precision": summary["mean_precision"], "runtime_s": summary["mean_runtime_s"],
                     "seeds": summary["seeds"]})
    write_csv(Path(out_dir) / "ablation.csv", ABLATION_COLUMNS, rows)
    return rows, outcome
