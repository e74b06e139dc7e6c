"""Command-line front end: ``fpguard {run,matrix,pareto,ablation,probe-runtime}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .config import ABLATION_AXES, RunManifest, parse_manifest
from .errors import ConfigurationError
from .harness import run_ablation, run_matrix, run_pareto_sweep, write_csv
from .simulator import runtime_scaling_probe

log = logging.getLogger("fpguard")


def _single_entry(manifest: RunManifest):
    if len(manifest.entries) != 1:
        names = [n for n, _ in manifest.entries]
        raise ConfigurationError(f"expected exactly one experiment, found {names}")
    return manifest.entries[0]


def _report(outcome) -> int:
    for row in outcome.summary:
        log.info("%-30s acc=%s prec=%s", row["entry"], row["mean_accuracy"], row["mean_precision"])
    log.info("%d experiment(s) executed, %d failed", outcome.executed, len(outcome.failures))
    return 1 if outcome.failures else 0


def cmd_run(args, manifest: RunManifest) -> int:
    name, config = _single_entry(manifest)
    single = replace(manifest, entries=((name, config),))
    return _report(run_matrix(single, args.out, args.seeds, 1))


def cmd_matrix(args, manifest: RunManifest) -> int:
    return _report(run_matrix(manifest, args.out, args.seeds, args.parallel))


def cmd_pareto(args, manifest: RunManifest) -> int:
    _, config = _single_entry(manifest)
    seeds = args.seeds or 5
    res = run_pareto_sweep(config, manifest.pareto.lambda_s, seeds, args.out, manifest.pareto.warmup_rounds)
    for row in res.frontier:
        log.info("lambda_s=%-8g mse=%.4g alignment=%.4f", row["lambda_s"], row["fingerprint_mse"], row["attack_alignment"])
    log.info("honest median MSE %.4g", res.honest_median_mse)
    return 0


def cmd_ablation(args, manifest: RunManifest) -> int:
    _, config = _single_entry(manifest)
    axis = args.axis or manifest.ablation.axis
    values = args.values or manifest.ablation.values
    if axis is None or not values:
        raise ConfigurationError("ablation needs an axis and values (flags or [ablation] section)")
    seeds = args.seeds or manifest.repetitions
    rows, outcome = run_ablation(config, axis, values, seeds, args.out, args.parallel)
    for row in rows:
        log.info("%s=%-8g acc=%s prec=%s", axis, row["value"], row["final_accuracy"], row["mean_precision"])
    return 1 if outcome.failures else 0


def cmd_probe(args, manifest: RunManifest | None) -> int:
    probe = manifest.probe if manifest is not None else None
    kwargs = {} if probe is None else {"n_values": probe.n_values, "d": probe.d, "repetitions": probe.repetitions}
    if args.seeds:
        kwargs["repetitions"] = args.seeds
    rows = runtime_scaling_probe(kinds=("tinyguard", "tinyguard_extraction", "krum"), **kwargs)
    write_csv(Path(args.out) / "runtime_probe.csv", ("n", "defense", "median_ms"), rows)
    print(json.dumps(rows, indent=1))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fpguard", description="Fingerprint-filtered federated learning experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p, need_config=True, parallel=True):
        p.add_argument("--config", required=need_config, type=Path, help="manifest file")
        p.add_argument("--out", type=Path, default=None, help="output directory")
        p.add_argument("--seeds", type=int, default=None, help="seeds (repetitions) per entry")
        if parallel:
            p.add_argument("--parallel", type=int, default=1, help="worker processes")
        return p

    common(sub.add_parser("run", help="run the single experiment in a config"), parallel=False)
    common(sub.add_parser("matrix", help="run every entry of a manifest"))
    common(sub.add_parser("pareto", help="adaptive attacker lambda_s sweep"), parallel=False)
    ab = common(sub.add_parser("ablation", help="sweep one config axis"))
    ab.add_argument("--axis", choices=sorted(ABLATION_AXES))
    ab.add_argument("--values", type=float, nargs="+")
    common(sub.add_parser("probe-runtime", help="detection vs Krum timing"), need_config=False, parallel=False)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        manifest = parse_manifest(args.config) if args.config is not None else None
        if args.out is None:
            args.out = Path(manifest.output_dir if manifest is not None else "results")
        if args.seeds is not None and args.seeds < 1:
            raise ConfigurationError("--seeds must be >= 1")
        handler = {"run": cmd_run, "matrix": cmd_matrix, "pareto": cmd_pareto,
                   "ablation": cmd_ablation, "probe-runtime": cmd_probe}[args.verb]
        return handler(args, manifest)
    except ConfigurationError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
