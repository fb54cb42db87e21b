"""Command-line experiment runner.

    fedssa run --config cfg.json [--key value ...]
    fedssa compare --config cfg.json --algorithms fedssa,standalone,case_b
    fedssa check-gradients [--config cfg.json]
    fedssa gen-fixtures --out DIR

Exit codes: 0 ok, 2 config error, 3 runtime error. ``FEDSSA_OUTPUT_DIR``
overrides the configured output directory.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ExperimentConfig, canonical_algorithm, from_dict, parse_config, parse_overrides
from .data import write_idx_images, write_idx_labels
from .errors import ConfigError
from .metrics import TargetTracker, emit
from .models import build_model, model_arrays
from .numerics import Batch, finite_diff_check
from .protocol import ExperimentResult, run_experiment
from .seeding import derive_seed

log = logging.getLogger("fedssa")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
OUTPUT_ENV = "FEDSSA_OUTPUT_DIR"
SUMMARY_FIELDS = ("algorithm", "final_mean_acc", "rounds_to_target", "params_to_target",
                  "flops_to_target")
# keys allowed to differ between the runs of one comparison
SWEEP_KEYS = {"algorithm", "algo_params", "run_id", "output_dir"}


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def output_dir(cfg: ExperimentConfig) -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or cfg.output_dir)


def seed_derivations(cfg: ExperimentConfig) -> dict:
    return {
        "master": cfg.seed,
        "data.blobs": derive_seed(cfg.seed, "data", "blobs"),
        "data.partition": derive_seed(cfg.seed, "data", "partition"),
        "init.global": derive_seed(cfg.seed, "init", "global"),
        "init.clients": [derive_seed(cfg.seed, "init", k) for k in range(cfg.N)],
        "sample": "derive_seed(master, 'sample', t)",
        "client": "derive_seed(master, 'client', k, t)",
    }


def write_manifest(path: Path, cfg: ExperimentConfig, **fields) -> None:
    doc = {"config": cfg.to_dict(), "version": __version__, "seeds": seed_derivations(cfg),
           **fields}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def run(cfg: ExperimentConfig, out: Path | None = None) -> ExperimentResult:
    """Execute one configured run and write its artefacts to ``out``."""
    cfg.validate()
    out = Path(out) if out is not None else output_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    run_id = cfg.resolved_run_id()
    manifest = out / f"{run_id}_manifest.json"
    started = _now()
    write_manifest(manifest, cfg, status="incomplete", started=started, finished=None)

    def on_round(sim, record):
        every = cfg.checkpoint_every
        if every and (record.round + 1) % every == 0:
            sim.save_checkpoint(out / f"{run_id}_ckpt_r{record.round}.npz", record.round)

    try:
        result = run_experiment(cfg, on_round=on_round)
    except BaseException as exc:
        status = "interrupted" if isinstance(exc, KeyboardInterrupt) else "failed"
        write_manifest(manifest, cfg, status=status, started=started, finished=_now(),
                       error=f"{type(exc).__name__}: {exc}")
        raise

    emit(result.records, out / f"{run_id}_rounds.csv")
    arrays = {}
    for k, model in enumerate(result.models):
        arrays.update(model_arrays(model, prefix=f"client.{k}."))
    with open(out / f"{run_id}_models.npz", "wb") as fh:
        np.savez(fh, **arrays)

    tracker = TargetTracker(cfg.target_accuracy)
    for r in result.records:
        tracker.update(r)
    last = result.records[-1] if result.records else None
    summary = {
        "run_id": run_id,
        "algorithm": cfg.algorithm,
        "final_mean_accuracy": result.final_mean_accuracy,
        "cum_params": last.cum_params if last else 0,
        "cum_flops": last.cum_flops if last else 0,
        "rounds_to_target": tracker.round,
        "params_to_target": tracker.params,
        "flops_to_target": tracker.flops,
    }
    (out / f"{run_id}_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    write_manifest(manifest, cfg, status="complete", started=started, finished=_now())
    print(f"{run_id}: final mean accuracy {100 * summary['final_mean_accuracy']:.2f}%  "
          f"cum params {summary['cum_params']}  cum FLOPs {summary['cum_flops']}")
    return result


def _data_model_keys(cfg: ExperimentConfig) -> dict:
    return {k: v for k, v in cfg.to_dict().items() if k not in SWEEP_KEYS}


def compare(configs: Sequence[ExperimentConfig], out: Path | None = None) -> list[dict]:
    """Run each config and tabulate final accuracy and cost-to-target.

    All configs must agree on every data and model key, so each algorithm
    sees the same partitions and initial models.
    """
    if not configs:
        raise ConfigError("nothing to compare")
    reference = _data_model_keys(configs[0])
    for cfg in configs[1:]:
        other = _data_model_keys(cfg)
        diff = sorted(k for k in reference if reference[k] != other[k])
        if diff:
            raise ConfigError("compared configs may differ only in algorithm settings", diff[0])
    out = Path(out) if out is not None else output_dir(configs[0])
    rows = []
    for cfg in configs:
        result = run(cfg, out)
        tracker = TargetTracker(cfg.target_accuracy)
        for r in result.records:
            tracker.update(r)
        rows.append({"algorithm": cfg.algorithm,
                     "final_mean_acc": result.final_mean_accuracy,
                     "rounds_to_target": tracker.round,
                     "params_to_target": tracker.params,
                     "flops_to_target": tracker.flops})
    with open(out / "compare_summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SUMMARY_FIELDS)
        for row in rows:
            writer.writerow(["" if row[f] is None else (repr(row[f]) if isinstance(row[f], float)
                                                        else row[f]) for f in SUMMARY_FIELDS])
    return rows


def sweep_configs(base: ExperimentConfig, algorithms: Sequence[str]) -> list[ExperimentConfig]:
    configs = []
    seen = set()
    for name in algorithms:
        canon = canonical_algorithm(name.strip())
        run_id = canon if canon not in seen else f"{canon}_{len(configs)}"
        seen.add(canon)
        d = base.to_dict()
        d.update(algorithm=canon, run_id=f"{run_id}_s{base.seed}")
        configs.append(from_dict(d))
    return configs


def check_gradients(cfg: ExperimentConfig, n_coords: int = 20, epsilon: float = 1e-5,
                    tolerance: float = 1e-4) -> list[tuple[str, float, bool]]:
    """Finite-difference check of every zoo architecture on a random batch."""
    input_dim = cfg.dataset.d_in if cfg.dataset.kind == "blobs" else 784
    rng = np.random.default_rng(derive_seed(cfg.seed, "gradcheck"))
    results = []
    for i, spec in enumerate(cfg.extractor_specs(input_dim)):
        model = build_model(spec, cfg.S, rng)
        batch = Batch(rng.standard_normal((16, input_dim)), rng.integers(0, cfg.S, size=16))
        report = finite_diff_check(model.layers, batch, n_coords, epsilon, tolerance, seed=i)
        results.append((f"zoo[{i}] hidden={list(spec.hidden)}", report.max_rel_error, report.passed))
    return results


def gen_fixtures(out: Path, seed: int = 0) -> list[Path]:
    """Write a small IDX image/label pair plus a default JSON config."""
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n = 200
    labels = np.repeat(np.arange(10, dtype=np.uint8), n // 10)
    # each class lights up its own 2x2 patch of an 8x8 image, plus noise
    images = rng.integers(0, 40, size=(n, 8, 8)).astype(np.uint8)
    for i, y in enumerate(labels):
        r, c = divmod(int(y), 4)
        images[i, 2 * r:2 * r + 2, 2 * c:2 * c + 2] = 255
    paths = [out / "fixture-images.idx3-ubyte", out / "fixture-labels.idx1-ubyte"]
    write_idx_images(paths[0], images)
    write_idx_labels(paths[1], labels)
    cfg = ExperimentConfig().to_dict()
    cfg["dataset"] = {"kind": "idx", "images": str(paths[0]), "labels": str(paths[1])}
    paths.append(out / "fixture-config.json")
    paths[2].write_text(json.dumps(cfg, indent=2))
    paths.append(out / "default-config.json")
    paths[3].write_text(json.dumps(ExperimentConfig().to_dict(), indent=2))
    return paths


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedssa", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="run one experiment")
    p.add_argument("--config")
    p = sub.add_parser("compare", help="run several algorithms on identical data")
    p.add_argument("--config")
    p.add_argument("--algorithms", required=True, help="comma-separated algorithm names")
    p = sub.add_parser("check-gradients", help="finite-difference check of the model zoo")
    p.add_argument("--config")
    p.add_argument("--coords", type=int, default=20)
    p = sub.add_parser("gen-fixtures", help="write IDX fixtures and example configs")
    p.add_argument("--out", default="fixtures")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-fixtures":
            if extra:
                raise ConfigError(f"unexpected arguments {extra}")
            for path in gen_fixtures(Path(args.out)):
                print(path)
            return EXIT_OK
        overrides = parse_overrides(extra)
        cfg = parse_config(args.config, overrides)
        # an explicit --output_dir beats the environment variable
        out = Path(cfg.output_dir) if "output_dir" in overrides else None
        if args.command == "run":
            run(cfg, out)
        elif args.command == "compare":
            rows = compare(sweep_configs(cfg, args.algorithms.split(",")), out)
            for row in rows:
                print(f"{row['algorithm']:>20}  {100 * row['final_mean_acc']:6.2f}%  "
                      f"target round {row['rounds_to_target'] if row['rounds_to_target'] is not None else '-'}")
        elif args.command == "check-gradients":
            ok = True
            for name, err, passed in check_gradients(cfg, args.coords):
                print(f"{'PASS' if passed else 'FAIL'}  {name}  max rel err {err:.2e}")
                ok &= passed
            return EXIT_OK if ok else EXIT_RUNTIME
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - surfaced as exit status
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
