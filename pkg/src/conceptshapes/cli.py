"""Command line harness.

Subcommands: generate, train, eval, attack, sweep, subset-experiment,
export. Options can come from a YAML config file (--config); explicit
command line flags win over file values. Every run appends an entry to an
append-only ledger (runs.jsonl) in the output directory and writes a
config snapshot plus a replication.md stub, so completed runs can be
re-executed bit-identically.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import torch

from . import attack as attack_mod
from . import models, training
from .datagen import DatasetConfig, DatasetManifest, generate_dataset, subset_manifest
from .errors import ConceptShapesError
from .training import DatasetArrays, TrainConfig

LEDGER_FILENAME = "runs.jsonl"
OUT_ENV_VAR = "CONCEPTSHAPES_OUT"


def _resolve_out(args) -> Path:
    out = getattr(args, "out", None) or os.environ.get(OUT_ENV_VAR)
    if not out:
        raise ConceptShapesError(
            f"no output directory: pass --out or set {OUT_ENV_VAR}")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config_hash(config: dict) -> str:
    payload = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(payload).hexdigest()[:16]


class RunLedger:
    """Append-only index of runs under one output root."""

    def __init__(self, root: Path):
        self.path = root / LEDGER_FILENAME

    def entries(self) -> list[dict]:
        if not self.path.exists():
            return []
        return [json.loads(line) for line in self.path.read_text().splitlines() if line]

    def completed(self, run_id: str) -> bool:
        return any(e["run_id"] == run_id and e["status"] == "completed"
                   for e in self.entries())

    def append(self, run_id: str, command: str, config_hash: str, status: str) -> None:
        entry = {"run_id": run_id, "command": command, "config_hash": config_hash,
                 "status": status, "timestamp": time.time()}
        with open(self.path, "a") as fh:
            fh.write(json.dumps(entry) + "\n")


def _start_run(args, command: str, config: dict) -> tuple[Path, RunLedger, str, str]:
    out = _resolve_out(args)
    config_hash = _config_hash(config)
    run_id = getattr(args, "run_id", None) or f"{command}-{config_hash}"
    ledger = RunLedger(out)
    if ledger.completed(run_id) and not args.force:
        raise ConceptShapesError(
            f"run {run_id!r} already completed in {out}; pass --force to re-run")
    ledger.append(run_id, command, config_hash, "started")
    (out / f"{run_id}.config.json").write_text(
        json.dumps(config, indent=2, sort_keys=True, default=str) + "\n")
    return out, ledger, run_id, config_hash


def _finish_run(out: Path, ledger: RunLedger, run_id: str, command: str,
                config_hash: str, config: dict) -> None:
    ledger.append(run_id, command, config_hash, "completed")
    seeds = {k: v for k, v in config.items() if "seed" in k}
    (out / f"{run_id}.replication.md").write_text(
        f"# Replication notes for `{run_id}`\n\n"
        f"- command: `{command}`\n"
        f"- config hash: `{config_hash}`\n"
        f"- seeds: `{json.dumps(seeds, default=str)}`\n"
        f"- package version: conceptshapes 0.1.0, torch {torch.__version__}\n"
        f"- full config: see `{run_id}.config.json`\n"
        "- single-threaded re-runs with this config reproduce all outputs "
        "byte-identically.\n")


def _load_yaml_config(path) -> dict:
    import yaml

    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConceptShapesError(f"{path}: config file must hold a mapping")
    return data


def _extract_config_path(argv) -> str | None:
    for i, arg in enumerate(argv):
        if arg == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if arg.startswith("--config="):
            return arg.split("=", 1)[1]
    return None


def _apply_config_file(parser: argparse.ArgumentParser, path: str) -> None:
    """Install file values as parser defaults, so explicit flags win."""
    file_values = {k.replace("-", "_"): v
                   for k, v in _load_yaml_config(path).items()}
    subparsers = parser._subparsers._group_actions[0].choices
    known = {a.dest for sp in subparsers.values() for a in sp._actions}
    unknown = set(file_values) - known
    if unknown:
        raise ConceptShapesError(f"unknown config keys in {path}: {sorted(unknown)}")
    for sp in subparsers.values():
        applicable = {a.dest: file_values[a.dest] for a in sp._actions
                      if a.dest in file_values}
        sp.set_defaults(**applicable)
        for a in sp._actions:
            if a.dest in applicable:
                a.required = False


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x]


def _str_list(text: str) -> list[str]:
    return [x.strip() for x in text.split(",") if x.strip()]


# ---------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    config = DatasetConfig(
        num_shapes=args.shapes,
        num_concepts=args.concepts,
        s=args.s,
        images_per_class=args.per_class,
        image_size=args.size,
        master_seed=args.seed,
    )
    snapshot = dataclasses.asdict(config)
    out, ledger, run_id, chash = _start_run(args, "generate", snapshot)
    manifest = generate_dataset(config, out)
    _finish_run(out, ledger, run_id, "generate", chash, snapshot)
    print(f"generated {len(manifest.records)} samples in {out}")
    return 0


def _train_config_from(args) -> TrainConfig:
    return TrainConfig(
        learning_rate=args.lr,
        dropout=args.dropout,
        lr_decay=args.lr_decay,
        concept_weight=args.concept_weight,
        concept_weight_decay=args.concept_weight_decay,
        epochs=args.epochs,
        batch_size=args.batch_size,
        seed=args.seed,
        bottleneck=args.bottleneck,
    )


def cmd_train(args) -> int:
    manifest = DatasetManifest.load(args.dataset)
    train_cfg = _train_config_from(args)
    snapshot = {"dataset": str(args.dataset), "variant": args.variant,
                "subset": args.subset, **dataclasses.asdict(train_cfg)}
    out, ledger, run_id, chash = _start_run(args, "train", snapshot)

    if args.subset:
        manifest = subset_manifest(manifest, args.subset, args.subset_seed)
    arrays = DatasetArrays.load(manifest, args.dataset)
    bundle = arrays.split_bundle(manifest)
    model, result = training.build_and_train(args.variant, bundle, manifest.config,
                                             train_cfg)

    run_dir = out / "runs" / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    models.save_model(run_dir / "model.ckpt", model)
    row = training._result_row(result, manifest.config, args.subset or 0)
    training.write_results_csv(run_dir / "results.csv", [row],
                               manifest.config.num_concepts)
    _finish_run(out, ledger, run_id, "train", chash, snapshot)
    print(f"test accuracy {result.test_accuracy:.4f} (best epoch {result.best_epoch})")
    return 0


def cmd_eval(args) -> int:
    model = models.load_model(args.model_ckpt)
    manifest = DatasetManifest.load(args.dataset)
    arrays = DatasetArrays.load(manifest, args.dataset)
    bundle = arrays.split_bundle(manifest)
    x, y, c = bundle[args.split]
    acc = training.evaluate_accuracy(model, x, y, c)
    print(f"{args.split} accuracy: {acc:.4f}")
    if model.has_concept_path:
        bits = training.predict_concept_bits(model, x)
        curve = training.mpo_curve(bits, c.to(torch.int64))
        print("MPO:", " ".join(f"{v:.3f}" for v in curve))
    return 0


def cmd_attack(args) -> int:
    model = models.load_model(args.model_ckpt)
    manifest = DatasetManifest.load(args.dataset)
    snapshot = {"dataset": str(args.dataset), "model_ckpt": str(args.model_ckpt),
                "method": args.method, "alpha": args.alpha, "gamma": args.gamma,
                "beta": args.beta, "epsilon": args.epsilon,
                "max_steps": args.max_steps, "split": args.split,
                "max_samples": args.max_samples, "seed": args.seed}
    out, ledger, run_id, chash = _start_run(args, "attack", snapshot)

    arrays = DatasetArrays.load(manifest, args.dataset)
    bundle = arrays.split_bundle(manifest)
    images, labels, _ = bundle[args.split]
    images = training.normalize(images)
    config = attack_mod.AttackConfig(alpha=args.alpha, gamma=args.gamma,
                                     beta=args.beta, epsilon=args.epsilon,
                                     max_steps=args.max_steps)
    indices = attack_mod.eligible_indices(model, images, labels)
    if args.max_samples and len(indices) > args.max_samples:
        import numpy as np
        rng = np.random.default_rng(args.seed)
        picked = rng.choice(len(indices), size=args.max_samples, replace=False)
        indices = [indices[i] for i in sorted(picked)]
    outcomes = attack_mod.run_attacks(model, images, labels, args.method, config,
                                      indices=indices)

    sample_ids = [r.sample_id for r in manifest.records if r.split == args.split]
    with open(out / "attacks.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "status", "iterations", "linf_norm"])
        for i, outcome in outcomes:
            writer.writerow([sample_ids[i], outcome.status, outcome.iterations,
                             f"{outcome.linf_norm:.6g}"])
    if args.save_images:
        from PIL import Image as PILImage
        img_dir = out / "perturbed"
        img_dir.mkdir(exist_ok=True)
        for i, outcome in outcomes:
            if outcome.success:
                arr = training.denormalize(outcome.perturbed).clamp(0, 1)
                arr = (arr.permute(1, 2, 0).numpy() * 255).round().astype("uint8")
                PILImage.fromarray(arr).save(img_dir / f"{sample_ids[i]}.png")
    n = len(outcomes)
    rate = sum(o.success for _, o in outcomes) / n if n else float("nan")
    _finish_run(out, ledger, run_id, "attack", chash, snapshot)
    print(f"attacked {n} samples, success rate {rate:.3f}")
    return 0


def cmd_sweep(args) -> int:
    model = models.load_model(args.model_ckpt)
    manifest = DatasetManifest.load(args.dataset)
    snapshot = {"dataset": str(args.dataset), "model_ckpt": str(args.model_ckpt),
                "epsilon": args.epsilon, "max_steps": args.max_steps,
                "search_samples": args.search_samples, "seed": args.seed}
    out, ledger, run_id, chash = _start_run(args, "sweep", snapshot)

    arrays = DatasetArrays.load(manifest, args.dataset)
    bundle = arrays.split_bundle(manifest)
    x_train = training.normalize(bundle["train"][0])
    x_test = training.normalize(bundle["test"][0])
    sweep = attack_mod.attack_sweep(
        model, x_train, bundle["train"][1], x_test, bundle["test"][1],
        epsilon=args.epsilon, max_steps=args.max_steps,
        n_search_samples=args.search_samples, seed=args.seed,
        n_final_samples=args.final_samples)

    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["phase", "alpha", "gamma", "beta",
                                                "success_rate"])
        writer.writeheader()
        writer.writerows(sweep["rows"])
    (out / "sweep.json").write_text(json.dumps(
        {k: v for k, v in sweep.items() if k != "rows"}, indent=2) + "\n")
    _finish_run(out, ledger, run_id, "sweep", chash, snapshot)
    print(f"best config: {sweep['best_config']}")
    print(f"ACA {sweep['aca_success_rate']:.3f} vs PGD {sweep['pgd_success_rate']:.3f}")
    return 0


def cmd_subset_experiment(args) -> int:
    manifest = DatasetManifest.load(args.dataset)
    snapshot = {"dataset": str(args.dataset), "sizes": args.sizes,
                "variants": args.variants, "seeds": args.seeds,
                "epochs": args.epochs, "batch_size": args.batch_size,
                "bottleneck": args.bottleneck, "subset_seed": args.subset_seed,
                "full_grid": args.full_grid}
    out, ledger, run_id, chash = _start_run(args, "subset-experiment", snapshot)

    base = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       bottleneck=args.bottleneck)
    grids = None
    if not args.full_grid:
        # Reduced default: one sensible cell per variant; the full 48-cell
        # grid is available with --full-grid.
        grids = {v: [{"learning_rate": 0.01, "dropout": 0.0}] if v in ("standard", "oracle")
                 else [{"learning_rate": 0.01, "dropout": 0.0,
                        "lr_decay": training.CONCEPT_LR_DECAY,
                        "concept_weight": 10.0, "concept_weight_decay": 1.0}]
                 for v in args.variants}
    training.subset_experiment(manifest, args.dataset, args.sizes, args.variants,
                               args.seeds, base=base, grids=grids,
                               subset_seed=args.subset_seed, out_dir=out)
    _finish_run(out, ledger, run_id, "subset-experiment", chash, snapshot)
    print(f"wrote {out / 'results.csv'} and {out / 'summary.csv'}")
    return 0


def export_plot_data(results_dir, out_dir) -> None:
    """Re-aggregate results.csv into plot-ready accuracy and MPO tables."""
    results_path = Path(results_dir) / "results.csv"
    if not results_path.exists():
        raise ConceptShapesError(f"{results_path} not found; run experiments first")
    with open(results_path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ConceptShapesError(f"{results_path} is empty")

    cells: dict[tuple[str, str], list[dict]] = {}
    for row in rows:
        cells.setdefault((row["variant"], row["subset_size"]), []).append(row)
    max_seeds = max(len(v) for v in cells.values())
    missing = [(variant, size, f"{len(v)}/{max_seeds} seeds")
               for (variant, size), v in sorted(cells.items()) if len(v) < max_seeds]
    if missing:
        raise ConceptShapesError(f"incomplete result cells: {missing}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    k = max((int(c.split("_")[1]) for c in rows[0] if c.startswith("mpo_")), default=0)

    with open(out_dir / "accuracy_vs_size.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "subset_size", "mean_accuracy", "ci_half_width", "n"])
        for (variant, size), group in sorted(cells.items()):
            ci = training.aggregate_ci([float(r["test_accuracy"]) for r in group])
            writer.writerow([variant, size, f"{ci.mean:.6f}", f"{ci.half_width:.6f}", ci.n])

    with open(out_dir / "mpo_vs_m.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["variant", "subset_size", "m", "mean_mpo", "ci_half_width", "n"])
        for (variant, size), group in sorted(cells.items()):
            if not group[0].get("mpo_1"):
                continue
            for m in range(1, k + 1):
                ci = training.aggregate_ci([float(r[f"mpo_{m}"]) for r in group])
                writer.writerow([variant, size, m, f"{ci.mean:.6f}",
                                 f"{ci.half_width:.6f}", ci.n])


def cmd_export(args) -> int:
    export_plot_data(args.results, args.out or args.results)
    print("wrote accuracy_vs_size.csv and mpo_vs_m.csv")
    return 0


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="conceptshapes",
        description="Generate concept-shape datasets, train concept models, "
                    "and run adversarial concept attacks.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="YAML config file; flags override it")
        p.add_argument("--out", help=f"output directory (or ${OUT_ENV_VAR})")
        p.add_argument("--run-id", help="explicit run id for the ledger")
        p.add_argument("--force", action="store_true",
                       help="re-run even if this run id already completed")

    p = sub.add_parser("generate", help="generate a dataset")
    common(p)
    p.add_argument("--shapes", type=int, choices=(4, 5, 6), default=4)
    p.add_argument("--concepts", type=int, choices=(5, 9), default=9)
    p.add_argument("--s", type=float, default=0.98)
    p.add_argument("--per-class", type=int, default=1000)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_generate)

    def train_opts(p):
        p.add_argument("--lr", type=float, default=0.01)
        p.add_argument("--dropout", type=float, default=0.0)
        p.add_argument("--lr-decay", type=float, default=1.0)
        p.add_argument("--concept-weight", type=float, default=10.0)
        p.add_argument("--concept-weight-decay", type=float, default=1.0)
        p.add_argument("--epochs", type=int, default=50)
        p.add_argument("--batch-size", type=int, default=64)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--bottleneck", choices=("soft", "hard"), default="soft")

    p = sub.add_parser("train", help="train one model")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--variant", choices=models.VARIANTS, required=True)
    p.add_argument("--subset", type=int, default=0,
                   help="train+val images per class (0 = all)")
    p.add_argument("--subset-seed", type=int, default=0)
    train_opts(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--model-ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.set_defaults(fn=cmd_eval, config=None)

    p = sub.add_parser("attack", help="attack a trained model")
    common(p)
    p.add_argument("--method", choices=("pgd", "aca"), required=True)
    p.add_argument("--model-ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--alpha", type=float, default=0.001)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--beta", type=float, default=-0.3)
    p.add_argument("--epsilon", type=float, default=attack_mod.DEFAULT_EPSILON)
    p.add_argument("--max-steps", type=int, default=attack_mod.DEFAULT_MAX_STEPS)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--max-samples", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--save-images", action="store_true")
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("sweep", help="attack hyperparameter sweep")
    common(p)
    p.add_argument("--model-ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--epsilon", type=float, default=attack_mod.DEFAULT_EPSILON)
    p.add_argument("--max-steps", type=int, default=attack_mod.DEFAULT_MAX_STEPS)
    p.add_argument("--search-samples", type=int, default=attack_mod.SEARCH_SAMPLES)
    p.add_argument("--final-samples", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("subset-experiment", help="accuracy/MPO vs subset size")
    common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--sizes", type=_int_list, default=[50, 100, 150, 200, 250])
    p.add_argument("--variants", type=_str_list,
                   default=list(models.VARIANTS[:-1]))
    p.add_argument("--seeds", type=_int_list, default=list(range(10)))
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--bottleneck", choices=("soft", "hard"), default="soft")
    p.add_argument("--subset-seed", type=int, default=0)
    p.add_argument("--full-grid", action="store_true",
                   help="run the full 48-cell hyperparameter grid per cell")
    p.set_defaults(fn=cmd_subset_experiment)

    p = sub.add_parser("export", help="emit plot-ready CSV tables")
    p.add_argument("--results", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_export, config=None)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        config_path = _extract_config_path(argv)
        if config_path:
            _apply_config_file(parser, config_path)
        args = parser.parse_args(argv)
        return args.fn(args)
    except ConceptShapesError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
