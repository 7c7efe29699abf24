"""Training, evaluation and experiment drivers.

Covers the joint weighted loss (class cross entropy plus a decaying
concept BCE term), Adam with stepped exponential learning-rate decay,
best-validation checkpointing, the MPO metric, Student-t confidence
intervals over seeds, hyperparameter grid search and the subset-size
experiment.
"""

from __future__ import annotations

import copy
import csv
import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import stats

from . import models, ops
from .datagen import DatasetManifest, subset_manifest
from .errors import InvalidConfigError, ShapeMismatchError, TrainingDivergedError
from .models import ConceptModel, ModelConfig

# Pixel pipeline constants: scale to [0,1], then normalize.
NORM_MEAN = 0.5
NORM_STD = 2.0
CROP_PADDING = 4

LR_DECAY_EVERY = 5  # epochs between learning-rate decay steps

# Hyperparameter grids. The standard model searches the learning-rate
# decay; concept models fix it and search the concept-loss weight
# schedule (weight, per-epoch decay). Both grids have 48 cells.
LEARNING_RATES = (0.05, 0.01, 0.005, 0.001)
DROPOUTS = (0.0, 0.2, 0.4)
STANDARD_LR_DECAYS = (0.1, 0.5, 0.7, 1.0)
CONCEPT_WEIGHT_TUPLES = ((100.0, 0.8), (100.0, 0.9), (5.0, 1.0), (10.0, 1.0))
CONCEPT_LR_DECAY = 0.7
ORACLE_LR = 0.01


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    dropout: float = 0.0
    lr_decay: float = 1.0
    concept_weight: float = 10.0
    concept_weight_decay: float = 1.0
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    bottleneck: str = "soft"

    def __post_init__(self):
        if self.concept_weight < 0:
            raise InvalidConfigError("concept_weight must be nonnegative")
        if not 0.0 < self.concept_weight_decay <= 1.0:
            raise InvalidConfigError("concept_weight_decay must lie in (0, 1]")
        if not 0.0 < self.lr_decay <= 1.0:
            raise InvalidConfigError("lr_decay must lie in (0, 1]")

    def concept_weight_at(self, epoch: int) -> float:
        return self.concept_weight * self.concept_weight_decay ** epoch

    def learning_rate_at(self, epoch: int) -> float:
        return self.learning_rate * self.lr_decay ** (epoch // LR_DECAY_EVERY)


@dataclass
class RunResult:
    model_config: ModelConfig
    train_config: TrainConfig
    train_losses: list[float]
    val_accuracies: list[float]
    best_epoch: int
    test_accuracy: float
    mpo_curve: list[float] | None
    seed: int
    wall_clock: float


@dataclass(frozen=True)
class CISummary:
    mean: float
    half_width: float
    n: int


class DatasetArrays:
    """All records of a base manifest loaded once; subsets select rows."""

    def __init__(self, images, labels, concepts, index):
        self.images = images        # (N, 3, H, W) float32 in [0, 1]
        self.labels = labels        # (N,) int64
        self.concepts = concepts    # (N, k) float32
        self.index = index          # sample_id -> row

    @classmethod
    def load(cls, manifest: DatasetManifest, root) -> "DatasetArrays":
        root = Path(root)
        n = len(manifest.records)
        size = manifest.config.image_size
        images = torch.empty((n, 3, size, size), dtype=torch.float32)
        labels = torch.empty(n, dtype=torch.int64)
        concepts = torch.empty((n, manifest.config.num_concepts), dtype=torch.float32)
        index = {}
        for row, rec in enumerate(manifest.records):
            with Image.open(root / rec.image_ref) as img:
                arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
            images[row] = torch.from_numpy(arr).permute(2, 0, 1)
            labels[row] = rec.class_index
            concepts[row] = torch.tensor(rec.concepts, dtype=torch.float32)
            index[rec.sample_id] = row
        return cls(images, labels, concepts, index)

    def split_bundle(self, manifest: DatasetManifest) -> dict:
        """Per-split tensors according to the given (possibly subset) manifest."""
        bundle = {}
        for split in ("train", "val", "test"):
            rows = [self.index[r.sample_id] for r in manifest.records if r.split == split]
            idx = torch.tensor(rows, dtype=torch.int64)
            bundle[split] = (self.images[idx], self.labels[idx], self.concepts[idx])
        return bundle


def normalize(images: torch.Tensor) -> torch.Tensor:
    return (images - NORM_MEAN) / NORM_STD


def denormalize(images: torch.Tensor) -> torch.Tensor:
    return images * NORM_STD + NORM_MEAN


def random_crop(images: torch.Tensor, generator: torch.Generator) -> torch.Tensor:
    """Zero-pad by CROP_PADDING pixels and crop back to the original size."""
    pad = CROP_PADDING
    n, _, h, w = images.shape
    padded = torch.nn.functional.pad(images, (pad, pad, pad, pad))
    tops = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    lefts = torch.randint(0, 2 * pad + 1, (n,), generator=generator)
    out = torch.empty_like(images)
    for i in range(n):
        out[i] = padded[i, :, tops[i]:tops[i] + h, lefts[i]:lefts[i] + w]
    return out


def joint_loss(class_logits, concept_logits, y, c, concept_weight: float):
    """CE(class) + weight * BCE(concepts); pure CE when there is no concept path."""
    loss = ops.softmax_cross_entropy(class_logits, y)
    if concept_logits is not None and concept_weight > 0:
        loss = loss + concept_weight * ops.binary_cross_entropy(concept_logits, c)
    return loss


def _model_inputs(model: ConceptModel, images, concepts):
    return concepts if model.variant == "oracle" else images


def evaluate_accuracy(model: ConceptModel, images, labels, concepts,
                      batch_size: int = 256) -> float:
    model.eval()
    correct = 0
    with torch.no_grad():
        for start in range(0, len(labels), batch_size):
            sl = slice(start, start + batch_size)
            x = _model_inputs(model, normalize(images[sl]), concepts[sl])
            logits, _ = model(x)
            correct += int((logits.argmax(dim=1) == labels[sl]).sum())
    return correct / max(1, len(labels))


def predict_concept_bits(model: ConceptModel, images, batch_size: int = 256):
    model.eval()
    parts = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            parts.append(models.predict_concepts_binary(
                model, normalize(images[start:start + batch_size])))
    return torch.cat(parts)


def train(model: ConceptModel, bundle: dict, config: TrainConfig) -> RunResult:
    """Train with Adam and the joint loss; restore the best-validation epoch
    (earliest on ties) before the test evaluation."""
    start_time = time.monotonic()
    generator = torch.Generator().manual_seed(config.seed)
    torch.manual_seed(config.seed)  # dropout masks

    x_train, y_train, c_train = bundle["train"]
    x_val, y_val, c_val = bundle["val"]
    x_test, y_test, c_test = bundle["test"]

    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    # epochs == 0 keeps the untrained parameters; otherwise the earliest
    # epoch with the maximum validation accuracy wins.
    best_state = copy.deepcopy(model.state_dict())
    best_acc = -1.0
    best_epoch = -1
    train_losses: list[float] = []
    val_accuracies: list[float] = []

    n = len(y_train)
    for epoch in range(config.epochs):
        lr = config.learning_rate_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        weight = config.concept_weight_at(epoch)

        model.train()
        perm = torch.randperm(n, generator=generator)
        epoch_loss, batches = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            images = x_train[idx]
            if model.variant != "oracle":
                images = random_crop(images, generator)
            x = _model_inputs(model, normalize(images), c_train[idx])
            class_logits, concept_logits = model(x)
            loss = joint_loss(class_logits, concept_logits, y_train[idx],
                              c_train[idx], weight)
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {batches} "
                    f"(lr={lr}, concept_weight={weight})")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach())
            batches += 1
        train_losses.append(epoch_loss / max(1, batches))

        val_acc = evaluate_accuracy(model, x_val, y_val, c_val)
        val_accuracies.append(val_acc)
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())

    model.load_state_dict(best_state)
    test_accuracy = evaluate_accuracy(model, x_test, y_test, c_test)
    mpo_curve_values = None
    if model.has_concept_path:
        bits = predict_concept_bits(model, x_test)
        mpo_curve_values = mpo_curve(bits, c_test.to(torch.int64))

    return RunResult(
        model_config=model.config,
        train_config=config,
        train_losses=train_losses,
        val_accuracies=val_accuracies,
        best_epoch=best_epoch,
        test_accuracy=test_accuracy,
        mpo_curve=mpo_curve_values,
        seed=config.seed,
        wall_clock=time.monotonic() - start_time,
    )


def mpo(predicted_bits, true_bits, m: int) -> float:
    """Fraction of rows with at least m concept mispredictions."""
    predicted_bits = torch.as_tensor(predicted_bits)
    true_bits = torch.as_tensor(true_bits)
    if predicted_bits.shape != true_bits.shape:
        raise ShapeMismatchError(
            f"mpo: shapes {tuple(predicted_bits.shape)} and "
            f"{tuple(true_bits.shape)} differ")
    mistakes = (predicted_bits != true_bits).sum(dim=1)
    return float((mistakes >= m).to(torch.float64).mean())


def mpo_curve(predicted_bits, true_bits) -> list[float]:
    k = predicted_bits.shape[1]
    return [mpo(predicted_bits, true_bits, m) for m in range(1, k + 1)]


def aggregate_ci(values, confidence: float = 0.95) -> CISummary:
    """Mean and Student-t confidence half-width over per-seed values."""
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n < 2:
        raise InvalidConfigError("confidence intervals need at least 2 values")
    sd = values.std(ddof=1)
    t = stats.t.ppf(0.5 + confidence / 2.0, df=n - 1)
    return CISummary(mean=float(values.mean()),
                     half_width=float(t * sd / np.sqrt(n)), n=n)


def hyperparameter_grid(variant: str) -> list[dict]:
    """Full search grid: 48 cells for every trainable image model."""
    if variant == "oracle":
        return [{"learning_rate": ORACLE_LR}]
    cells = []
    for lr in LEARNING_RATES:
        for dropout in DROPOUTS:
            if variant == "standard":
                for decay in STANDARD_LR_DECAYS:
                    cells.append({"learning_rate": lr, "dropout": dropout,
                                  "lr_decay": decay})
            else:
                for weight, weight_decay in CONCEPT_WEIGHT_TUPLES:
                    cells.append({"learning_rate": lr, "dropout": dropout,
                                  "lr_decay": CONCEPT_LR_DECAY,
                                  "concept_weight": weight,
                                  "concept_weight_decay": weight_decay})
    return cells


def build_and_train(variant: str, bundle: dict, dataset_config,
                    train_config: TrainConfig) -> tuple[ConceptModel, RunResult]:
    model_config = ModelConfig(
        variant=variant,
        num_classes=dataset_config.num_classes,
        num_concepts=dataset_config.num_concepts,
        image_size=dataset_config.image_size,
        dropout=train_config.dropout,
        bottleneck=train_config.bottleneck,
    )
    model = models.build(model_config, seed=train_config.seed)
    return model, train(model, bundle, train_config)


def grid_search(variant: str, bundle: dict, dataset_config, base: TrainConfig,
                grid: list[dict] | None = None, seed: int = 0) -> tuple[dict, float]:
    """Pick the grid cell with the best validation accuracy (first wins ties)."""
    grid = hyperparameter_grid(variant) if grid is None else grid
    best_cell, best_acc = None, -1.0
    for cell in grid:
        cfg = dataclasses.replace(base, seed=seed, **cell)
        _, result = build_and_train(variant, bundle, dataset_config, cfg)
        val_acc = max(result.val_accuracies, default=0.0)
        if val_acc > best_acc:
            best_cell, best_acc = cell, val_acc
    return best_cell, best_acc


def subset_experiment(manifest: DatasetManifest, root, sizes, variants, seeds,
                      base: TrainConfig = TrainConfig(), grids: dict | None = None,
                      subset_seed: int = 0, out_dir=None):
    """Grid-search then multi-seed train for every (variant, size) cell.

    Returns (run rows, summary rows); optionally writes results.csv and
    summary.csv under ``out_dir``.
    """
    arrays = DatasetArrays.load(manifest, root)
    cfg = manifest.config
    results, summaries = [], []
    for size in sizes:
        sub = subset_manifest(manifest, size, subset_seed)
        bundle = arrays.split_bundle(sub)
        for variant in variants:
            grid = (grids or {}).get(variant)
            best_cell, _ = grid_search(variant, bundle, cfg, base, grid=grid)
            per_seed = []
            for seed in seeds:
                run_cfg = dataclasses.replace(base, seed=seed, **best_cell)
                _, result = build_and_train(variant, bundle, cfg, run_cfg)
                per_seed.append(result)
                results.append(_result_row(result, cfg, size))
            ci = aggregate_ci([r.test_accuracy for r in per_seed])
            summaries.append({
                "variant": variant, "subset_size": size, "n_seeds": ci.n,
                "mean_test_accuracy": ci.mean, "ci_half_width": ci.half_width,
                **_mpo_summary(per_seed, cfg.num_concepts),
            })
    if out_dir is not None:
        write_results_csv(Path(out_dir) / "results.csv", results, cfg.num_concepts)
        write_summary_csv(Path(out_dir) / "summary.csv", summaries, cfg.num_concepts)
    return results, summaries


def _mpo_summary(runs: list[RunResult], k: int) -> dict:
    curves = [r.mpo_curve for r in runs if r.mpo_curve is not None]
    if not curves:
        return {f"mean_mpo_{m}": "" for m in range(1, k + 1)}
    means = np.mean(np.asarray(curves), axis=0)
    return {f"mean_mpo_{m}": float(means[m - 1]) for m in range(1, k + 1)}


def _result_row(result: RunResult, dataset_config, subset_size: int) -> dict:
    row = {
        "variant": result.model_config.variant,
        "classes": dataset_config.num_classes,
        "concepts": dataset_config.num_concepts,
        "s": dataset_config.s,
        "subset_size": subset_size,
        "seed": result.seed,
        "test_accuracy": result.test_accuracy,
    }
    k = dataset_config.num_concepts
    for m in range(1, k + 1):
        row[f"mpo_{m}"] = result.mpo_curve[m - 1] if result.mpo_curve else ""
    row["hyperparameters"] = json.dumps(dataclasses.asdict(result.train_config))
    return row


def write_results_csv(path, rows: list[dict], k: int) -> None:
    header = (["variant", "classes", "concepts", "s", "subset_size", "seed",
               "test_accuracy"] + [f"mpo_{m}" for m in range(1, k + 1)]
              + ["hyperparameters"])
    _write_csv(path, header, rows)


def write_summary_csv(path, rows: list[dict], k: int) -> None:
    header = (["variant", "subset_size", "n_seeds", "mean_test_accuracy",
               "ci_half_width"] + [f"mean_mpo_{m}" for m in range(1, k + 1)])
    _write_csv(path, header, rows)


def _write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
