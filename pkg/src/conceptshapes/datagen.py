"""Dataset generation: class enumeration, concept prototypes, sampling,
manifests, and per-class subsets.

A dataset is defined by a :class:`DatasetConfig` and fully determined by
its master seed. Per-sample seeds are derived with
``numpy.random.SeedSequence(master_seed, spawn_key=(class_index, ordinal))``
so samples can be generated independently and in parallel.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import InvalidConfigError
from .rendering import render_image

# Fixed alphabetical ordering; class enumeration depends on it.
SHAPE_KINDS = ("circle", "hexagon", "pentagon", "square", "triangle", "wedge")

CONCEPT_NAMES = (
    "big_shapes",
    "thick_outlines",
    "blue_facecolor",
    "red_outline",
    "stripes",
    "magenta_upper_background",
    "indigo_lower_background",
    "upper_background_stripes",
    "lower_background_stripes",
)

MANIFEST_FILENAME = "manifest.json"
RECORDS_FILENAME = "records.csv"
IMAGES_DIRNAME = "images"
INCOMPLETE_MARKER = "_INCOMPLETE"


@dataclass(frozen=True)
class ClassSpec:
    """An unordered pair of shape kinds, canonically ordered."""

    shape_a: str
    shape_b: str
    class_index: int

    def __post_init__(self):
        ia, ib = SHAPE_KINDS.index(self.shape_a), SHAPE_KINDS.index(self.shape_b)
        if ia > ib:
            raise InvalidConfigError(
                f"shape pair not canonically ordered: {self.shape_a}, {self.shape_b}")


@dataclass(frozen=True)
class DatasetConfig:
    num_shapes: int
    num_concepts: int
    s: float
    images_per_class: int
    image_size: int = 64
    split_fractions: tuple[float, float, float] = (0.5, 0.3, 0.2)
    master_seed: int = 0

    def __post_init__(self):
        if self.num_shapes not in (4, 5, 6):
            raise InvalidConfigError(f"num_shapes must be 4, 5 or 6, got {self.num_shapes}")
        if self.num_concepts not in (5, 9):
            raise InvalidConfigError(f"num_concepts must be 5 or 9, got {self.num_concepts}")
        if not 0.5 <= self.s <= 1.0:
            raise InvalidConfigError(f"s must lie in [0.5, 1], got {self.s}")
        if self.images_per_class < 0:
            raise InvalidConfigError("images_per_class must be nonnegative")
        if self.image_size <= 0:
            raise InvalidConfigError("image_size must be positive")
        if abs(sum(self.split_fractions) - 1.0) > 1e-9 or any(
                not 0.0 < f < 1.0 for f in self.split_fractions):
            raise InvalidConfigError(
                f"split fractions must lie in (0,1) and sum to 1, got {self.split_fractions}")

    @property
    def num_classes(self) -> int:
        return self.num_shapes * (self.num_shapes + 1) // 2


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    class_index: int
    concepts: tuple[int, ...]
    split: str
    seed: int
    image_ref: str


@dataclass
class DatasetManifest:
    config: DatasetConfig
    classes: list[ClassSpec]
    prototypes: dict[int, tuple[int, ...]]
    records: list[SampleRecord] = field(default_factory=list)

    def records_by_class(self) -> dict[int, list[SampleRecord]]:
        out: dict[int, list[SampleRecord]] = {c.class_index: [] for c in self.classes}
        for rec in self.records:
            out[rec.class_index].append(rec)
        return out

    def save(self, out_dir) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        doc = {
            "config": dataclasses.asdict(self.config),
            "classes": [dataclasses.asdict(c) for c in self.classes],
            "prototypes": {str(i): list(v) for i, v in sorted(self.prototypes.items())},
        }
        (out_dir / MANIFEST_FILENAME).write_text(json.dumps(doc, indent=2) + "\n")
        k = self.config.num_concepts
        header = (["sample_id", "class_index"] + [f"c{i}" for i in range(k)]
                  + ["split", "seed", "image_ref"])
        with open(out_dir / RECORDS_FILENAME, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for rec in self.records:
                writer.writerow([rec.sample_id, rec.class_index, *rec.concepts,
                                 rec.split, rec.seed, rec.image_ref])

    @classmethod
    def load(cls, in_dir) -> "DatasetManifest":
        in_dir = Path(in_dir)
        doc = json.loads((in_dir / MANIFEST_FILENAME).read_text())
        cfg = doc["config"]
        cfg["split_fractions"] = tuple(cfg["split_fractions"])
        config = DatasetConfig(**cfg)
        classes = [ClassSpec(**c) for c in doc["classes"]]
        prototypes = {int(i): tuple(v) for i, v in doc["prototypes"].items()}
        records = []
        k = config.num_concepts
        with open(in_dir / RECORDS_FILENAME, newline="") as fh:
            for row in csv.DictReader(fh):
                records.append(SampleRecord(
                    sample_id=row["sample_id"],
                    class_index=int(row["class_index"]),
                    concepts=tuple(int(row[f"c{i}"]) for i in range(k)),
                    split=row["split"],
                    seed=int(row["seed"]),
                    image_ref=row["image_ref"],
                ))
        return cls(config=config, classes=classes, prototypes=prototypes, records=records)


def enumerate_classes(num_shapes: int) -> list[ClassSpec]:
    """All unordered pairs (with repetition) of the first ``num_shapes`` kinds."""
    if not 1 <= num_shapes <= len(SHAPE_KINDS):
        raise InvalidConfigError(
            f"num_shapes must lie in [1, {len(SHAPE_KINDS)}], got {num_shapes}")
    specs = []
    index = 0
    for a in range(num_shapes):
        for b in range(a, num_shapes):
            specs.append(ClassSpec(SHAPE_KINDS[a], SHAPE_KINDS[b], index))
            index += 1
    return specs


def assign_prototypes(num_classes: int, k: int, seed: int) -> dict[int, tuple[int, ...]]:
    """One concept prototype per class, sampled without replacement from the
    2^k bit-vectors when that many exist."""
    if num_classes < 1:
        raise InvalidConfigError("num_classes must be at least 1")
    rng = np.random.default_rng(seed)
    if 2 ** k >= num_classes:
        codes = rng.choice(2 ** k, size=num_classes, replace=False)
    else:
        codes = rng.integers(0, 2 ** k, size=num_classes)
    return {
        i: tuple((int(code) >> bit) & 1 for bit in range(k))
        for i, code in enumerate(codes)
    }


def sample_concepts(prototype: Sequence[int], s: float, rng) -> tuple[int, ...]:
    """Each bit keeps its prototype value with probability s, flips otherwise."""
    if not 0.5 <= s <= 1.0:
        raise InvalidConfigError(f"s must lie in [0.5, 1], got {s}")
    keep = rng.random(len(prototype)) < s
    return tuple(int(b) if k else 1 - int(b) for b, k in zip(prototype, keep))


def sample_seeds(master_seed: int, class_index: int, ordinal: int) -> tuple[int, int]:
    """(concept_seed, render_seed) for one sample, derived from the master seed."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(class_index, ordinal))
    state = ss.generate_state(2, dtype=np.uint64)
    return int(state[0]), int(state[1])


def _split_counts(n: int, fractions) -> tuple[int, int, int]:
    n_train = round(n * fractions[0])
    n_val = round(n * fractions[1])
    return n_train, n_val, n - n_train - n_val


def generate_dataset(config: DatasetConfig, output_dir) -> DatasetManifest:
    """Generate images and manifest under ``output_dir``.

    Byte-identical across runs with the same config. On failure a marker
    file ``_INCOMPLETE`` is left next to the partial output.
    """
    out_dir = Path(output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    marker = out_dir / INCOMPLETE_MARKER
    marker.write_text("generation in progress\n")

    classes = enumerate_classes(config.num_shapes)
    prototypes = assign_prototypes(len(classes), config.num_concepts, config.master_seed)
    manifest = DatasetManifest(config=config, classes=classes, prototypes=prototypes)

    n_train, n_val, _ = _split_counts(config.images_per_class, config.split_fractions)
    image_dir = out_dir / IMAGES_DIRNAME
    if config.images_per_class > 0:
        image_dir.mkdir(exist_ok=True)
    try:
        for spec in classes:
            proto = prototypes[spec.class_index]
            for ordinal in range(config.images_per_class):
                concept_seed, render_seed = sample_seeds(
                    config.master_seed, spec.class_index, ordinal)
                concepts = sample_concepts(
                    proto, config.s, np.random.default_rng(concept_seed))
                image = render_image(spec, concepts, render_seed, config.image_size)
                name = f"{spec.class_index}_{ordinal}.png"
                image.save(image_dir / name)
                split = ("train" if ordinal < n_train
                         else "val" if ordinal < n_train + n_val else "test")
                manifest.records.append(SampleRecord(
                    sample_id=f"{spec.class_index}_{ordinal}",
                    class_index=spec.class_index,
                    concepts=concepts,
                    split=split,
                    seed=render_seed,
                    image_ref=f"{IMAGES_DIRNAME}/{name}",
                ))
        manifest.save(out_dir)
    except Exception:
        marker.write_text("generation aborted; output is partial\n")
        raise
    marker.unlink()
    return manifest


def subset_manifest(manifest: DatasetManifest, per_class_n: int, seed: int) -> DatasetManifest:
    """Select ``per_class_n`` train+val records per class, test split untouched.

    Selection takes a prefix of one seeded per-class permutation, so
    smaller subsets are contained in larger ones for the same seed. The
    train:val ratio of the original split fractions is preserved within
    the selection (split tags are reassigned along the prefix).
    """
    fractions = manifest.config.split_fractions
    train_share = fractions[0] / (fractions[0] + fractions[1])
    n_train = round(per_class_n * train_share)

    new_records: list[SampleRecord] = []
    for class_index, recs in sorted(manifest.records_by_class().items()):
        pool = [r for r in recs if r.split in ("train", "val")]
        if per_class_n > len(pool):
            raise InvalidConfigError(
                f"per_class_n={per_class_n} exceeds the {len(pool)} train+val "
                f"records of class {class_index}")
        rng = np.random.default_rng(
            np.random.SeedSequence(seed, spawn_key=(class_index,)))
        order = rng.permutation(len(pool))
        for pos, idx in enumerate(order[:per_class_n]):
            split = "train" if pos < n_train else "val"
            new_records.append(dataclasses.replace(pool[idx], split=split))
        new_records.extend(r for r in recs if r.split == "test")

    return DatasetManifest(
        config=manifest.config,
        classes=manifest.classes,
        prototypes=manifest.prototypes,
        records=new_records,
    )
