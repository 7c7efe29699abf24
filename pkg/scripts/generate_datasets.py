"""Generate the standard dataset variants used throughout the experiments.

Produces one directory per (classes, concepts) pair under --out, each with
1000 images per class at the default concept probability s=0.98, plus a
chance-level control at s=0.5 for the 10-class, 9-concept setting.
"""

import argparse
import time
from pathlib import Path

from conceptshapes.datagen import DatasetConfig, generate_dataset

VARIANTS = [
    # (num_shapes, num_concepts, s, directory name)
    (4, 5, 0.98, "c10_k5"),
    (4, 9, 0.98, "c10_k9"),
    (5, 9, 0.98, "c15_k9"),
    (6, 9, 0.98, "c21_k9"),
    (4, 9, 0.50, "c10_k9_s50"),
]


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", required=True)
    parser.add_argument("--per-class", type=int, default=1000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    root = Path(args.out)
    for shapes, concepts, s, name in VARIANTS:
        config = DatasetConfig(num_shapes=shapes, num_concepts=concepts, s=s,
                               images_per_class=args.per_class,
                               master_seed=args.seed)
        start = time.monotonic()
        manifest = generate_dataset(config, root / name)
        print(f"{name}: {len(manifest.records)} samples "
              f"in {time.monotonic() - start:.1f}s")


if __name__ == "__main__":
    main()
