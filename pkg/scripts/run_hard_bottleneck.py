"""Soft versus hard bottleneck accuracy comparison over seeds.

Trains each concept-based variant with both bottleneck modes and reports
the per-variant accuracy drop (soft mean minus hard mean) with Student-t
confidence half-widths.
"""

import argparse

from conceptshapes.datagen import DatasetManifest, subset_manifest
from conceptshapes.models import CONCEPT_VARIANTS
from conceptshapes.training import (
    DatasetArrays,
    TrainConfig,
    aggregate_ci,
    build_and_train,
)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dataset", required=True)
    parser.add_argument("--subset", type=int, default=0,
                        help="train+val images per class (0 = all)")
    parser.add_argument("--seeds", default="0,1,2,3,4")
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--lr", type=float, default=0.005)
    args = parser.parse_args()

    manifest = DatasetManifest.load(args.dataset)
    arrays = DatasetArrays.load(manifest, args.dataset)
    if args.subset:
        manifest = subset_manifest(manifest, args.subset, 0)
    bundle = arrays.split_bundle(manifest)
    seeds = [int(x) for x in args.seeds.split(",")]

    for variant in CONCEPT_VARIANTS:
        accs = {}
        for mode in ("soft", "hard"):
            cfg = dict(learning_rate=args.lr, lr_decay=0.7, concept_weight=10.0,
                       epochs=args.epochs, bottleneck=mode)
            accs[mode] = [
                build_and_train(variant, bundle, manifest.config,
                                TrainConfig(seed=s, **cfg))[1].test_accuracy
                for s in seeds]
        soft, hard = aggregate_ci(accs["soft"]), aggregate_ci(accs["hard"])
        print(f"{variant}: soft {soft.mean:.3f} +- {soft.half_width:.3f}, "
              f"hard {hard.mean:.3f} +- {hard.half_width:.3f}, "
              f"drop {soft.mean - hard.mean:.3f}")


if __name__ == "__main__":
    main()
