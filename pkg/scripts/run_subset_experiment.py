"""Accuracy and MPO versus training-set size, all model variants.

For each subset size the script grid-searches hyperparameters on the
validation split, retrains the winning cell over several seeds and writes
results.csv / summary.csv plus plot-ready exports.
"""

import argparse

from conceptshapes.cli import export_plot_data
from conceptshapes.datagen import DatasetManifest
from conceptshapes.models import VARIANTS
from conceptshapes.training import TrainConfig, subset_experiment


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dataset", required=True)
    parser.add_argument("--out", required=True)
    parser.add_argument("--sizes", default="50,100,150,200,250")
    parser.add_argument("--variants", default=",".join(VARIANTS))
    parser.add_argument("--seeds", default=",".join(map(str, range(10))))
    parser.add_argument("--epochs", type=int, default=50)
    parser.add_argument("--bottleneck", choices=("soft", "hard"), default="soft")
    args = parser.parse_args()

    manifest = DatasetManifest.load(args.dataset)
    subset_experiment(
        manifest, args.dataset,
        sizes=[int(x) for x in args.sizes.split(",")],
        variants=args.variants.split(","),
        seeds=[int(x) for x in args.seeds.split(",")],
        base=TrainConfig(epochs=args.epochs, bottleneck=args.bottleneck),
        out_dir=args.out)
    export_plot_data(args.out, args.out)
    print(f"wrote results to {args.out}")


if __name__ == "__main__":
    main()
