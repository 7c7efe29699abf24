import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptshapes import models, training
from conceptshapes.errors import InvalidConfigError, ShapeMismatchError
from conceptshapes.training import (
    DatasetArrays,
    TrainConfig,
    aggregate_ci,
    build_and_train,
    denormalize,
    evaluate_accuracy,
    hyperparameter_grid,
    joint_loss,
    mpo,
    mpo_curve,
    normalize,
    random_crop,
    subset_experiment,
    train,
)


@pytest.fixture(scope="module")
def arrays(small_dataset):
    root, manifest = small_dataset
    return DatasetArrays.load(manifest, root)


@pytest.fixture(scope="module")
def bundle(small_dataset, arrays):
    _, manifest = small_dataset
    return arrays.split_bundle(manifest)


class TestSchedules:
    def test_concept_weight_decay(self):
        cfg = TrainConfig(concept_weight=100.0, concept_weight_decay=0.9)
        assert cfg.concept_weight_at(0) == 100.0
        assert cfg.concept_weight_at(2) == pytest.approx(81.0)

    def test_learning_rate_steps_every_five_epochs(self):
        cfg = TrainConfig(learning_rate=0.01, lr_decay=0.7)
        assert cfg.learning_rate_at(0) == 0.01
        assert cfg.learning_rate_at(4) == 0.01
        assert cfg.learning_rate_at(5) == pytest.approx(0.007)
        assert cfg.learning_rate_at(10) == pytest.approx(0.0049)

    def test_no_decay_is_constant(self):
        cfg = TrainConfig(learning_rate=0.01, lr_decay=1.0, concept_weight_decay=1.0)
        assert cfg.learning_rate_at(40) == 0.01
        assert cfg.concept_weight_at(40) == cfg.concept_weight

    @pytest.mark.parametrize("kwargs", [
        dict(concept_weight=-1.0),
        dict(concept_weight_decay=0.0),
        dict(concept_weight_decay=1.5),
        dict(lr_decay=0.0),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidConfigError):
            TrainConfig(**kwargs)


class TestJointLoss:
    def test_reduces_to_ce_without_concepts(self):
        logits = torch.zeros(1, 10)
        y = torch.tensor([3])
        loss = joint_loss(logits, None, y, None, 10.0)
        assert float(loss) == pytest.approx(math.log(10), rel=1e-6)

    def test_weighted_sum(self):
        class_logits = torch.zeros(1, 10)
        concept_logits = torch.zeros(1, 5)
        y = torch.tensor([0])
        c = torch.zeros(1, 5)
        loss = joint_loss(class_logits, concept_logits, y, c, 7.0)
        assert float(loss) == pytest.approx(math.log(10) + 7.0 * math.log(2), rel=1e-6)

    def test_zero_weight_drops_concept_term(self):
        class_logits = torch.zeros(1, 10)
        concept_logits = torch.randn(1, 5)
        loss = joint_loss(class_logits, concept_logits, torch.tensor([0]),
                          torch.zeros(1, 5), 0.0)
        assert float(loss) == pytest.approx(math.log(10), rel=1e-6)


class TestPixelPipeline:
    def test_normalize_range(self):
        x = torch.tensor([0.0, 0.5, 1.0])
        assert normalize(x).tolist() == [-0.25, 0.0, 0.25]

    def test_denormalize_inverts(self):
        x = torch.rand(3, 8, 8)
        assert torch.allclose(denormalize(normalize(x)), x, atol=1e-7)

    def test_random_crop_shape_and_zero_padding(self):
        gen = torch.Generator().manual_seed(0)
        x = torch.ones(6, 3, 16, 16)
        out = random_crop(x, gen)
        assert out.shape == x.shape
        # content is either original (ones) or padding (zeros)
        assert set(out.unique().tolist()) <= {0.0, 1.0}

    def test_random_crop_deterministic_given_generator(self):
        x = torch.rand(4, 3, 16, 16)
        a = random_crop(x, torch.Generator().manual_seed(3))
        b = random_crop(x, torch.Generator().manual_seed(3))
        assert torch.equal(a, b)


class TestMPO:
    def test_hand_example(self):
        pred = torch.tensor([[0, 0, 0], [0, 0, 1], [0, 1, 1], [1, 1, 0]])
        true = torch.tensor([[0, 0, 0], [0, 0, 0], [0, 0, 0], [0, 0, 1]])
        # mistakes per row: 0, 1, 2, 3
        assert mpo(pred, true, 1) == 0.75
        assert mpo(pred, true, 2) == 0.5
        assert mpo(pred, true, 3) == 0.25

    def test_m_zero_is_one(self):
        pred = torch.zeros(5, 4, dtype=torch.int64)
        assert mpo(pred, pred, 0) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            mpo(torch.zeros(2, 3), torch.zeros(2, 4), 1)

    def test_curve_length_and_values(self):
        pred = torch.tensor([[1, 1, 1], [0, 0, 0]])
        true = torch.tensor([[0, 0, 0], [0, 0, 0]])
        assert mpo_curve(pred, true) == [0.5, 0.5, 0.5]

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_monotone_nonincreasing_in_m(self, seed):
        gen = torch.Generator().manual_seed(seed)
        pred = torch.randint(0, 2, (10, 6), generator=gen)
        true = torch.randint(0, 2, (10, 6), generator=gen)
        curve = mpo_curve(pred, true)
        assert all(a >= b for a, b in zip(curve, curve[1:]))
        assert all(0.0 <= v <= 1.0 for v in curve)


class TestAggregateCI:
    def test_two_values(self):
        # sd = 0.1414..., t_{0.975, df=1} = 12.706
        ci = aggregate_ci([0.5, 0.7])
        assert ci.mean == pytest.approx(0.6)
        expected = 12.7062 * np.std([0.5, 0.7], ddof=1) / np.sqrt(2)
        assert ci.half_width == pytest.approx(expected, rel=1e-4)

    def test_identical_values_zero_width(self):
        ci = aggregate_ci([0.8, 0.8, 0.8])
        assert ci.mean == pytest.approx(0.8)
        assert ci.half_width == pytest.approx(0.0, abs=1e-12)

    def test_needs_two(self):
        with pytest.raises(InvalidConfigError):
            aggregate_ci([0.5])


class TestGrids:
    def test_standard_grid_is_48_cells(self):
        grid = hyperparameter_grid("standard")
        assert len(grid) == 48
        assert {frozenset(c.items()) for c in grid} == {
            frozenset({("learning_rate", lr), ("dropout", d), ("lr_decay", dec)})
            for lr in (0.05, 0.01, 0.005, 0.001)
            for d in (0.0, 0.2, 0.4)
            for dec in (0.1, 0.5, 0.7, 1.0)}

    @pytest.mark.parametrize("variant", models.CONCEPT_VARIANTS)
    def test_concept_grid_is_48_cells(self, variant):
        grid = hyperparameter_grid(variant)
        assert len(grid) == 48
        assert all(c["lr_decay"] == 0.7 for c in grid)
        tuples = {(c["concept_weight"], c["concept_weight_decay"]) for c in grid}
        assert tuples == {(100.0, 0.8), (100.0, 0.9), (5.0, 1.0), (10.0, 1.0)}

    def test_oracle_grid(self):
        assert hyperparameter_grid("oracle") == [{"learning_rate": 0.01}]


class TestDatasetArrays:
    def test_shapes_and_range(self, small_dataset, arrays):
        _, manifest = small_dataset
        assert arrays.images.shape == (200, 3, 64, 64)
        assert float(arrays.images.min()) >= 0.0
        assert float(arrays.images.max()) <= 1.0
        assert arrays.labels.shape == (200,)
        assert arrays.concepts.shape == (200, 9)

    def test_bundle_splits(self, bundle):
        assert len(bundle["train"][1]) == 100
        assert len(bundle["val"][1]) == 60
        assert len(bundle["test"][1]) == 40


def quick_config(**overrides):
    base = dict(learning_rate=0.01, epochs=3, batch_size=32, seed=0,
                concept_weight=10.0)
    return TrainConfig(**{**base, **overrides})


class TestTrain:
    def test_zero_epochs_keeps_initial_weights(self, small_dataset, bundle):
        _, manifest = small_dataset
        model, result = build_and_train("vanilla_cbm", bundle, manifest.config,
                                        quick_config(epochs=0))
        fresh = models.build(model.config, seed=0)
        for pa, pb in zip(model.parameters(), fresh.parameters()):
            assert torch.equal(pa, pb)
        assert result.best_epoch == -1
        # untrained 10-class model sits near chance
        assert result.test_accuracy <= 0.4

    def test_deterministic(self, small_dataset, bundle):
        _, manifest = small_dataset
        _, r1 = build_and_train("vanilla_cbm", bundle, manifest.config, quick_config())
        _, r2 = build_and_train("vanilla_cbm", bundle, manifest.config, quick_config())
        assert r1.train_losses == r2.train_losses
        assert r1.val_accuracies == r2.val_accuracies
        assert r1.test_accuracy == r2.test_accuracy

    def test_best_epoch_is_earliest_val_argmax(self, small_dataset, bundle):
        _, manifest = small_dataset
        _, result = build_and_train("standard", bundle, manifest.config,
                                    quick_config(epochs=4))
        accs = result.val_accuracies
        assert result.best_epoch == accs.index(max(accs))

    def test_oracle_trains_fast(self, small_dataset, bundle):
        _, manifest = small_dataset
        _, result = build_and_train("oracle", bundle, manifest.config,
                                    quick_config(epochs=30))
        assert result.test_accuracy > 0.8
        assert result.mpo_curve is None

    def test_concept_model_reports_mpo_curve(self, small_dataset, bundle):
        _, manifest = small_dataset
        _, result = build_and_train("scm", bundle, manifest.config, quick_config())
        assert len(result.mpo_curve) == 9
        assert all(a >= b for a, b in zip(result.mpo_curve, result.mpo_curve[1:]))

    def test_loss_decreases(self, small_dataset, bundle):
        _, manifest = small_dataset
        _, result = build_and_train("vanilla_cbm", bundle, manifest.config,
                                    quick_config(epochs=5))
        assert result.train_losses[-1] < result.train_losses[0]


class TestSubsetExperiment:
    def test_smoke_writes_csvs(self, small_dataset, tmp_path):
        root, manifest = small_dataset
        grids = {v: [{"learning_rate": 0.01}] for v in ("standard", "vanilla_cbm")}
        results, summaries = subset_experiment(
            manifest, root, sizes=[5], variants=["standard", "vanilla_cbm"],
            seeds=[0, 1], base=quick_config(epochs=2), grids=grids,
            out_dir=tmp_path)
        assert len(results) == 4  # 2 variants x 2 seeds
        assert len(summaries) == 2
        for s in summaries:
            assert 0.0 <= s["mean_test_accuracy"] <= 1.0
            assert s["n_seeds"] == 2
        assert (tmp_path / "results.csv").exists()
        assert (tmp_path / "summary.csv").exists()
        import csv

        with open(tmp_path / "results.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 4
        assert {r["variant"] for r in rows} == {"standard", "vanilla_cbm"}
        assert all(r["mpo_1"] == "" for r in rows if r["variant"] == "standard")
