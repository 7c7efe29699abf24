import hashlib
from collections import Counter
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conceptshapes import datagen, rendering
from conceptshapes.datagen import (
    DatasetConfig,
    DatasetManifest,
    assign_prototypes,
    enumerate_classes,
    generate_dataset,
    sample_concepts,
    sample_seeds,
    subset_manifest,
)
from conceptshapes.errors import InvalidConfigError, PlacementError


class TestEnumerateClasses:
    def test_four_shapes_give_ten_classes(self):
        assert len(enumerate_classes(4)) == 10

    def test_six_shapes_give_21_classes(self):
        assert len(enumerate_classes(6)) == 21

    def test_single_shape_gives_one_class(self):
        (spec,) = enumerate_classes(1)
        assert spec.shape_a == spec.shape_b

    @given(st.integers(min_value=1, max_value=6))
    def test_triangular_count(self, n):
        assert len(enumerate_classes(n)) == n * (n + 1) // 2

    @given(st.integers(min_value=1, max_value=6))
    def test_canonical_order_and_dense_indices(self, n):
        specs = enumerate_classes(n)
        assert [s.class_index for s in specs] == list(range(len(specs)))
        order = datagen.SHAPE_KINDS
        for s in specs:
            assert order.index(s.shape_a) <= order.index(s.shape_b)
        assert len({(s.shape_a, s.shape_b) for s in specs}) == len(specs)

    @pytest.mark.parametrize("n", [0, 7, -1])
    def test_out_of_range(self, n):
        with pytest.raises(InvalidConfigError):
            enumerate_classes(n)


class TestAssignPrototypes:
    def test_21_classes_9_concepts_distinct(self):
        protos = assign_prototypes(21, 9, seed=7)
        assert len(set(protos.values())) == 21
        assert all(len(v) == 9 for v in protos.values())

    def test_10_classes_5_concepts_distinct(self):
        protos = assign_prototypes(10, 5, seed=7)
        assert len(set(protos.values())) == 10

    def test_deterministic(self):
        assert assign_prototypes(15, 9, seed=3) == assign_prototypes(15, 9, seed=3)

    def test_seed_changes_assignment(self):
        assert assign_prototypes(15, 9, seed=3) != assign_prototypes(15, 9, seed=4)


class TestSampleConcepts:
    def test_s_one_returns_prototype(self, rng):
        proto = (1, 0, 1, 1, 0, 0, 1, 0, 1)
        for _ in range(20):
            assert sample_concepts(proto, 1.0, rng) == proto

    def test_flip_frequency_at_s_098(self, rng):
        # Monte Carlo oracle: flip frequency should sit near 1 - s.
        proto = (1, 0, 1, 0, 1)
        draws = np.array([sample_concepts(proto, 0.98, rng) for _ in range(10_000)])
        flip_freq = (draws != np.array(proto)).mean(axis=0)
        assert np.all(np.abs(flip_freq - 0.02) < 0.005)

    def test_s_half_is_fair_coin(self, rng):
        proto = (1, 1, 1, 1, 1)
        draws = np.array([sample_concepts(proto, 0.5, rng) for _ in range(10_000)])
        assert np.all(np.abs(draws.mean(axis=0) - 0.5) < 0.02)

    def test_invalid_s(self, rng):
        with pytest.raises(InvalidConfigError):
            sample_concepts((1, 0), 0.4, rng)


class TestRenderImage:
    SPEC = datagen.enumerate_classes(4)[3]

    def render(self, concepts, seed=99, size=64):
        return np.asarray(rendering.render_image(self.SPEC, concepts, seed, size))

    def test_deterministic(self):
        concepts = (1, 0, 1, 0, 0, 1, 0, 1, 0)
        assert np.array_equal(self.render(concepts), self.render(concepts))

    def test_blue_vs_yellow_facecolor(self):
        # Stripes off so interior pixels are pure facecolor.
        blue = self.render((0, 0, 1, 0, 0))
        yellow = self.render((0, 0, 0, 0, 0))
        assert (blue == rendering.BLUE).all(axis=-1).any()
        assert not (blue == rendering.YELLOW).all(axis=-1).any()
        assert (yellow == rendering.YELLOW).all(axis=-1).any()

    def test_five_concept_background_is_black(self):
        img = self.render((0, 0, 1, 1, 1))
        allowed = {rendering.BLACK, rendering.BLUE, rendering.RED}
        colors = {tuple(c) for c in img.reshape(-1, 3)}
        assert colors <= allowed
        # corners stay background (shapes are placed fully inside)
        assert tuple(img[0, 0]) == rendering.BLACK

    def test_background_half_colors(self):
        img = self.render((0, 0, 1, 1, 0, 1, 1, 0, 0))
        assert (img[:32] == rendering.MAGENTA).all(axis=-1).any()
        assert (img[32:] == rendering.INDIGO).all(axis=-1).any()
        img2 = self.render((0, 0, 1, 1, 0, 0, 0, 0, 0))
        assert (img2[:32] == rendering.PALE_GREEN).all(axis=-1).any()
        assert (img2[32:] == rendering.DARK_SEA_GREEN).all(axis=-1).any()

    def test_background_stripes(self):
        striped = self.render((0, 0, 1, 1, 0, 1, 1, 1, 1))
        plain = self.render((0, 0, 1, 1, 0, 1, 1, 0, 0))
        assert (striped[:32] == rendering.BLACK).all(axis=-1).any()
        assert not (plain[:32] == rendering.BLACK).all(axis=-1).any()

    def test_outline_color(self):
        red = self.render((0, 0, 1, 1, 0))
        white = self.render((0, 0, 1, 0, 0))
        assert (red == rendering.RED).all(axis=-1).any()
        assert (white == rendering.WHITE).all(axis=-1).any()

    def test_big_shapes_cover_more(self):
        small = self.render((0, 0, 1, 0, 0), seed=5)
        big = self.render((1, 0, 1, 0, 0), seed=5)
        assert (big != 0).any(axis=-1).sum() > (small != 0).any(axis=-1).sum()

    def test_placement_error(self, monkeypatch):
        monkeypatch.setattr(rendering, "BIG_SPAN", (1.5, 1.6))
        with pytest.raises(PlacementError):
            self.render((1, 0, 1, 0, 0))


class TestDatasetConfig:
    def test_num_classes(self):
        assert DatasetConfig(4, 9, 0.98, 10).num_classes == 10
        assert DatasetConfig(5, 9, 0.98, 10).num_classes == 15
        assert DatasetConfig(6, 9, 0.98, 10).num_classes == 21

    @pytest.mark.parametrize("kwargs", [
        dict(num_shapes=3),
        dict(num_concepts=7),
        dict(s=0.4),
        dict(s=1.1),
        dict(images_per_class=-1),
        dict(split_fractions=(0.5, 0.5, 0.0)),
        dict(split_fractions=(0.6, 0.3, 0.2)),
    ])
    def test_invalid_configs(self, kwargs):
        base = dict(num_shapes=4, num_concepts=9, s=0.98, images_per_class=10)
        with pytest.raises(InvalidConfigError):
            DatasetConfig(**{**base, **kwargs})


class TestGenerateDataset:
    def test_counts_and_splits(self, small_dataset):
        _, manifest = small_dataset
        assert len(manifest.records) == 200
        per_class = Counter(r.class_index for r in manifest.records)
        assert all(v == 20 for v in per_class.values())
        splits = Counter(r.split for r in manifest.records)
        assert splits == {"train": 100, "val": 60, "test": 40}

    def test_images_exist_and_named(self, small_dataset):
        root, manifest = small_dataset
        for rec in manifest.records[:5]:
            assert (root / rec.image_ref).exists()
            assert rec.image_ref == f"images/{rec.sample_id}.png"

    def test_no_incomplete_marker(self, small_dataset):
        root, _ = small_dataset
        assert not (root / datagen.INCOMPLETE_MARKER).exists()

    def test_empty_dataset(self, tmp_path):
        config = DatasetConfig(4, 5, 0.98, 0, master_seed=1)
        manifest = generate_dataset(config, tmp_path)
        assert manifest.records == []
        assert not (tmp_path / "images").exists()
        assert DatasetManifest.load(tmp_path).records == []

    def test_byte_identical_reruns(self, tmp_path):
        config = DatasetConfig(4, 9, 0.9, 3, master_seed=77)
        generate_dataset(config, tmp_path / "a")
        generate_dataset(config, tmp_path / "b")
        assert _tree_hash(tmp_path / "a") == _tree_hash(tmp_path / "b")

    def test_rerender_from_record_seed(self, small_dataset):
        root, manifest = small_dataset
        by_index = {c.class_index: c for c in manifest.classes}
        for rec in manifest.records[::37]:
            from PIL import Image

            stored = np.asarray(Image.open(root / rec.image_ref).convert("RGB"))
            again = np.asarray(rendering.render_image(
                by_index[rec.class_index], rec.concepts, rec.seed,
                manifest.config.image_size))
            assert np.array_equal(stored, again)

    def test_manifest_roundtrip(self, small_dataset):
        root, manifest = small_dataset
        loaded = DatasetManifest.load(root)
        assert loaded.config == manifest.config
        assert loaded.prototypes == manifest.prototypes
        assert loaded.records == manifest.records

    def test_sample_seeds_deterministic(self):
        assert sample_seeds(1, 2, 3) == sample_seeds(1, 2, 3)
        assert sample_seeds(1, 2, 3) != sample_seeds(1, 2, 4)


class TestSubsetManifest:
    def test_sizes_and_untouched_test_split(self, small_dataset):
        _, manifest = small_dataset
        sub = subset_manifest(manifest, 10, seed=5)
        splits = Counter(r.split for r in sub.records)
        assert splits["train"] + splits["val"] == 100
        test_ids = {r.sample_id for r in sub.records if r.split == "test"}
        assert test_ids == {r.sample_id for r in manifest.records if r.split == "test"}

    def test_train_val_ratio_preserved(self, small_dataset):
        _, manifest = small_dataset
        sub = subset_manifest(manifest, 8, seed=5)
        per_class = sub.records_by_class()
        for recs in per_class.values():
            splits = Counter(r.split for r in recs)
            assert splits["train"] == 5 and splits["val"] == 3  # 5:3 = 0.5:0.3

    def test_full_size_is_identity_on_train_val(self, small_dataset):
        _, manifest = small_dataset
        sub = subset_manifest(manifest, 16, seed=5)
        assert ({r.sample_id for r in sub.records}
                == {r.sample_id for r in manifest.records})

    def test_nested_subsets(self, small_dataset):
        _, manifest = small_dataset
        small = {r.sample_id for r in subset_manifest(manifest, 5, seed=9).records
                 if r.split != "test"}
        large = {r.sample_id for r in subset_manifest(manifest, 12, seed=9).records
                 if r.split != "test"}
        assert small <= large

    def test_too_large_errors(self, small_dataset):
        _, manifest = small_dataset
        with pytest.raises(InvalidConfigError):
            subset_manifest(manifest, 17, seed=0)

    def test_deterministic(self, small_dataset):
        _, manifest = small_dataset
        a = subset_manifest(manifest, 10, seed=1)
        b = subset_manifest(manifest, 10, seed=1)
        assert a.records == b.records


def _tree_hash(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(path.relative_to(root).as_posix().encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()
