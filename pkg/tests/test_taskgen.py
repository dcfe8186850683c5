"""Synthetic data generator: determinism, variation knob behavior, split
arithmetic, episode invariants, and the on-disk record format."""

import numpy as np
import pytest

from cwtseg.errors import ConfigError, EpisodeExhaustedError
from cwtseg.taskgen import (
    ARCHETYPE_BANKS,
    TEXTURE_BANKS,
    Dataset,
    DatasetSpec,
    EpisodeTask,
    SplitSpec,
    VariationKnobs,
    binarize_mask,
    export_dataset,
    generate_dataset,
    load_dataset,
    sample_episode,
    split_classes,
)
from cwtseg.tensor import make_rng


def small_spec(**overrides):
    defaults = dict(domain="shapesA", num_classes=4, images_per_class=8,
                    image_size=32, seed=11)
    defaults.update(overrides)
    return DatasetSpec(**defaults)


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    if len(a) != len(b):
        return False
    return all(np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask)
               and x.class_set == y.class_set
               for x, y in zip(a.samples, b.samples))


class TestGenerate:
    def test_same_spec_bit_identical(self):
        spec = small_spec(variation=VariationKnobs(color_jitter=0.1, occlusion_prob=0.5))
        assert datasets_equal(generate_dataset(spec), generate_dataset(spec))

    def test_different_seed_differs(self):
        a = generate_dataset(small_spec(seed=1))
        b = generate_dataset(small_spec(seed=2))
        assert not datasets_equal(a, b)

    def test_degenerate_variation_is_pixel_identical(self):
        knobs = VariationKnobs(scale_range=(0.4, 0.4), position_jitter=0.0,
                               rotation_range=0.0, color_jitter=0.0, occlusion_prob=0.0)
        ds = generate_dataset(small_spec(variation=knobs, images_per_class=5))
        for c in ds.class_ids:
            picks = [ds.samples[i] for i in ds.by_class[c]]
            # masks are identical; images differ only in background noise
            # and clutter, so compare the foreground pixels
            first = picks[0]
            for other in picks[1:]:
                assert np.array_equal(first.mask, other.mask)
                fg = first.mask > 0
                assert np.array_equal(first.image[:, fg], other.image[:, fg])

    def test_sample_inventory(self):
        ds = generate_dataset(small_spec(num_classes=3, images_per_class=7))
        assert len(ds) == 21
        assert ds.class_ids == (1, 2, 3)
        for c in ds.class_ids:
            assert len(ds.by_class[c]) == 7

    def test_every_sample_has_foreground(self):
        knobs = VariationKnobs(scale_range=(0.15, 0.3), position_jitter=0.6,
                               occlusion_prob=0.9)
        ds = generate_dataset(small_spec(num_classes=6, images_per_class=20,
                                         variation=knobs))
        for s in ds.samples:
            assert (s.mask > 0).any()
            assert s.class_set == frozenset({min(s.class_set)})

    def test_values_in_unit_range(self):
        ds = generate_dataset(small_spec())
        for s in ds.samples:
            assert s.image.dtype == np.float32
            assert s.image.min() >= 0.0 and s.image.max() <= 1.0
            assert s.image.shape == (3, 32, 32)
            assert s.mask.shape == (32, 32)

    def test_scale_range_spans_3x_area_ratio(self):
        knobs = VariationKnobs(scale_range=(0.2, 0.8), position_jitter=0.0,
                               rotation_range=0.0)
        ds = generate_dataset(small_spec(num_classes=1, images_per_class=100,
                                         variation=knobs))
        areas = np.array([(s.mask > 0).sum() for s in ds.samples])
        assert areas.max() >= 3 * areas.min()

    def test_invalid_specs_rejected(self):
        with pytest.raises(ConfigError):
            generate_dataset(small_spec(num_classes=0))
        with pytest.raises(ConfigError):
            generate_dataset(small_spec(images_per_class=0))
        with pytest.raises(ConfigError):
            generate_dataset(small_spec(image_size=4))
        with pytest.raises(ConfigError):
            generate_dataset(small_spec(domain="shapesC"))
        with pytest.raises(ConfigError):
            small_spec(variation=VariationKnobs(scale_range=(0.5, 0.2))).validate()
        with pytest.raises(ConfigError):
            small_spec(variation=VariationKnobs(occlusion_prob=1.5)).validate()

    def test_archetype_banks_disjoint(self):
        assert not set(ARCHETYPE_BANKS["shapesA"]) & set(ARCHETYPE_BANKS["shapesB"])
        assert not set(TEXTURE_BANKS["shapesA"]) & set(TEXTURE_BANKS["shapesB"])

    def test_domains_render_differently(self):
        a = generate_dataset(small_spec(domain="shapesA"))
        b = generate_dataset(small_spec(domain="shapesB"))
        assert not datasets_equal(a, b)

    def test_recipes_unique_within_domain(self):
        spec = small_spec(num_classes=12)
        recipes = [spec.class_recipe(c) for c in range(1, 13)]
        assert len(set(recipes)) == 12


class TestKnobVariance:
    """Widening a knob increases the variance of the property it controls."""

    N = 200

    def gen(self, knobs, num_classes=1, seed=5):
        return generate_dataset(DatasetSpec(num_classes=num_classes,
                                            images_per_class=self.N,
                                            image_size=32, variation=knobs,
                                            seed=seed))

    def test_scale_increases_area_variance(self):
        narrow = self.gen(VariationKnobs(scale_range=(0.39, 0.41), position_jitter=0.0,
                                         rotation_range=0.0))
        wide = self.gen(VariationKnobs(scale_range=(0.2, 0.6), position_jitter=0.0,
                                       rotation_range=0.0))
        area = lambda ds: np.var([(s.mask > 0).sum() for s in ds.samples])
        assert area(wide) > area(narrow)

    def test_position_increases_centroid_variance(self):
        still = self.gen(VariationKnobs(position_jitter=0.0, rotation_range=0.0))
        moving = self.gen(VariationKnobs(position_jitter=0.5, rotation_range=0.0))

        def centroid_var(ds):
            cents = [np.argwhere(s.mask > 0).mean(axis=0) for s in ds.samples]
            return np.var(np.array(cents), axis=0).sum()
        assert centroid_var(moving) > centroid_var(still)

    def test_rotation_increases_orientation_variance(self):
        # class 6 in shapesA is the elongated bar, where orientation shows
        fixed = self.gen(VariationKnobs(rotation_range=0.0, position_jitter=0.0),
                         num_classes=6)
        turned = self.gen(VariationKnobs(rotation_range=0.5, position_jitter=0.0),
                          num_classes=6)

        def angle_var(ds):
            angles = []
            for i in ds.by_class[6]:
                pts = np.argwhere(ds.samples[i].mask > 0).astype(float)
                pts -= pts.mean(axis=0)
                cov = pts.T @ pts
                angles.append(0.5 * np.arctan2(2 * cov[0, 1], cov[0, 0] - cov[1, 1]))
            return np.var(angles)
        assert angle_var(turned) > angle_var(fixed)

    def test_color_jitter_increases_foreground_color_variance(self):
        flat = self.gen(VariationKnobs(color_jitter=0.0, rotation_range=0.0,
                                       position_jitter=0.0))
        shifted = self.gen(VariationKnobs(color_jitter=0.15, rotation_range=0.0,
                                          position_jitter=0.0))

        def color_var(ds):
            means = [s.image[:, s.mask > 0].mean(axis=1) for s in ds.samples]
            return np.var(np.array(means), axis=0).sum()
        assert color_var(shifted) > color_var(flat)

    def test_occlusion_increases_area_variance(self):
        clear = self.gen(VariationKnobs(scale_range=(0.45, 0.45), position_jitter=0.0,
                                        rotation_range=0.0, occlusion_prob=0.0))
        blocked = self.gen(VariationKnobs(scale_range=(0.45, 0.45), position_jitter=0.0,
                                          rotation_range=0.0, occlusion_prob=0.6))
        area = lambda ds: np.var([(s.mask > 0).sum() for s in ds.samples])
        assert area(blocked) > area(clear)


class TestSplit:
    def test_modular_assignment_example(self):
        ds = generate_dataset(small_spec(num_classes=8, images_per_class=2))
        base, novel = split_classes(ds, SplitSpec(split_index=0, num_splits=4))
        assert novel.class_ids == (1, 5)
        assert base.class_ids == (2, 3, 4, 6, 7, 8)

    def test_partition_covers_all_classes(self):
        ds = generate_dataset(small_spec(num_classes=8, images_per_class=2))
        for i in range(4):
            base, novel = split_classes(ds, SplitSpec(split_index=i, num_splits=4))
            assert set(base.class_ids) | set(novel.class_ids) == set(ds.class_ids)
            assert not set(base.class_ids) & set(novel.class_ids)

    def test_each_class_novel_exactly_once(self):
        ds = generate_dataset(small_spec(num_classes=8, images_per_class=2))
        tally = {c: 0 for c in ds.class_ids}
        for i in range(4):
            _, novel = split_classes(ds, SplitSpec(split_index=i, num_splits=4))
            for c in novel.class_ids:
                tally[c] += 1
        assert all(n == 1 for n in tally.values())

    def test_subsets_filter_samples(self):
        ds = generate_dataset(small_spec(num_classes=8, images_per_class=3))
        base, novel = split_classes(ds, SplitSpec(split_index=1, num_splits=4))
        for s in base.samples:
            assert s.class_set & set(base.class_ids)
        for s in novel.samples:
            assert s.class_set & set(novel.class_ids)
        assert len(base) + len(novel) == len(ds)

    def test_too_few_classes_rejected(self):
        ds = generate_dataset(small_spec(num_classes=4, images_per_class=2))
        with pytest.raises(ConfigError, match="num_classes"):
            split_classes(ds, SplitSpec(split_index=0, num_splits=4))

    def test_bad_split_index(self):
        ds = generate_dataset(small_spec(num_classes=8, images_per_class=2))
        with pytest.raises(ConfigError):
            split_classes(ds, SplitSpec(split_index=4, num_splits=4))


class TestBinarize:
    def test_all_match(self):
        mask = np.full((4, 4), 3, dtype=np.uint8)
        assert np.array_equal(binarize_mask(mask, 3), np.ones((4, 4), dtype=np.uint8))

    def test_none_match(self):
        mask = np.full((4, 4), 3, dtype=np.uint8)
        assert np.array_equal(binarize_mask(mask, 5), np.zeros((4, 4), dtype=np.uint8))

    def test_matches_naive_loop(self):
        rng = np.random.default_rng(0)
        mask = rng.integers(0, 5, size=(6, 7)).astype(np.uint8)
        out = binarize_mask(mask, 2)
        for r in range(6):
            for c in range(7):
                assert out[r, c] == (1 if mask[r, c] == 2 else 0)


class TestEpisode:
    def pool(self):
        return generate_dataset(small_spec(num_classes=4, images_per_class=10))

    def test_shapes_and_disjointness(self):
        pool = self.pool()
        ep = sample_episode(pool, pool.class_ids, k_shot=5, q_queries=2,
                            rng=make_rng(1, 0))
        assert len(ep.support) == 5 and len(ep.query) == 2
        ids = [s.sample_id for s in ep.support + ep.query]
        assert len(set(ids)) == len(ids)

    def test_masks_binarized_with_foreground(self):
        pool = self.pool()
        ep = sample_episode(pool, pool.class_ids, 2, 1, make_rng(2, 0))
        for s in ep.support + ep.query:
            assert set(np.unique(s.mask)) <= {0, 1}
            assert s.mask.sum() >= 1

    def test_reproducible_with_same_stream(self):
        pool = self.pool()
        a = sample_episode(pool, pool.class_ids, 1, 1, make_rng(9, 4))
        b = sample_episode(pool, pool.class_ids, 1, 1, make_rng(9, 4))
        assert a.class_id == b.class_id
        assert [s.sample_id for s in a.support] == [s.sample_id for s in b.support]
        assert [s.sample_id for s in a.query] == [s.sample_id for s in b.query]

    def test_binarization_drops_other_classes(self):
        pool = self.pool()
        ep = sample_episode(pool, pool.class_ids, 1, 1, make_rng(3, 0))
        original = pool.samples[[s.sample_id for s in pool.samples].index(
            ep.support[0].sample_id)]
        expected = (original.mask == ep.class_id).astype(np.uint8)
        assert np.array_equal(ep.support[0].mask, expected)

    def test_starved_class_resampled(self):
        pool = self.pool()
        # class 1 has only 10 samples; requesting 11 forces redraws, and
        # restricting the pool to class 1 alone must then error
        restricted = pool.restrict([1])
        with pytest.raises(EpisodeExhaustedError):
            sample_episode(restricted, [1], k_shot=10, q_queries=1, rng=make_rng(0, 0))

    def test_uniform_class_coverage(self):
        pool = self.pool()
        seen = {sample_episode(pool, pool.class_ids, 1, 1, make_rng(0, i)).class_id
                for i in range(60)}
        assert seen == set(pool.class_ids)

    def test_empty_class_pool_rejected(self):
        pool = self.pool()
        with pytest.raises(EpisodeExhaustedError):
            sample_episode(pool, [99], 1, 1, make_rng(0, 0))


class TestExport:
    def test_round_trip(self, tmp_path):
        ds = generate_dataset(small_spec(num_classes=3, images_per_class=4))
        out = export_dataset(ds, tmp_path / "data")
        loaded = load_dataset(out)
        assert loaded.spec == ds.spec
        assert datasets_equal(ds, loaded)

    def test_directory_layout(self, tmp_path):
        ds = generate_dataset(small_spec(num_classes=3, images_per_class=4))
        out = export_dataset(ds, tmp_path / "data")
        dirs = sorted(p.name for p in out.iterdir() if p.is_dir())
        assert dirs == ["class_001", "class_002", "class_003"]
        assert len(list((out / "class_002").glob("*.seg"))) == 4

    def test_manifest_records_seed(self, tmp_path):
        import json
        ds = generate_dataset(small_spec(seed=42))
        out = export_dataset(ds, tmp_path / "data")
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 42
        assert manifest["spec"]["seed"] == 42

    def test_export_deterministic_bytes(self, tmp_path):
        ds = generate_dataset(small_spec(num_classes=2, images_per_class=3))
        a = export_dataset(ds, tmp_path / "a")
        b = export_dataset(ds, tmp_path / "b")
        for pa in sorted(a.rglob("*")):
            pb = b / pa.relative_to(a)
            if pa.is_file():
                assert pa.read_bytes() == pb.read_bytes()

    def test_record_magic_enforced(self, tmp_path):
        ds = generate_dataset(small_spec(num_classes=2, images_per_class=2))
        out = export_dataset(ds, tmp_path / "data")
        victim = next((out / "class_001").glob("*.seg"))
        victim.write_bytes(b"XXXX" + victim.read_bytes()[4:])
        with pytest.raises(ConfigError, match="magic"):
            load_dataset(out)
