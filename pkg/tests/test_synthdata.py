"""Generation determinism, annotation exactness, and disk round-trips."""

import numpy as np
import pytest

from ewcdet.synthdata import (DOMAIN_A, DOMAIN_B, Dataset, DatasetIOError,
                              DomainSpec, GroundTruthBox, dataset_hash,
                              generate_domain, load_dataset, save_dataset)

FAST = DomainSpec(background="flat", background_intensity=(0.7, 0.9),
                  object_intensity=(0.1, 0.3), object_height=(20.0, 30.0),
                  aspect_ratio=0.5, objects_per_image=(1, 2),
                  occluder_probability=0.5, occlusion_fraction=(0.1, 0.6),
                  noise_sigma=0.01, image_size=64)


class TestSpecValidation:
    def test_bad_background(self):
        with pytest.raises(ValueError):
            DomainSpec(background="plaid")

    def test_unordered_range(self):
        with pytest.raises(ValueError):
            DomainSpec(object_height=(30.0, 20.0))

    def test_occlusion_cap(self):
        with pytest.raises(ValueError):
            DomainSpec(occlusion_fraction=(0.0, 0.95))

    def test_roundtrip_dict(self):
        assert DomainSpec.from_dict(FAST.to_dict()) == FAST


class TestGeneration:
    def test_count(self):
        ds = generate_domain(FAST, 5, seed=0)
        assert len(ds.images) == 5 and len(ds.annotations) == 5

    def test_deterministic_hash(self):
        a = generate_domain(FAST, 6, seed=3)
        b = generate_domain(FAST, 6, seed=3)
        assert dataset_hash(a) == dataset_hash(b)
        c = generate_domain(FAST, 6, seed=4)
        assert dataset_hash(a) != dataset_hash(c)

    def test_prefix_stability(self):
        # per-image rng streams: image i does not depend on count
        a = generate_domain(FAST, 3, seed=5)
        b = generate_domain(FAST, 6, seed=5)
        np.testing.assert_array_equal(a.images[2], b.images[2])

    def test_no_occluders_all_bare(self):
        spec = DomainSpec(background="flat", object_height=(20.0, 30.0),
                          aspect_ratio=0.5, occluder_probability=0.0,
                          image_size=64)
        ds = generate_domain(spec, 8, seed=1)
        for anns in ds.annotations:
            for g in anns:
                assert g.occlusion_ratio == 0.0

    def test_boxes_inside_bounds_and_occlusion_capped(self):
        for spec, seed in ((DOMAIN_A, 11), (DOMAIN_B, 12)):
            ds = generate_domain(spec, 10, seed=seed)
            for img, anns in zip(ds.images, ds.annotations):
                for g in anns:
                    x0, y0, x1, y1 = g.box
                    assert 0 <= x0 < x1 <= img.shape[1]
                    assert 0 <= y0 < y1 <= img.shape[0]
                    assert 0.0 <= g.occlusion_ratio <= 0.8

    def test_occlusion_ratio_matches_rendered_pixels(self):
        # occluders share the background range; a fully dark-object box with a
        # light band over its bottom should show that band exactly
        spec = DomainSpec(background="flat", background_intensity=(0.9, 0.9),
                          object_intensity=(0.1, 0.1), object_height=(30.0, 30.0),
                          aspect_ratio=0.5, objects_per_image=(1, 1),
                          occluder_probability=1.0, occlusion_fraction=(0.4, 0.4),
                          noise_sigma=0.0, image_size=64)
        ds = generate_domain(spec, 4, seed=2)
        for img, anns in zip(ds.images, ds.annotations):
            g = anns[0]
            x0, y0, x1, y1 = (int(v) for v in g.box)
            patch = img[y0:y1, x0:x1]
            rendered = np.mean(patch > 0.5)  # occluder pixels are light
            assert abs(rendered - g.occlusion_ratio) <= 0.02

    def test_mean_height_sampling_stats(self):
        spec = FAST
        heights = []
        seed = 0
        while len(heights) < 1000:
            ds = generate_domain(spec, 50, seed=seed)
            heights.extend(g.height for anns in ds.annotations for g in anns)
            seed += 1
        heights = np.asarray(heights[:1000])
        lo, hi = spec.object_height
        midpoint = (lo + hi) / 2
        se = (hi - lo) / np.sqrt(12) / np.sqrt(len(heights))
        # rounding to integer pixels adds at most +-0.5 of quantization
        assert abs(heights.mean() - midpoint) <= 3 * se + 0.5

    def test_infeasible_spec_rejected(self):
        spec = DomainSpec(object_height=(120.0, 130.0), image_size=64)
        with pytest.raises(ValueError):
            generate_domain(spec, 1, seed=0)

    def test_zero_count_rejected(self):
        with pytest.raises(ValueError):
            generate_domain(FAST, 0, seed=0)


class TestShippedDomains:
    def test_measurable_intensity_shift(self):
        a = generate_domain(DOMAIN_A, 200, seed=0)
        b = generate_domain(DOMAIN_B, 200, seed=1)
        means_a = np.array([img.mean() for img in a.images])
        means_b = np.array([img.mean() for img in b.images])
        pooled_se = np.sqrt(means_a.var(ddof=1) / 200 + means_b.var(ddof=1) / 200)
        assert abs(means_a.mean() - means_b.mean()) >= 5 * pooled_se

    def test_eligible_heights(self):
        # evaluation only counts gts taller than 50 px
        for spec in (DOMAIN_A, DOMAIN_B):
            assert spec.object_height[0] > 50.0


class TestDiskRoundTrip:
    def test_lossless(self, tmp_path):
        ds = generate_domain(FAST, 4, seed=9, split="test", domain_id="X")
        save_dataset(ds, tmp_path / "d")
        back = load_dataset(tmp_path / "d")
        assert len(back) == len(ds)
        assert back.split == "test" and back.domain_id == "X"
        assert back.spec == ds.spec and back.seed == 9
        for a, b in zip(ds.images, back.images):
            np.testing.assert_array_equal(a, b)
        for anns_a, anns_b in zip(ds.annotations, back.annotations):
            assert anns_a == anns_b
        assert dataset_hash(back) == dataset_hash(ds)

    def test_truncated_rejected(self, tmp_path):
        ds = generate_domain(FAST, 4, seed=9)
        save_dataset(ds, tmp_path / "d")
        (tmp_path / "d" / "img_00002.npy").unlink()
        with pytest.raises(DatasetIOError):
            load_dataset(tmp_path / "d")

    def test_version_mismatch_rejected(self, tmp_path):
        ds = generate_domain(FAST, 2, seed=9)
        save_dataset(ds, tmp_path / "d")
        manifest = tmp_path / "d" / "manifest.json"
        manifest.write_text(manifest.read_text().replace(
            '"format_version": 1', '"format_version": 99'))
        with pytest.raises(DatasetIOError):
            load_dataset(tmp_path / "d")

    def test_missing_manifest_rejected(self, tmp_path):
        with pytest.raises(DatasetIOError):
            load_dataset(tmp_path / "nope")

    def test_corrupt_annotations_rejected(self, tmp_path):
        ds = generate_domain(FAST, 2, seed=9)
        save_dataset(ds, tmp_path / "d")
        ann = tmp_path / "d" / "annotations.csv"
        ann.write_text(ann.read_text() + "9,bad,1,2,3,0\n")
        with pytest.raises(DatasetIOError):
            load_dataset(tmp_path / "d")


class TestTypes:
    def test_gt_height_field(self):
        g = GroundTruthBox((2.0, 3.0, 10.0, 40.0), 0.1)
        assert g.height == 37.0

    def test_degenerate_box_rejected(self):
        with pytest.raises(ValueError):
            GroundTruthBox((5.0, 3.0, 5.0, 40.0), 0.0)

    def test_dataset_split_checked(self):
        with pytest.raises(ValueError):
            Dataset(images=[np.zeros((4, 4))], annotations=[[]],
                    split="validation", domain_id="x")

    def test_out_of_bounds_box_rejected(self):
        with pytest.raises(ValueError):
            Dataset(images=[np.zeros((4, 4))],
                    annotations=[[GroundTruthBox((0.0, 0.0, 8.0, 4.0), 0.0)]],
                    split="train", domain_id="x")
