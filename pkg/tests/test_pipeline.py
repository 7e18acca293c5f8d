import pytest
import numpy as np
from collections import Counter

from hpseg.errors import (
    AugmentationConfigError, CropError, PipelineError, SamplerError, SlabIndexError,
)
from hpseg.hierarchy import ALL_FORMATS, TargetFormat, encode_target
from hpseg.metrics import dice
from hpseg.pipeline import (
    STAGE_NORMALIZED, AugmentConfig, CatalogEntry, CTVolume, Slab, affine_resample, augment,
    crop_to_lung, draw_rng, extract_slab, load_catalog, mirror, normalize_hu, normalize_volume,
    sample_epoch, uncrop, write_catalog,
)


def full_catalog(items_per_format=4):
    return {fmt: [(f"{fmt.value}-{i}", i) for i in range(items_per_format)] for fmt in ALL_FORMATS}


def lesion_slab(size=16):
    labels = np.zeros((size, size), dtype=np.int64)
    labels[4:10, 4:10] = 1
    labels[6:8, 6:8] = 2
    intensity = np.stack([np.linspace(0, 1, size * size).reshape(size, size)] * 3).astype(np.float32)
    return Slab(intensity, encode_target(labels, TargetFormat.LESION), TargetFormat.LESION, "vol", 3)


class TestNormalize:
    """Test HU normalization"""

    def test_reference_values(self):
        """Test clipping and the linear mapping"""
        assert normalize_hu(-1024.0) == 0.0
        assert normalize_hu(600.0) == 1.0
        assert normalize_hu(-2000.0) == 0.0
        assert normalize_hu(3000.0) == 1.0
        assert normalize_hu(-212.0) == pytest.approx(0.5)

    def test_nan_rejected(self):
        """Test NaN input is rejected"""
        with pytest.raises(PipelineError):
            normalize_hu(np.array([0.0, np.nan]))

    def test_volume_stage(self):
        """Test a volume is normalized once only"""
        vol = normalize_volume(CTVolume(np.full((2, 2, 2), -1024.0)))
        assert vol.stage == STAGE_NORMALIZED
        assert vol.data.max() == 0.0
        with pytest.raises(PipelineError):
            normalize_volume(vol)


class TestExtractSlab:
    """Test 2.5D slab extraction"""

    def test_interior_and_borders(self):
        """Test neighbours and edge replication"""
        volume = np.arange(4, dtype=np.float32)[:, None, None] * np.ones((4, 2, 2), dtype=np.float32)

        assert extract_slab(volume, 2)[:, 0, 0].tolist() == [1.0, 2.0, 3.0]
        assert extract_slab(volume, 0)[:, 0, 0].tolist() == [0.0, 0.0, 1.0]
        assert extract_slab(volume, 3)[:, 0, 0].tolist() == [2.0, 3.0, 3.0]

    def test_single_slice_volume(self):
        """Test a one-slice volume replicates itself"""
        volume = np.ones((1, 3, 3), dtype=np.float32)
        assert extract_slab(volume, 0).shape == (3, 3, 3)

    def test_out_of_range(self):
        """Test bad indices raise"""
        volume = CTVolume(np.zeros((3, 2, 2)))
        for z in (-1, 3):
            with pytest.raises(SlabIndexError):
                extract_slab(volume, z)


class TestAugment:
    """Test slab augmentation"""

    def test_disabled_is_center_crop(self):
        """Test augmentation with every probability at zero only crops"""
        slab = lesion_slab()
        out = augment(slab, np.random.default_rng(0), AugmentConfig.disabled(patch_size=8))

        assert out.intensity.shape == (3, 8, 8)
        assert np.array_equal(out.intensity, slab.intensity[:, 4:12, 4:12])
        assert np.array_equal(out.target, slab.target[:, 4:12, 4:12])

    def test_target_stays_one_hot(self):
        """Test augmented targets remain valid one-hot maps"""
        slab = lesion_slab()
        cfg = AugmentConfig(patch_size=12, p_scale=1.0, p_rotation=1.0, p_noise=1.0, p_blur=1.0,
                            p_brightness=1.0, p_contrast=1.0, p_morphology=1.0)
        for seed in range(5):
            out = augment(slab, np.random.default_rng(seed), cfg).validate()
            np.testing.assert_array_equal(out.target.sum(axis=0), 1.0)
            assert set(np.unique(out.target)) <= {0.0, 1.0}

    def test_same_rng_same_result(self):
        """Test augmentation is a function of the generator state"""
        slab = lesion_slab()
        cfg = AugmentConfig(patch_size=12)
        a = augment(slab, draw_rng(5, 17), cfg)
        b = augment(slab, draw_rng(5, 17), cfg)
        assert np.array_equal(a.intensity, b.intensity)
        assert np.array_equal(a.target, b.target)

    def test_patch_larger_than_slab(self):
        """Test an oversized patch is rejected"""
        with pytest.raises(AugmentationConfigError):
            augment(lesion_slab(8), np.random.default_rng(0), AugmentConfig(patch_size=16))

    def test_bad_crop_mode(self):
        """Test unknown crop modes are rejected"""
        with pytest.raises(AugmentationConfigError):
            AugmentConfig(crop="corner")

    def test_quarter_turn_keeps_labels(self):
        """Test a 90 degree rotation maps lesion pixels onto lesion pixels"""
        slab = lesion_slab()
        rotated = affine_resample(slab, 90.0)
        assert rotated.target[2].sum() == slab.target[2].sum()
        assert np.array_equal(np.rot90(slab.target[2]) > 0, rotated.target[2] > 0) or \
            np.array_equal(np.rot90(slab.target[2], -1) > 0, rotated.target[2] > 0)

    def test_rotation_round_trip(self):
        """Test rotating by an angle and back recovers the target"""
        size = 48
        yy, xx = np.indices((size, size))
        radius = np.hypot(yy - 23.5, xx - 23.5)
        labels = np.where(radius <= 18, 1, 0) + (radius <= 12)
        intensity = np.stack([np.linspace(0, 1, size * size).reshape(size, size)] * 3).astype(np.float32)
        slab = Slab(intensity, encode_target(labels, TargetFormat.LESION), TargetFormat.LESION)

        for angle in (15.0, 30.0, 45.0, 120.0):
            back = affine_resample(affine_resample(slab, angle), -angle)
            assert dice(back.target[0] == 0, slab.target[0] == 0) >= 0.95
            assert dice(back.target[2] > 0, slab.target[2] > 0) >= 0.95

    def test_mirror_follows_target(self):
        """Test in-plane flips move the target with the intensity"""
        slab = lesion_slab()
        flipped = mirror(slab, [2])
        assert np.array_equal(flipped.target, slab.target[:, :, ::-1])
        assert np.array_equal(flipped.intensity, slab.intensity[:, :, ::-1])

        depth_flip = mirror(slab, [0])
        assert np.array_equal(depth_flip.target, slab.target)


class TestSampler:
    """Test the balanced epoch sampler"""

    def test_quota_per_format(self):
        """Test every format contributes exactly the quota"""
        plan = sample_epoch(full_catalog(), quota=20, seed=1)
        counts = Counter(d.format for d in plan.draws)
        assert all(counts[fmt] == 20 for fmt in ALL_FORMATS)

    def test_batches_balanced(self):
        """Test every batch of 10 holds two items per format"""
        plan = sample_epoch(full_catalog(), quota=20, seed=1)
        for batch in plan.batches(10):
            counts = Counter(d.format for d in batch)
            assert all(counts[fmt] == 2 for fmt in ALL_FORMATS)
        assert plan.is_balanced(10)

    def test_same_seed_same_plan(self):
        """Test the plan is a pure function of the seed"""
        assert sample_epoch(full_catalog(), 10, 4).draws == sample_epoch(full_catalog(), 10, 4).draws
        assert sample_epoch(full_catalog(), 10, 4).draws != sample_epoch(full_catalog(), 10, 5).draws

    def test_bad_batch_size(self):
        """Test batch sizes not divisible by the format count are rejected"""
        plan = sample_epoch(full_catalog(), quota=4, seed=0)
        with pytest.raises(SamplerError):
            list(plan.batches(7))

    def test_empty_format(self):
        """Test a format with no annotated slices is rejected"""
        catalog = full_catalog()
        catalog[TargetFormat.VESSEL] = []
        with pytest.raises(SamplerError):
            sample_epoch(catalog, quota=4, seed=0)

    def test_subset_of_formats(self):
        """Test a catalog with fewer formats balances over those"""
        catalog = {TargetFormat.LUNG: [("a", 0)], TargetFormat.SEPARATION: [("b", 1)]}
        plan = sample_epoch(catalog, quota=3, seed=0)
        assert plan.formats == (TargetFormat.LUNG, TargetFormat.SEPARATION)
        assert plan.is_balanced(2)


class TestCatalog:
    """Test catalog manifests"""

    def test_paths_resolve_relative_to_manifest(self, tmp_path):
        """Test relative paths resolve against the manifest directory"""
        entries = [CatalogEntry("p0/lung.rvol", "lung", (1, 2), "p0/ct.rvol")]
        path = write_catalog(entries, tmp_path / 'catalog.json')
        loaded = load_catalog(path)

        assert loaded[0].path == str(tmp_path / 'p0/lung.rvol')
        assert loaded[0].ct == str(tmp_path / 'p0/ct.rvol')
        assert loaded[0].annotated_slices == (1, 2)

    def test_malformed_catalog(self, tmp_path):
        """Test broken catalogs raise sampler errors"""
        path = tmp_path / 'catalog.json'
        path.write_text('{"path": "x"}')
        with pytest.raises(SamplerError):
            load_catalog(path)
        path.write_text('[{"format": "lung"}]')
        with pytest.raises(SamplerError):
            load_catalog(path)


class TestCrop:
    """Test lung bounding-box cropping"""

    def test_crop_and_uncrop(self):
        """Test the crop box and its inverse"""
        volume = np.arange(10 * 12 * 14).reshape(10, 12, 14)
        mask = np.zeros_like(volume, dtype=bool)
        mask[3:5, 4:8, 5:6] = True
        cropped, box = crop_to_lung(volume, mask, margin=1)

        assert box.offset == (2, 3, 4)
        assert box.size == (4, 6, 3)
        restored = uncrop(cropped, box, fill=-1)
        assert np.array_equal(restored[2:6, 3:9, 4:7], volume[2:6, 3:9, 4:7])
        assert restored[0, 0, 0] == -1

    def test_min_size_grows_box(self):
        """Test the box grows to the minimum size inside the volume"""
        volume = np.zeros((10, 20, 20))
        mask = np.zeros_like(volume, dtype=bool)
        mask[5, 0, 0] = True
        cropped, box = crop_to_lung(volume, mask, margin=0, min_size=(1, 8, 8))

        assert cropped.shape == (1, 8, 8)
        assert box.offset == (5, 0, 0)

    def test_empty_mask(self):
        """Test an empty mask cannot be cropped to"""
        with pytest.raises(CropError):
            crop_to_lung(np.zeros((2, 2, 2)), np.zeros((2, 2, 2), dtype=bool))


if __name__ == '__main__':
    pytest.main([__file__, '-v'])
