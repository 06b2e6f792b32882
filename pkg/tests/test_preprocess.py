
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aweunet.boxes import BoundingBox
from aweunet.errors import ContractViolation, DegenerateInputError
from aweunet.preprocess import (AugmentationSpec, augment, crop_resize_mask, crop_resize_roi,
                                elastic_transform, extract_lung_region, intensity_histogram,
                                otsu_threshold, rotate)

from oracles import bilinear_loop, otsu_exhaustive


class TestOtsu:
    def test_two_modes(self):
        hist = np.zeros(256, np.int64)
        hist[10], hist[200] = 500, 500
        t = otsu_threshold(hist)
        assert 10 < t <= 200
        assert t == otsu_exhaustive(hist) == 11

    def test_extreme_spikes_lowest_level(self):
        hist = np.zeros(256, np.int64)
        hist[0], hist[255] = 7, 7
        assert otsu_threshold(hist) == otsu_exhaustive(hist) == 1

    def test_constant_is_degenerate(self):
        with pytest.raises(DegenerateInputError):
            otsu_threshold(intensity_histogram(np.full((8, 8), 90)))

    def test_rejects_bad_histograms(self):
        with pytest.raises(ContractViolation):
            otsu_threshold(np.zeros(256, np.int64))
        with pytest.raises(ContractViolation):
            otsu_threshold(np.ones(255, np.int64))

    def test_random_histograms_match_exhaustive_scan(self):
        rng = np.random.default_rng(0)
        for _ in range(60):
            hist = rng.integers(0, 50, 256) * (rng.random(256) < rng.uniform(0.02, 1.0))
            if np.count_nonzero(hist) < 2:
                continue
            assert otsu_threshold(hist) == otsu_exhaustive(hist)


def _lung_fixture():
    img = np.full((512, 512), 12, np.uint8)
    yy, xx = np.mgrid[:512, :512]
    field = (xx - 256) ** 2 / 150 ** 2 + (yy - 256) ** 2 / 200 ** 2 <= 1
    img[field] = 180
    return img, field


class TestLungExtraction:
    def test_bright_field_kept_background_zeroed(self):
        img, field = _lung_fixture()
        out = extract_lung_region(img)
        assert out.warning is None
        assert np.array_equal(out.image[field], img[field])
        far = np.ones_like(field)
        far[40:-40, 40:-40] = False
        assert (out.image[far] == 0).all()
        # dilation by a 5x5 square, 3 times, reaches exactly 6 px past the field
        ring = out.mask & ~field
        assert ring.any() and out.image.shape == (512, 512)

    def test_degenerate_passes_through(self):
        img = np.full((512, 512), 230, np.uint8)
        out = extract_lung_region(img)
        assert out.warning is not None
        assert np.array_equal(out.image, img)

    def test_wrong_size(self):
        with pytest.raises(ContractViolation):
            extract_lung_region(np.zeros((256, 256), np.uint8))


class TestRoi:
    def test_full_image(self):
        img = np.random.default_rng(0).integers(0, 256, (512, 512)).astype(np.uint8)
        roi = crop_resize_roi(img, BoundingBox(0, 0, 512, 512), pad_fraction=0.0)
        assert roi.patch.shape == (1, 224, 224)
        assert 0.0 <= roi.patch.min() and roi.patch.max() <= 1.0

    def test_box_upsampled_twice_matches_bilinear_oracle(self):
        img = np.random.default_rng(1).integers(0, 256, (512, 512)).astype(np.uint8)
        box = BoundingBox(100, 50, 112, 112)
        roi = crop_resize_roi(img, box, pad_fraction=0.0)
        expected = bilinear_loop(img[50:162, 100:212].astype(np.float64) / 255.0, 224, 224)
        np.testing.assert_allclose(roi.patch[0], expected, atol=1e-12)

    def test_padding_and_clipping(self):
        img = np.zeros((512, 512), np.uint8)
        roi = crop_resize_roi(img, BoundingBox(500, 0, 20, 10), pad_fraction=0.1, size=32)
        assert (roi.window.x0, roi.window.y0, roi.window.x1, roi.window.y1) == (498, 0, 512, 11)

    def test_outside_image(self):
        with pytest.raises(ContractViolation):
            crop_resize_roi(np.zeros((512, 512)), BoundingBox(600, 600, 10, 10))

    def test_mask_crop_binary(self):
        mask = np.zeros((512, 512), np.uint8)
        mask[200:220, 200:230] = 1
        roi = crop_resize_roi(mask * 255, BoundingBox(200, 200, 30, 20), 0.1, 32)
        m = crop_resize_mask(mask, roi.window, 32)
        assert set(np.unique(m)) <= {0, 1} and m.sum() > 0.5 * m.size


def _asymmetric(n=9):
    img = np.arange(n * n, dtype=np.float64).reshape(n, n)
    mask = np.zeros((n, n), np.uint8)
    mask[1:3, 5:8] = 1
    return img, mask


class TestAugmentation:
    def test_hflip_involution(self):
        img, mask = _asymmetric()
        spec = AugmentationSpec(rotation_degrees=0, hflip_prob=1.0, vflip_prob=0.0, elastic_alpha=0)
        once = augment(img, mask, spec, 3)
        twice = augment(*once, spec, 4)
        assert np.array_equal(twice[0], img) and np.array_equal(twice[1], mask)
        assert np.array_equal(once[0], img[:, ::-1])

    def test_disabled_is_identity(self):
        img, mask = _asymmetric()
        out = augment(img, mask, AugmentationSpec.disabled(), 11)
        assert np.array_equal(out[0], img) and np.array_equal(out[1], mask)

    def test_rotation_90_is_index_permutation(self):
        img, mask = _asymmetric()
        r_img, r_mask = rotate(img, mask, 90)
        n = img.shape[0]
        for i in range(n):
            for j in range(n):
                # counter-clockwise: new[i, j] = old[j, n - 1 - i]
                assert r_img[i, j] == img[j, n - 1 - i]
                assert r_mask[i, j] == mask[j, n - 1 - i]

    def test_general_rotation_direction_agrees_with_quarter_turns(self):
        yy, xx = np.mgrid[:33, :33]
        img = np.exp(-((xx - 24) ** 2 + (yy - 16) ** 2) / 8.0)
        mask = (img > 0.5).astype(np.uint8)
        near, _ = rotate(img, mask, 89.999)
        exact, _ = rotate(img, mask, 90)
        assert np.abs(near - exact).max() < 1e-3

    def test_mask_stays_binary(self):
        img, mask = _asymmetric(32)
        spec = AugmentationSpec(rotation_degrees=15)
        for seed in range(5):
            a_img, a_mask = augment(img, mask, spec, seed)
            assert a_img.shape == img.shape and a_mask.shape == mask.shape
            assert set(np.unique(a_mask)) <= {0, 1}

    def test_seeded(self):
        img, mask = _asymmetric(32)
        a = augment(img, mask, AugmentationSpec(), 5)
        b = augment(img, mask, AugmentationSpec(), 5)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_invalid_spec(self):
        with pytest.raises(ContractViolation):
            AugmentationSpec(hflip_prob=1.5)
        with pytest.raises(ContractViolation):
            AugmentationSpec(elastic_sigma=0)


class TestElastic:
    def test_zero_alpha_identity(self):
        img, mask = _asymmetric()
        out = elastic_transform(img, mask, 0.0, 4.0, 1)
        assert np.array_equal(out[0], img) and np.array_equal(out[1], mask)

    def test_seeded(self):
        img, mask = _asymmetric(40)
        a = elastic_transform(img, mask, 34, 4, 9)
        b = elastic_transform(img, mask, 34, 4, 9)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_area_preserved_roughly(self):
        yy, xx = np.mgrid[:128, :128]
        mask = ((xx - 64) ** 2 + (yy - 64) ** 2 <= 30 ** 2).astype(np.uint8)
        img = mask * 200.0
        _, warped = elastic_transform(img, mask, 34, 4, 2024)
        assert set(np.unique(warped)) <= {0, 1}
        assert abs(int(warped.sum()) - int(mask.sum())) < 0.2 * mask.sum()

    def test_sigma_must_be_positive(self):
        with pytest.raises(ContractViolation):
            elastic_transform(np.zeros((4, 4)), np.zeros((4, 4)), 1.0, 0.0, 0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([0.0, 10.0, 180.0]))
def test_augment_keeps_alignment_and_binary(seed, degrees):
    img, mask = _asymmetric(24)
    spec = AugmentationSpec(rotation_degrees=degrees)
    a_img, a_mask = augment(img[None], mask[None], spec, seed)
    assert a_img.shape == (1, 24, 24) and a_mask.shape == (1, 24, 24)
    assert set(np.unique(a_mask)) <= {0, 1}
