import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from smcmix.mixer import (
    AugmentPolicy,
    MaskRect,
    _reflect_index,
    augment,
    crop_mix,
    make_mask,
    make_training_view,
    mask_array,
    normalize_lambda,
    padded_foreground,
    resize_bilinear,
    resize_mix,
    sample_lambda,
    soft_label,
)
from smcmix.tensor import ContractViolation


def const(value, size=32, channels=1):
    return np.full((channels, size, size), value)


class TestLambda:
    def test_affine_endpoints(self):
        assert normalize_lambda(0.0) == 0.2
        assert normalize_lambda(1.0) == 0.8
        assert normalize_lambda(0.5) == pytest.approx(0.5, abs=1e-15)

    def test_uniform_moments(self):
        rng = np.random.default_rng(0)
        draws = np.array([sample_lambda(1.0, rng) for _ in range(100_000)])
        assert abs(draws.mean() - 0.5) <= 0.002
        assert draws.min() >= 0.2 and draws.max() <= 0.8

    def test_full_range_support(self):
        rng = np.random.default_rng(1)
        draws = np.array([sample_lambda(1.0, rng, full_range=True) for _ in range(20_000)])
        assert draws.min() < 0.01 and draws.max() > 0.99

    def test_alpha_must_be_positive(self, rng):
        with pytest.raises(ContractViolation):
            sample_lambda(0.0, rng)


class TestMask:
    def test_perfect_square(self, rng):
        rect, lam = make_mask(32, 32, 0.25, rng)
        assert (rect.height, rect.width) == (16, 16) and lam == 0.25

    def test_half(self, rng):
        rect, lam = make_mask(32, 32, 0.5, rng)
        assert (rect.height, rect.width) == (23, 23)
        assert lam == 529 / 1024

    @given(st.integers(8, 40), st.integers(8, 40), st.floats(0.0, 1.0))
    def test_rounding_bound_and_placement(self, h, w, lam):
        rect, eff = make_mask(h, w, lam, np.random.default_rng(0))
        assert abs(eff - lam) <= (h + w + 1) / (h * w)
        assert eff == rect.height * rect.width / (h * w)
        assert 0 <= rect.top <= h - rect.height and 0 <= rect.left <= w - rect.width

    def test_positions_cover_all_placements(self):
        rng = np.random.default_rng(2)
        tops = {make_mask(10, 10, 0.25, rng)[0].top for _ in range(2000)}
        assert tops == set(range(10 - 5 + 1))

    def test_too_small_frame(self, rng):
        with pytest.raises(ContractViolation):
            make_mask(7, 32, 0.5, rng)


class TestResize:
    def test_identity(self, rng):
        img = rng.uniform(size=(2, 9, 11))
        assert np.array_equal(resize_bilinear(img, 9, 11), img)

    @given(st.integers(1, 40), st.integers(1, 40), st.floats(0, 1))
    def test_constant_stays_exact(self, oh, ow, value):
        out = resize_bilinear(np.full((1, 16, 16), value), oh, ow)
        assert out.shape == (1, oh, ow)
        assert (out == value).all()

    def test_linear_ramp_upsample(self):
        # half-pixel centres: interior samples of a ramp stay on the ramp
        ramp = np.arange(4.0)[None, None, :].repeat(4, axis=1)
        out = resize_bilinear(ramp, 4, 8)
        np.testing.assert_allclose(out[0, 0, 1:-1], (np.arange(1, 7) + 0.5) * 0.5 - 0.5)

    def test_downsample_by_two_averages_pairs(self):
        img = np.arange(16.0).reshape(1, 4, 4)
        out = resize_bilinear(img, 2, 2)
        expected = img.reshape(1, 2, 2, 2, 2).mean(axis=(2, 4))
        np.testing.assert_allclose(out, expected)


class TestBlend:
    @given(st.integers(0, 24), st.integers(0, 24), st.integers(1, 8), st.integers(1, 8))
    def test_constant_colours(self, top, left, h, w):
        rect = MaskRect(top, left, h, w)
        out = resize_mix(const(0.7), const(0.2), rect)
        m = mask_array((32, 32), rect).astype(bool)
        assert (out[0][m] == 0.7).all() and (out[0][~m] == 0.2).all()

    def test_hadamard_form(self, rng):
        fg, bg = rng.uniform(size=(3, 16, 16)), rng.uniform(size=(3, 16, 16))
        rect = MaskRect(3, 2, 9, 11)
        m = mask_array((16, 16), rect)
        expected = m * padded_foreground(fg, rect) + (1 - m) * bg
        assert np.array_equal(resize_mix(fg, bg, rect), expected)

    def test_full_frame(self, rng):
        fg, bg = rng.uniform(size=(1, 16, 16)), rng.uniform(size=(1, 16, 16))
        assert np.array_equal(resize_mix(fg, bg, MaskRect(0, 0, 16, 16)), fg)
        assert np.array_equal(crop_mix(fg, bg, MaskRect(0, 0, 16, 16), rng), fg)

    def test_outside_rect_is_background_exactly(self, rng):
        img = rng.uniform(size=(1, 16, 16))
        rect = MaskRect(4, 4, 6, 6)
        out = resize_mix(img, img, rect)
        m = mask_array((16, 16), rect).astype(bool)
        assert np.array_equal(out[0][~m], img[0][~m])

    def test_mean_pixel_matches_lambda(self, rng):
        rect, lam = make_mask(32, 32, 0.37, rng)
        out = resize_mix(const(0.9), const(0.1), rect)
        assert out.mean() == pytest.approx(lam * 0.9 + (1 - lam) * 0.1, abs=1e-15)

    def test_dim_mismatch(self):
        with pytest.raises(ContractViolation):
            resize_mix(const(0.1, 16), const(0.1, 32), MaskRect(0, 0, 4, 4))

    def test_rect_outside_frame(self):
        with pytest.raises(ContractViolation):
            resize_mix(const(0.1), const(0.1), MaskRect(30, 0, 4, 4))

    def test_crop_mix_constant_equals_resize_mix(self, rng):
        rect = MaskRect(5, 7, 10, 12)
        assert np.array_equal(crop_mix(const(0.7), const(0.2), rect, rng), resize_mix(const(0.7), const(0.2), rect))

    def test_crop_capture_probability(self):
        # signature occupies rows/cols 4..7; a 16x16 crop of a 32x32 image
        # contains it iff top and left are both in [0, 4]
        fg = np.zeros((1, 32, 32))
        fg[0, 4:8, 4:8] = 1.0
        rng = np.random.default_rng(11)
        rect = MaskRect(0, 0, 16, 16)
        hits = sum(crop_mix(fg, np.zeros_like(fg), rect, rng).sum() == 16.0 for _ in range(10_000))
        p = (5 / 17) ** 2
        sd = math.sqrt(10_000 * p * (1 - p))
        assert abs(hits - 10_000 * p) < 4 * sd


class TestAugment:
    @pytest.mark.parametrize("n,shift", [(8, -4), (8, 4), (16, 3), (16, 0), (9, -2)])
    def test_reflect_index_matches_numpy_pad(self, n, shift):
        p = 4
        padded = np.pad(np.arange(n), p, mode="reflect")
        assert np.array_equal(np.arange(n)[_reflect_index(n, shift)], padded[p + shift : p + shift + n])

    def test_constant_image_invariant(self, rng):
        img = const(0.4, 16, 3)
        for policy in (AugmentPolicy(), AugmentPolicy(crop_scale=(0.3, 1.0))):
            for _ in range(20):
                assert (augment(img, policy, rng) == 0.4).all()

    def test_identity_policy(self, rng):
        img = rng.uniform(size=(1, 8, 8))
        assert np.array_equal(augment(img, AugmentPolicy(pad=0, flip_prob=0.0), rng), img)

    def test_flip(self, rng):
        img = rng.uniform(size=(1, 8, 8))
        assert np.array_equal(augment(img, AugmentPolicy(pad=0, flip_prob=1.0), rng), img[:, :, ::-1])

    @pytest.mark.parametrize("kwargs", [{"placement": "sideways"}, {"pad": -1}, {"flip_prob": 2}, {"crop_scale": (0.5, 0.2)}])
    def test_invalid_policy(self, kwargs):
        with pytest.raises(ContractViolation):
            AugmentPolicy(**kwargs)


class TestTrainingView:
    def test_record_consistency(self, rng):
        for _ in range(200):
            view, rec = make_training_view(const(0.7), const(0.2), 3, 5, 8, AugmentPolicy(), 1.0, rng)
            assert 0.2 <= rec.lambda_sampled <= 0.8
            assert rec.lambda_effective == rec.rect.height * rec.rect.width / 1024
            assert rec.soft_label[3] == rec.lambda_effective
            assert rec.soft_label.sum() == pytest.approx(1.0, abs=1e-15)
            assert view.min() >= 0 and view.max() <= 1

    def test_same_class_pair_label(self, rng):
        _, rec = make_training_view(const(0.7), const(0.2), 2, 2, 4, AugmentPolicy(), 1.0, rng)
        assert rec.soft_label.tolist() == [0.0, 0.0, 1.0, 0.0]

    def test_before_mix_keeps_constant_foreground(self, rng):
        for _ in range(50):
            view, rec = make_training_view(const(0.7), rng.uniform(size=(1, 32, 32)), 0, 1, 2, AugmentPolicy(), 1.0, rng)
            r = rec.rect
            assert (view[0, r.top : r.top + r.height, r.left : r.left + r.width] == 0.7).all()

    def test_identity_augment_matches_no_placement(self):
        fg, bg = np.random.default_rng(0).uniform(size=(2, 1, 16, 16))
        identity = AugmentPolicy(pad=0, flip_prob=0.0)
        for seed in range(20):
            view, rec = make_training_view(fg, bg, 0, 1, 2, identity, 1.0, np.random.default_rng(seed))
            assert np.array_equal(view, resize_mix(fg, bg, rec.rect))

    def test_after_mix_can_lose_the_foreground(self):
        # tracer: ones foreground over a zeros background, measure fg pixels left in the view
        fg, bg = const(1.0, 16), const(0.0, 16)
        before, after = AugmentPolicy(crop_scale=(0.08, 1.0)), AugmentPolicy(placement="after-mix", crop_scale=(0.08, 1.0))
        rng = np.random.default_rng(3)
        min_before = min(make_training_view(fg, bg, 0, 1, 2, before, 1.0, rng)[0].sum() for _ in range(10_000))
        zero_after = sum(make_training_view(fg, bg, 0, 1, 2, after, 1.0, rng)[0].sum() == 0 for _ in range(10_000))
        assert min_before > 0
        assert zero_after > 0

    def test_deterministic_given_rng(self):
        fg, bg = np.random.default_rng(0).uniform(size=(2, 3, 16, 16))
        a = make_training_view(fg, bg, 0, 1, 2, AugmentPolicy(), 1.0, np.random.default_rng(8))
        b = make_training_view(fg, bg, 0, 1, 2, AugmentPolicy(), 1.0, np.random.default_rng(8))
        assert np.array_equal(a[0], b[0]) and a[1].rect == b[1].rect

    def test_no_mix_view(self, rng):
        view, rec = make_training_view(const(0.3), const(0.9), 1, 2, 3, AugmentPolicy(), 1.0, rng, mix_op="none")
        assert (view == 0.3).all()
        assert rec.lambda_effective == 1.0 and rec.soft_label.tolist() == [0.0, 1.0, 0.0]

    def test_soft_label(self):
        np.testing.assert_array_equal(soft_label(3, 0, 2, 0.25), [0.25, 0.0, 0.75])
