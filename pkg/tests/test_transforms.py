import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from energy_ood.errors import ParameterError
from energy_ood.transforms import (
    KINDS,
    TransformSpec,
    apply_spec,
    build_pd_batch,
    choose_specs,
    cutout,
    cutout_side,
    default_specs,
    gaussian_blur,
    gaussian_kernel,
    gaussian_noise,
    inverse_permutation,
    permute_patches,
    random_permutation,
    rotate,
    sobel,
    sobel_gradients,
)

unit_images = arrays(np.float64, st.tuples(st.sampled_from([1, 3]), st.just(6), st.just(6)),
                     elements=st.floats(0, 1))


def multiset(a):
    return np.sort(np.ravel(a))


class TestRotation:
    def test_one_turn(self):
        np.testing.assert_array_equal(rotate(np.array([[1.0, 2.0], [3.0, 4.0]]), 1), [[2.0, 4.0], [1.0, 3.0]])

    def test_index_mapping(self, rng):
        img = rng.random((5, 5))
        out = rotate(img, 1)
        n = 5
        for r in range(n):
            for c in range(n):
                assert out[r, c] == img[c, n - 1 - r]

    @given(unit_images)
    def test_full_turn_and_multiset(self, img):
        np.testing.assert_array_equal(rotate(rotate(img, 2), 2), img)
        for turns in (1, 2, 3):
            np.testing.assert_array_equal(multiset(rotate(img, turns)), multiset(img))

    def test_bad_turns(self):
        with pytest.raises(ParameterError):
            rotate(np.zeros((2, 2)), 4)
        with pytest.raises(ParameterError):
            rotate(np.zeros((2, 3)), 1)


class TestPermutation:
    def test_reverse_order(self):
        out = permute_patches(np.array([[1.0, 2.0], [3.0, 4.0]]), 2, [3, 2, 1, 0])
        np.testing.assert_array_equal(out, [[4.0, 3.0], [2.0, 1.0]])

    def test_patch_placement(self):
        img = np.arange(16.0).reshape(4, 4)
        out = permute_patches(img, 2, [1, 0, 2, 3])
        np.testing.assert_array_equal(out[:2, :2], img[:2, 2:])
        np.testing.assert_array_equal(out[:2, 2:], img[:2, :2])
        np.testing.assert_array_equal(out[2:], img[2:])

    @given(unit_images, st.integers(0, 2**32 - 1), st.sampled_from([2, 3]))
    def test_multiset_and_inverse(self, img, seed, k):
        perm = random_permutation(k, np.random.default_rng(seed))
        out = permute_patches(img, k, perm)
        np.testing.assert_array_equal(multiset(out), multiset(img))
        np.testing.assert_array_equal(permute_patches(out, k, inverse_permutation(perm)), img)

    def test_rejects_identity_and_bad_grid(self):
        with pytest.raises(ParameterError, match="identity"):
            permute_patches(np.zeros((4, 4)), 2, [0, 1, 2, 3])
        with pytest.raises(ParameterError, match="divisible"):
            permute_patches(np.zeros((5, 4)), 2, [1, 0, 2, 3])
        with pytest.raises(ParameterError, match="permutation"):
            permute_patches(np.zeros((4, 4)), 2, [0, 0, 1, 2])


class TestCutout:
    @pytest.mark.parametrize("seed", range(10))
    def test_four_pixels_zeroed(self, seed):
        out = cutout(np.ones((4, 4)), 0.5, seed=seed)
        assert np.count_nonzero(out == 0) == 4

    def test_full_mask(self):
        assert cutout_side(0.95, 10, 12) == 10
        assert np.count_nonzero(cutout(np.ones((3, 10, 10)), 0.96, seed=1)) == 0

    def test_half_rounds_up(self):
        assert cutout_side(0.25, 10, 10) == 3

    def test_deterministic_and_channels_shared(self):
        img = np.ones((3, 8, 8))
        a, b = cutout(img, 0.5, seed=5), cutout(img, 0.5, seed=5)
        np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(a[0] == 0, a[2] == 0)

    def test_bad_fraction(self):
        with pytest.raises(ParameterError):
            cutout(np.ones((4, 4)), 0.0, seed=0)


class TestGaussianNoise:
    def test_vanishing_sigma(self, rng):
        img = rng.random((3, 5, 5))
        np.testing.assert_allclose(gaussian_noise(img, 1e-12, seed=0), img, atol=1e-10)

    def test_unbiased_before_clipping(self):
        sigma = 0.3
        img = np.zeros((1000, 1000))
        out = gaussian_noise(img, sigma, seed=11, value_range=None)
        assert abs((out - img).mean()) < 5 * sigma / 1e3

    def test_clipped_and_deterministic(self, rng):
        img = rng.random((2, 6, 6))
        a = gaussian_noise(img, 2.0, seed=3)
        assert a.min() >= 0.0 and a.max() <= 1.0
        np.testing.assert_array_equal(a, gaussian_noise(img, 2.0, seed=3))

    def test_bad_sigma(self):
        with pytest.raises(ParameterError):
            gaussian_noise(np.zeros((2, 2)), 0.0, seed=0)


class TestGaussianBlur:
    @given(st.sampled_from([3, 5, 7, 9]), st.floats(0.05, 20.0))
    def test_kernel_normalized(self, size, sigma):
        k = gaussian_kernel(size, sigma)
        assert abs(k.sum() - 1.0) <= 1e-12
        np.testing.assert_array_equal(k, k.T)
        np.testing.assert_array_equal(k, k[::-1, ::-1])

    def test_constant_image(self):
        img = np.full((2, 7, 7), 0.375)
        np.testing.assert_allclose(gaussian_blur(img, 5, 1.5), img, rtol=0, atol=1e-15)

    def test_impulse_response(self):
        img = np.zeros((9, 9))
        img[4, 4] = 1.0
        k = gaussian_kernel(5, 1.5)
        out = gaussian_blur(img, 5, 1.5)
        np.testing.assert_array_equal(out[2:7, 2:7], k)
        assert np.count_nonzero(out) == 25

    def test_kernel_values(self):
        g = np.exp(-np.array([1.0, 0.0, 1.0]) / 2.0)
        np.testing.assert_allclose(gaussian_kernel(3, 1.0), np.outer(g, g) / np.outer(g, g).sum(), atol=1e-16)

    def test_bad_arguments(self):
        with pytest.raises(ParameterError):
            gaussian_kernel(4, 1.0)
        with pytest.raises(ParameterError):
            gaussian_blur(np.zeros((2, 2)), 5, 1.0)


class TestSobel:
    def test_constant_image(self):
        np.testing.assert_array_equal(sobel(np.full((5, 5), 0.7)), np.zeros((5, 5)))

    def test_hand_convolution(self):
        gray = np.array([[0.0, 0.0, 0.0], [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]])
        gx, gy = sobel_gradients(gray)
        assert gy[1, 1] == 8.0
        assert gx[1, 1] == 0.0

    def test_edge_symmetry(self):
        step = np.zeros((6, 6))
        step[:, 3:] = 1.0
        ref = sobel(step)
        np.testing.assert_array_equal(sobel(step.T), ref.T)

    def test_rescaled_into_unit_range(self, rng):
        img = (rng.random((3, 8, 8)) > 0.5).astype(float)
        out = sobel(img)
        assert out.shape == img.shape
        assert out.min() >= 0.0 and out.max() <= 1.0
        np.testing.assert_array_equal(out[0], out[2])

    def test_corner_value(self):
        # right column and bottom row lit: Gx = 4, Gy = 2 at the centre (hand convolution)
        img = np.zeros((3, 3))
        img[:, 2] = 1.0
        img[2, 1] = 1.0
        gx, gy = sobel_gradients(img)
        assert (gx[1, 1], gy[1, 1]) == (4.0, 2.0)
        assert sobel(img)[1, 1] == pytest.approx(math.sqrt(20.0) / (4 * math.sqrt(2.0)), abs=1e-15)


class TestSpecs:
    def test_defaults_and_unknown_kind(self):
        assert [s.kind for s in default_specs()] == list(KINDS)
        with pytest.raises(ParameterError):
            TransformSpec("solarize")
        with pytest.raises(ParameterError):
            TransformSpec("sobel", {"gain": 2})

    def test_round_trip(self):
        spec = TransformSpec("gaussian_blur", {"kernel_size": 3}, seed=4)
        assert TransformSpec.from_dict(spec.to_dict()) == spec
        assert spec.params == {"kernel_size": 3, "sigma": 1.5}

    @pytest.mark.parametrize("kind,params", [("cutout", {"side_fraction": 1.5}), ("permutation", {"k": 1}),
                                             ("rotation", {"quarter_turns": 5}), ("gaussian_noise", {"sigma": -1})])
    def test_parameter_ranges(self, kind, params):
        with pytest.raises(ParameterError):
            TransformSpec(kind, params)

    def test_apply_spec_records_details(self):
        rng = np.random.default_rng(0)
        out, detail = apply_spec(np.arange(16.0).reshape(4, 4) / 16, TransformSpec("rotation"), rng)
        assert detail["quarter_turns"] in (1, 2, 3)
        np.testing.assert_array_equal(out, rotate(np.arange(16.0).reshape(4, 4) / 16, detail["quarter_turns"]))


class TestPDBatch:
    def test_single_spec_rotation(self, rng):
        batch = rng.random((4, 1, 6, 6))
        pd = build_pd_batch(batch, [TransformSpec("rotation", {"quarter_turns": 2})], 1, seed=3)
        assert len(pd) == 4
        for j in range(4):
            np.testing.assert_array_equal(pd.images[j], rotate(batch[j], 2))
            assert pd.provenance(j)[0] == j

    def test_counts_and_determinism(self, rng):
        batch = rng.random((128, 1, 8, 8))
        a = build_pd_batch(batch, default_specs(), 2, seed=42)
        b = build_pd_batch(batch, default_specs(), 2, seed=42)
        assert len(a) == 256
        np.testing.assert_array_equal(a.images, b.images)
        np.testing.assert_array_equal(a.source_index, np.tile(np.arange(128), 2))
        assert a.details == b.details
        c = build_pd_batch(batch, default_specs(), 2, seed=43)
        assert not np.array_equal(a.images, c.images)

    def test_choice_histogram(self):
        counts = np.bincount(choose_specs(100_000, 6, seed=9), minlength=6) / 100_000
        assert np.all(np.abs(counts - 1 / 6) <= 0.01)

    def test_batched_deterministic_kinds_match_per_image(self, rng):
        batch = rng.random((40, 3, 8, 8))
        specs = [TransformSpec("gaussian_blur"), TransformSpec("sobel")]
        pd = build_pd_batch(batch, specs, 1, seed=5)
        for j in range(40):
            ref, _ = apply_spec(batch[j], specs[pd.spec_index[j]], None)
            np.testing.assert_array_equal(pd.images[j], ref)

    def test_unbounded_values_not_clipped(self, rng):
        batch = rng.standard_normal((16, 1, 4, 4)) * 5
        pd = build_pd_batch(batch, [TransformSpec("gaussian_noise")], 1, seed=1, value_range=None)
        assert pd.images.min() < 0 or pd.images.max() > 1

    def test_errors(self, rng):
        with pytest.raises(ParameterError):
            build_pd_batch(rng.random((2, 1, 4, 4)), [], 1)
        with pytest.raises(ParameterError):
            build_pd_batch(rng.random((2, 1, 4, 4)), default_specs(), 0)
