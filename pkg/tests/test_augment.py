import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from detfuse.augment import (
    AugmentPipeline,
    AugmentSpec,
    apply_op,
    apply_pipeline,
    blur,
    clahe,
    fog,
    gaussian_noise,
    hflip,
    luminance,
    mixed_space_enhance,
    resize,
    salt_pepper,
    vflip,
)
from detfuse.dataio import read_image
from detfuse.geometry import BBox

from conftest import FIXTURES, random_image


def gray(h, w, value):
    return np.full((h, w, 3), value, dtype=np.uint8)


def gray_from(channel):
    return np.repeat(np.asarray(channel, dtype=np.uint8)[..., None], 3, axis=2)


def scalar_equalization_lut(pixels, cliplimit):
    """Clipped histogram equalization of one tile, one bin at a time."""
    n = len(pixels)
    hist = [0] * 256
    for p in pixels:
        hist[p] += 1
    limit = max(int(cliplimit * n / 256), 1)
    excess = 0
    for v in range(256):
        if hist[v] > limit:
            excess += hist[v] - limit
            hist[v] = limit
    for v in range(256):
        hist[v] += excess // 256
    residual = excess % 256
    if residual:
        step = max(256 // residual, 1)
        v = 0
        while residual and v < 256:
            hist[v] += 1
            residual -= 1
            v += step
    lut, total = [], 0
    for v in range(256):
        total += hist[v]
        lut.append(min(255, (510 * total + n) // (2 * n)))
    return lut


class TestClahe:
    def test_constant_gray_stays_constant(self):
        # 32x32 under 8x8 tiles: 16-pixel tiles, clip limit 1.  The 15 clipped
        # counts go one each to bins 0, 17, ..., 238; eight of those lie at or
        # below 128, so cdf(128) = 9 and the mapping is (9*510 + 16) // 32 = 143.
        out = clahe(gray(32, 32, 128))
        assert np.unique(out).tolist() == [143]

    def test_flat_histogram_fixed_point(self):
        rng = np.random.default_rng(0)
        lum = np.empty((128, 128), dtype=np.uint8)
        for ty in range(8):
            for tx in range(8):
                lum[ty * 16:(ty + 1) * 16, tx * 16:(tx + 1) * 16] = rng.permutation(256).reshape(16, 16)
        img = gray_from(lum)
        diff = clahe(img).astype(int) - img.astype(int)
        assert np.abs(diff).max() <= 1

    def test_ramp_contrast_increases(self):
        img = read_image(FIXTURES / "ramp.png")
        assert img.shape == (64, 64, 3) and img.min() == 100 and img.max() == 140
        assert luminance(clahe(img)).std() > luminance(img).std()

    def test_two_tiles_match_scalar_oracle(self):
        rng = np.random.default_rng(5)
        left = rng.integers(20, 90, size=(32, 32))
        right = np.clip(rng.normal(170, 20, size=(32, 32)), 0, 255).astype(int)
        lum = np.hstack([left, right]).astype(np.uint8)
        out = clahe(gray_from(lum), cliplimit=4, tiles=(1, 2))[..., 0]
        lut_l = scalar_equalization_lut(lum[:, :32].ravel().tolist(), 4)
        lut_r = scalar_equalization_lut(lum[:, 32:].ravel().tolist(), 4)
        assert lut_l != lut_r
        # outer half of each tile uses only that tile's mapping
        assert out[:, :16].tolist() == [[lut_l[v] for v in row] for row in lum[:, :16].tolist()]
        assert out[:, 48:].tolist() == [[lut_r[v] for v in row] for row in lum[:, 48:].tolist()]
        # inner half blends the two mappings
        for y, x in [(0, 16), (5, 31), (9, 32), (31, 47)]:
            f = x / 32 - 0.5
            a = f - np.floor(f)
            v = lum[y, x]
            expected = np.floor(lut_l[v] * (1 - a) + lut_r[v] * a + 0.5)
            assert out[y, x] == expected

    def test_small_image_falls_back_to_single_tile(self):
        rng = np.random.default_rng(1)
        lum = rng.integers(0, 256, size=(5, 6)).astype(np.uint8)
        out = clahe(gray_from(lum), cliplimit=8, tiles=(8, 8))[..., 0]
        lut = scalar_equalization_lut(lum.ravel().tolist(), 8)
        assert out.tolist() == [[lut[v] for v in row] for row in lum.tolist()]

    def test_uneven_dimensions(self):
        img = random_image(np.random.default_rng(2), 37, 53)
        out = clahe(img)
        assert out.shape == img.shape and out.dtype == np.uint8

    def test_chroma_shift_is_uniform(self):
        img = random_image(np.random.default_rng(3), 32, 32)
        out = clahe(img).astype(int)
        d = out - img.astype(int)
        unclipped = (out > 0).all(axis=2) & (out < 255).all(axis=2)
        spread = d.max(axis=2) - d.min(axis=2)
        assert spread[unclipped].max() <= 1

    def test_rejects_small_cliplimit(self):
        with pytest.raises(ValueError):
            clahe(gray(8, 8, 1), cliplimit=0.5)


class TestMixedSpace:
    def test_constant_unchanged(self):
        img = gray(12, 9, 77)
        np.testing.assert_array_equal(mixed_space_enhance(img), img)

    def test_bright_pixel_hand_values(self):
        img = gray(5, 5, 50)
        img[2, 2] = 200
        out = mixed_space_enhance(img)[..., 0]
        # centre: L = 9*200 - 600 = 1200, mask = 1400/6375, so far above 255
        assert out[2, 2] == 255
        # ring (1, 2): L = 9*50 - 600 = -150; 5x5 replicate window sums to 1400
        assert out[1, 2] == 17
        assert (out[1:4, 1:4][np.arange(3) != 1].ravel() < 50).all()

    def test_step_edge_gradient_grows(self):
        chan = np.full((16, 16), 60, dtype=np.uint8)
        chan[:, 8:] = 180
        img = gray_from(chan)
        out = mixed_space_enhance(img)

        def sobel_x(c):
            c = c.astype(float)
            return np.abs((c[:-2, 2:] + 2 * c[1:-1, 2:] + c[2:, 2:]) - (c[:-2, :-2] + 2 * c[1:-1, :-2] + c[2:, :-2]))

        before, after = sobel_x(img[..., 0]), sobel_x(out[..., 0])
        # columns 7 and 8 of the image are columns 6 and 7 of the Sobel map
        assert (after[:, 6:8] > before[:, 6:8]).all()

    def test_rejects_even_kernel(self):
        with pytest.raises(ValueError):
            mixed_space_enhance(gray(4, 4, 0), kernelsize=4)


class TestGaussianNoise:
    def test_zero_std_is_identity(self):
        img = random_image(np.random.default_rng(0), 20, 30)
        np.testing.assert_array_equal(gaussian_noise(img, std=0, seed=1), img)

    def test_empirical_std(self):
        out = gaussian_noise(gray(256, 256, 128), seed=42)
        assert abs((out / 255.0).std() - 0.2) <= 0.02

    def test_deterministic(self):
        img = random_image(np.random.default_rng(0), 20, 30)
        a = gaussian_noise(img, seed=9, image_id="x")
        assert a.tobytes() == gaussian_noise(img, seed=9, image_id="x").tobytes()
        assert a.tobytes() != gaussian_noise(img, seed=10, image_id="x").tobytes()
        assert a.tobytes() != gaussian_noise(img, seed=9, image_id="y").tobytes()

    def test_negative_std(self):
        with pytest.raises(ValueError):
            gaussian_noise(gray(2, 2, 0), std=-1, seed=0)


class TestSaltPepper:
    def test_zero_is_identity(self):
        img = gray(10, 10, 99)
        np.testing.assert_array_equal(salt_pepper(img, 0, seed=1), img)

    def test_exhaustive(self):
        out = salt_pepper(gray(10, 12, 99), 120, seed=1)
        assert all(tuple(p) in ((0, 0, 0), (255, 255, 255)) for p in out.reshape(-1, 3).tolist())

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**63), st.integers(0, 600))
    def test_exact_count(self, seed, number):
        img = gray(40, 30, 128)
        out = salt_pepper(img, number, seed=seed)
        changed = (out != img).any(axis=2)
        assert changed.sum() == number
        assert ((out[changed] == 0).all(axis=1) | (out[changed] == 255).all(axis=1)).all()

    def test_too_many(self):
        with pytest.raises(ValueError):
            salt_pepper(gray(4, 4, 1), 17, seed=0)

    def test_per_megapixel(self):
        out = salt_pepper(gray(500, 400, 128), 500, seed=0, per_megapixel=True)
        assert (out != 128).any(axis=2).sum() == 100


class TestFog:
    def test_no_fog_limit(self):
        img = random_image(np.random.default_rng(0), 30, 40)
        assert np.abs(fog(img, concentration=1e-9, seed=1).astype(int) - img).max() <= 1

    def test_full_fog_limit(self):
        img = random_image(np.random.default_rng(0), 30, 40)
        out = fog(img, concentration=1e3, seed=1)
        assert np.abs(out.astype(float) - 0.4 * 255).max() <= 1

    def test_black_image_mean(self):
        m = luminance(fog(gray(64, 64, 0), seed=3)).mean()
        assert 0 < m < 0.4 * 255

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32), st.floats(0.0, 1.0), st.floats(1e-4, 2.0))
    def test_convex_combination(self, seed, brightness, concentration):
        img = random_image(np.random.default_rng(seed), 16, 16).astype(int)
        out = fog(img.astype(np.uint8), brightness, concentration, seed=seed).astype(int)
        a = brightness * 255
        assert (out >= np.minimum(img, a) - 1).all() and (out <= np.maximum(img, a) + 1).all()

    def test_spatially_varying_and_constant_mode(self):
        black = gray(64, 64, 0)
        assert np.unique(fog(black, concentration=0.2, seed=1)).size > 1
        assert np.unique(fog(black, concentration=0.2, seed=1, depth="constant")).size == 1

    def test_deterministic(self):
        img = random_image(np.random.default_rng(0), 30, 40)
        assert fog(img, seed=5).tobytes() == fog(img, seed=5).tobytes()

    def test_bad_params(self):
        with pytest.raises(ValueError):
            fog(gray(2, 2, 0), concentration=0, seed=0)
        with pytest.raises(ValueError):
            fog(gray(2, 2, 0), brightness=1.5, seed=0)


class TestBlur:
    def test_constant_unchanged(self):
        img = gray(9, 11, 201)
        np.testing.assert_array_equal(blur(img), img)

    def test_one_by_one_identity(self):
        img = random_image(np.random.default_rng(0), 9, 11)
        np.testing.assert_array_equal(blur(img, (1, 1)), img)

    def test_impulse_plateau(self):
        img = gray(13, 13, 0)
        img[6, 6] = 255
        out = blur(img, (6, 6))[..., 0]
        # window for output y covers input rows y-3 .. y+2
        expected = np.zeros((13, 13), dtype=np.uint8)
        expected[4:10, 4:10] = 7  # round(255 / 36)
        np.testing.assert_array_equal(out, expected)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32), st.integers(1, 7), st.integers(1, 7))
    def test_mean_preserved_with_constant_border(self, seed, kh, kw):
        img = gray(40, 40, 90)
        img[8:32, 8:32] = random_image(np.random.default_rng(seed), 24, 24)
        out = blur(img, (kh, kw))
        assert abs(luminance(out).mean() - luminance(img).mean()) <= 1

    def test_matches_direct_average(self):
        rng = np.random.default_rng(4)
        img = random_image(rng, 10, 12)
        out = blur(img, (3, 4))
        pad = np.pad(img.astype(int), ((1, 1), (2, 1), (0, 0)), mode="edge")
        for y, x in [(0, 0), (4, 7), (9, 11)]:
            window = pad[y:y + 3, x:x + 4]
            expected = np.floor(window.sum(axis=(0, 1)) / 12 + 0.5)
            np.testing.assert_array_equal(out[y, x], expected)


class TestGeometric:
    def test_flips(self):
        img = random_image(np.random.default_rng(0), 5, 7)
        np.testing.assert_array_equal(hflip(img)[:, 0], img[:, -1])
        np.testing.assert_array_equal(vflip(img)[0], img[-1])

    def test_resize_dimensions(self):
        img = random_image(np.random.default_rng(0), 5, 7)
        assert resize(img, 2.0).shape == (10, 14, 3)
        assert resize(img, width=3, height=4).shape == (4, 3, 3)


class TestAugmentSpec:
    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            AugmentSpec("mixup")

    def test_unknown_param(self):
        with pytest.raises(ValueError):
            AugmentSpec("blur", {"sigma": 1})

    @pytest.mark.parametrize(
        "kind,params",
        [("clahe", {"cliplimit": 0.5}), ("fog", {"concentration": 0}), ("salt_pepper", {"number": -1})],
    )
    def test_out_of_range(self, kind, params):
        with pytest.raises(ValueError):
            AugmentSpec(kind, params)

    def test_stochastic_requires_seed(self):
        with pytest.raises(ValueError):
            apply_op(gray(4, 4, 0), AugmentSpec("gaussian_noise"))

    def test_round_trip(self):
        pipe = AugmentPipeline((AugmentSpec("blur", {"kernelsize": (3, 5)}), AugmentSpec("fog", {}, seed=4)))
        assert AugmentPipeline.from_list(pipe.to_list()).to_list() == pipe.to_list()

    def test_empty_pipeline(self):
        with pytest.raises(ValueError):
            AugmentPipeline(())


class TestApplyPipeline:
    BOXES = [BBox(2, 3, 10, 12, 1, 0.8), BBox(0, 0, 20, 16, 0, 1.0)]

    def test_double_hflip(self):
        img = random_image(np.random.default_rng(0), 16, 20)
        out, boxes = apply_pipeline(img, self.BOXES, [AugmentSpec("hflip"), AugmentSpec("hflip")])
        np.testing.assert_array_equal(out, img)
        assert boxes == self.BOXES

    def test_hflip_boxes(self):
        img = random_image(np.random.default_rng(0), 16, 20)
        _, boxes = apply_pipeline(img, self.BOXES[:1], [AugmentSpec("hflip")])
        assert boxes[0].coords == (10, 3, 18, 12)

    def test_resize_doubles_boxes(self):
        img = random_image(np.random.default_rng(0), 16, 20)
        out, boxes = apply_pipeline(img, self.BOXES, [AugmentSpec("resize", {"scale": 2.0})])
        assert out.shape == (32, 40, 3)
        assert [b.coords for b in boxes] == [tuple(2 * v for v in b.coords) for b in self.BOXES]

    def test_photometric_keeps_boxes(self):
        img = random_image(np.random.default_rng(0), 16, 20)
        out, boxes = apply_pipeline(img, self.BOXES, [AugmentSpec("clahe"), AugmentSpec("gaussian_noise")], seed=3)
        assert boxes == self.BOXES and out.shape == img.shape

    @pytest.mark.parametrize("kind", ["clahe", "mixed_space", "gaussian_noise", "salt_pepper", "fog", "blur"])
    def test_photometric_keeps_dimensions(self, kind):
        img = random_image(np.random.default_rng(1), 33, 47)
        params = {"number": 20} if kind == "salt_pepper" else {}
        out, boxes = apply_pipeline(img, self.BOXES, [AugmentSpec(kind, params)], seed=0)
        assert out.shape == img.shape and boxes == self.BOXES

    def test_deterministic_and_seed_sensitive(self):
        img = random_image(np.random.default_rng(0), 16, 20)
        pipe = [AugmentSpec("gaussian_noise"), AugmentSpec("salt_pepper", {"number": 30}), AugmentSpec("fog")]
        a, _ = apply_pipeline(img, [], pipe, seed=7, image_id="im")
        b, _ = apply_pipeline(img, [], pipe, seed=7, image_id="im")
        c, _ = apply_pipeline(img, [], pipe, seed=8, image_id="im")
        assert a.tobytes() == b.tobytes() != c.tobytes()

    def test_box_outside_image(self):
        with pytest.raises(ValueError):
            apply_pipeline(gray(10, 10, 0), [BBox(0, 0, 11, 5)], [AugmentSpec("hflip")])
