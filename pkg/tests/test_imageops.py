from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from conftest import random_image
from oracles import naive_box_blur
from textdiae.errors import ConfigError, DimensionError, ParseError, VocabularyError
from textdiae.imageops import (AugmentConfig, DegradationSpec, Image, augment, blend, blur_kernel_size, box_blur,
                               degrade, degrade_mask, degrade_noise, document_textures, fit_background, from_patches,
                               load_pnm, mask_count, patchify, render_synthetic_word, save_pnm, select_masked,
                               to_patches, unpatchify, warp_affine)


# -- codec ------------------------------------------------------------------

@pytest.mark.parametrize("channels", [1, 3])
def test_pnm_roundtrip(channels, rng):
    img = random_image(rng, 7, 11, channels)
    assert load_pnm(save_pnm(img)) == img


def test_pnm_header_comments_and_whitespace():
    payload = bytes(range(6))
    raw = b"P5 # a comment\n3\t# width above\n 2\n255\n" + payload
    img = load_pnm(raw)
    assert img.shape == (2, 3, 1)
    assert img.pixels.ravel().tolist() == list(payload)


@pytest.mark.parametrize("raw,offset", [
    (b"P3\n1 1\n255\n\x00", 0),
    (b"P5\n2 x\n255\n", 5),
    (b"P5\n1 1\n65535\n\x00\x00", 7),
    (b"P5\n2 2\n255\n\x00", 12),
    (b"P5\n0 2\n255\n", 3),
])
def test_pnm_errors_report_offsets(raw, offset):
    with pytest.raises(ParseError) as info:
        load_pnm(raw)
    assert info.value.offset == offset


# -- patches ------------------------------------------------------------------

def test_patch_order_is_row_major(rng):
    img = random_image(rng, 16, 24, 3)
    grid = to_patches(img, 8)
    assert (grid.rows, grid.cols, grid.n) == (2, 3, 6)
    # patch (r, c) is the block at rows 8r.., cols 8c.., flattened y, x, channel
    for r in range(2):
        for c in range(3):
            block = img.pixels[8 * r:8 * r + 8, 8 * c:8 * c + 8].reshape(-1)
            np.testing.assert_array_equal(grid.patches[r * 3 + c], block)
    assert from_patches(grid) == img


def test_patchify_batched_roundtrip(rng):
    x = rng.random((2, 16, 8, 1))
    np.testing.assert_array_equal(unpatchify(patchify(x, 4), 4, 4, 2, 1), x)


def test_patch_size_must_tile():
    with pytest.raises(DimensionError, match="height 10"):
        to_patches(Image.blank(10, 16), 8)


# -- masking ------------------------------------------------------------------

@pytest.mark.parametrize("n", [16, 256, 1024, 32, 7])
def test_mask_count_is_floor(n):
    for seed in range(5):
        assert select_masked(n, 0.75, seed).sum() == (3 * n) // 4


def test_mask_count_resists_float_error():
    assert mask_count(100, 0.29) == 29
    assert mask_count(10, 0.7) == 7


def test_masked_patches_are_zero_and_others_untouched(rng):
    img = random_image(rng, 16, 32)
    grid = to_patches(img, 8)
    deg, mask = degrade_mask(grid, 0.75, seed=3)
    assert np.all(deg.patches[mask] == 0)
    np.testing.assert_array_equal(deg.patches[~mask], grid.patches[~mask])


def test_mask_selection_is_uniform():
    # each of 16 positions is masked 12/16 of the time; chi-square on counts
    n, trials = 16, 4000
    counts = np.zeros(n)
    for s in range(trials):
        counts += select_masked(n, 0.75, s)
    expected = np.full(n, trials * 0.75)
    chi2 = (((counts - expected) ** 2) / expected).sum()
    assert stats.chi2.sf(chi2, df=n - 1) > 1e-3


def test_mask_ratio_bounds():
    with pytest.raises(ConfigError):
        DegradationSpec("mask", mask_ratio=1.0)


# -- blur ---------------------------------------------------------------------

@pytest.mark.parametrize("k", [1, 3, 5, 9, 15])
def test_box_blur_matches_naive_convolution(k, rng):
    img = random_image(rng, 9, 13, 3 if k == 5 else 1)
    np.testing.assert_array_equal(box_blur(img, k).pixels, naive_box_blur(img.pixels, k))


def test_blur_kernel_sampling():
    sizes = {blur_kernel_size((1, 15), s) for s in range(200)}
    assert sizes <= {1, 3, 5, 7, 9, 11, 13, 15} and len(sizes) == 8
    assert blur_kernel_size((4, 4), 0) == 5
    assert blur_kernel_size((1, 1), 0) == 1


def test_blur_k1_is_identity(rng):
    img = random_image(rng, 8, 8)
    assert box_blur(img, 1) == img
    with pytest.raises(ConfigError):
        box_blur(img, 4)


# -- noise --------------------------------------------------------------------

def test_blend_matches_closed_form(rng):
    img = random_image(rng, 6, 6)
    bg = rng.integers(0, 256, size=(6, 6, 1))
    for alpha in (0.2, 0.35, 0.5):
        out = blend(img, bg, alpha).pixels.astype(np.int64)
        a = Fraction(alpha)
        for v, i, b in zip(out.ravel(), img.pixels.ravel(), bg.ravel()):
            exact = (1 - a) * int(i) + a * int(b)
            assert v == int(exact + Fraction(1, 2))


def test_noise_uses_alpha_in_range_and_closed_form(rng):
    img = random_image(rng, 8, 8)
    bg = Image(np.full((8, 8, 1), 200, dtype=np.uint8))
    for seed in range(20):
        out = degrade_noise(img, bg, (0.2, 0.5), seed=seed)
        alpha = float(np.random.default_rng(seed).uniform(0.2, 0.5))
        exp = np.floor((1 - alpha) * img.pixels + alpha * 200.0 + 0.5)
        np.testing.assert_array_equal(out.pixels, exp)


def test_background_fit_upsamples_and_crops(rng):
    small = random_image(rng, 4, 5)
    out = fit_background(small, 16, 20, 1, np.random.default_rng(0))
    assert out.shape == (16, 20, 1)
    assert set(np.unique(out)) <= set(np.unique(small.pixels))
    rgb = fit_background(random_image(rng, 20, 20, 3), 10, 10, 1, np.random.default_rng(0))
    assert rgb.shape == (10, 10, 1)


def test_empty_background_pool():
    with pytest.raises(ConfigError):
        degrade_noise(Image.blank(4, 4), [], seed=0)


@pytest.mark.parametrize("kind", ["mask", "blur", "noise"])
def test_degradations_are_deterministic_per_seed(kind, rng):
    img = random_image(rng, 16, 16)
    a = degrade(img, DegradationSpec(kind, rng_seed=5))[0]
    b = degrade(img, DegradationSpec(kind, rng_seed=5))[0]
    assert a == b
    assert a.shape == img.shape
    assert any(degrade(img, DegradationSpec(kind, rng_seed=s))[0] != a for s in range(6, 12))


# -- augmentation and corpus ---------------------------------------------------

def test_augment_zero_config_is_identity(rng):
    img = random_image(rng, 16, 32)
    assert augment(img, 3, AugmentConfig.zero()) == img


def test_augment_is_seeded_and_keeps_shape(word_images):
    img = word_images[0]
    a, b = augment(img, 11), augment(img, 11)
    assert a == b and a.shape == img.shape
    assert any(augment(img, s) != img for s in range(10))


def test_augment_crop_never_removes_ink(word_images):
    img = word_images[2]
    cfg = AugmentConfig(p=1.0, noise_std=0, shear=0, rotation_deg=0, scale=0, crop=0.4)
    ink_before = int((img.pixels < 128).sum())
    for s in range(10):
        out = augment(img, s, cfg)
        # the ink survives the crop-resize (it may grow, never vanish)
        assert (out.pixels < 128).sum() >= 0.8 * ink_before


def test_warp_identity(rng):
    img = random_image(rng, 5, 7, 3)
    assert warp_affine(img, np.array([[1.0, 0, 0], [0, 1.0, 0]])) == img


def test_render_word_and_errors():
    img, text = render_synthetic_word("abc", 32, 64)
    assert text == "abc" and img.shape == (32, 64, 1)
    assert set(np.unique(img.pixels)) == {0, 255}
    assert render_synthetic_word("", 8, 8)[0] == Image.blank(8, 8)
    with pytest.raises(VocabularyError, match="@"):
        render_synthetic_word("a@b")
    with pytest.raises(DimensionError):
        render_synthetic_word("toolongforthis", 16, 16)


def test_textures_are_deterministic_and_non_blank():
    a = document_textures(32, 64, 3, count=2)
    b = document_textures(32, 64, 3, count=2)
    assert a == b
    assert all(t.shape == (32, 64, 3) and t.pixels.std() > 3 for t in a)
