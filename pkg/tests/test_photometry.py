import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from textprop.exceptions import InsufficientBackgroundError, InvalidArgumentError
from textprop.imgcore import luma2d
from textprop.photometry import (GAIN_PNG_SCALE, LightingCorrector, RatioMap, apply_lighting,
                                 compute_ratio, estimate_background, temporal_average, text_mask,
                                 triangular_weights)
from textprop.synth import render_text_roi


def jacobi_fill(img, mask, tol=1e-9, max_iter=200000):
    """Oracle: iterative 4-neighbour diffusion of the masked pixels with clamped borders."""
    out = img.copy()
    m = mask[:, :, 0] > 0.5
    out[m] = img[~m].mean(axis=0)
    h, w = m.shape
    for _ in range(max_iter):
        acc = np.zeros_like(out)
        cnt = np.zeros((h, w, 1))
        acc[1:] += out[:-1]
        cnt[1:] += 1
        acc[:-1] += out[1:]
        cnt[:-1] += 1
        acc[:, 1:] += out[:, :-1]
        cnt[:, 1:] += 1
        acc[:, :-1] += out[:, 1:]
        cnt[:, :-1] += 1
        new = np.where(m[:, :, None], acc / cnt, img)
        change = np.abs(new - out).max()
        out = new
        if change < tol:
            break
    return out


def shadow(img, factor=0.3):
    out = img.copy()
    out[:, : img.shape[1] // 2] *= factor
    return out


@pytest.fixture(scope="module")
def hello():
    return render_text_roi("HELLO", {"bg": {"kind": "constant", "color": [0.8, 0.8, 0.8]}})


# -- background estimation ---------------------------------------------------

def test_constant_background_fills_constant(rng):
    img = np.full((20, 30, 3), 0.42)
    mask = (rng.random((20, 30, 1)) < 0.5).astype(float)
    np.testing.assert_allclose(estimate_background(img, mask), 0.42, atol=1e-12)


def test_gradient_background_recovered_under_centered_mask():
    xs = np.linspace(0.2, 0.9, 64)
    img = np.repeat(np.tile(xs, (24, 1))[:, :, None], 3, axis=2)
    truth = img.copy()
    img[8:16, 20:44] = 0.05  # "text"
    mask = np.zeros((24, 64, 1))
    mask[8:16, 20:44] = 1.0
    assert np.abs(estimate_background(img, mask) - truth).max() <= 0.05


def test_matches_iterative_diffusion_oracle(rng):
    img = rng.random((14, 18, 3))
    mask = np.zeros((14, 18, 1))
    mask[3:9, 4:15] = 1.0
    mask[0:2, 0:3] = 1.0  # touching the border
    np.testing.assert_allclose(estimate_background(img, mask), jacobi_fill(img, mask), atol=1e-6)


def test_unmasked_pixels_unchanged(hello):
    roi, mask = hello
    out = estimate_background(roi, mask)
    keep = mask[:, :, 0] < 0.5
    np.testing.assert_array_equal(out[keep], roi[keep])


def test_mostly_masked_rejected():
    mask = np.ones((20, 20, 1))
    mask[:2, :] = 0.0  # 90% masked
    with pytest.raises(InsufficientBackgroundError):
        estimate_background(np.zeros((20, 20, 3)), mask)
    mask = np.ones((20, 20, 1))
    mask[0, :] = 0.0  # 95% masked
    with pytest.raises(InsufficientBackgroundError):
        estimate_background(np.zeros((20, 20, 3)), mask)


def test_mask_shape_mismatch_rejected():
    with pytest.raises(InvalidArgumentError):
        estimate_background(np.zeros((10, 10, 3)), np.zeros((10, 9, 1)))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_background_estimate_idempotent(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((16, 20, 3))
    mask = (rng.random((16, 20, 1)) < 0.4).astype(float)
    once = estimate_background(img, mask)
    assert np.abs(estimate_background(once, mask) - once).max() <= 1e-4


# -- text mask ---------------------------------------------------------------

@pytest.mark.parametrize("style", [
    {},
    {"fg": (0.95, 0.95, 0.9), "bg": {"kind": "constant", "color": [0.15, 0.2, 0.3]}},
    {"bg": {"kind": "linear-gradient", "start": [0.95, 0.9, 0.8], "end": [0.5, 0.5, 0.6]}},
])
def test_text_mask_covers_glyphs(style):
    roi, truth = render_text_roi("SALE 50", style)
    mask = text_mask(roi, dilation=0) > 0.5
    t = truth > 0.5
    assert (mask & t).sum() / t.sum() >= 0.95
    assert (mask & ~t).sum() / (~t).sum() <= 0.05


def test_text_mask_survives_shadow(hello):
    roi, truth = hello
    mask = text_mask(shadow(roi), dilation=2) > 0.5
    assert (mask & (truth > 0.5)).sum() / (truth > 0.5).sum() >= 0.95


def test_text_mask_blank_roi_is_empty():
    assert text_mask(np.full((20, 40, 3), 0.5)).sum() == 0


# -- temporal averaging ------------------------------------------------------

def test_triangular_weights():
    assert triangular_weights(3) == [1.0, 2.0, 1.0]
    assert triangular_weights(1) == [1.0]


def test_identical_frames_average_to_frame(rng):
    f = rng.random((5, 6, 3))
    np.testing.assert_allclose(temporal_average([f, f, f], [0.2, 5.0, 1.0]), f, atol=1e-15)


def test_one_zero_weights_select_first(rng):
    a, b = rng.random((5, 6, 3)), rng.random((5, 6, 3))
    np.testing.assert_array_equal(temporal_average([a, b], [1, 0]), a)


def test_triangular_average_matches_scalar_oracle(rng):
    fs = [rng.random((4, 5, 3)) for _ in range(3)]
    out = temporal_average(fs, [1, 2, 1])
    for y in range(4):
        for x in range(5):
            for c in range(3):
                expected = (fs[0][y, x, c] + 2 * fs[1][y, x, c] + fs[2][y, x, c]) / 4.0
                assert out[y, x, c] == pytest.approx(expected, abs=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.permutations(range(4)))
def test_average_permutation_equivariant(seed, perm):
    rng = np.random.default_rng(seed)
    fs = [rng.random((3, 4, 3)) for _ in range(4)]
    ws = list(rng.random(4) + 0.1)
    np.testing.assert_allclose(temporal_average([fs[i] for i in perm], [ws[i] for i in perm]),
                               temporal_average(fs, ws), atol=1e-14)


@pytest.mark.parametrize("frames,weights", [([], None), ([np.zeros((2, 2, 3))], [-1.0]),
                                            ([np.zeros((2, 2, 3))], [0.0]),
                                            ([np.zeros((2, 2, 3))] * 2, [1.0])])
def test_average_rejects(frames, weights):
    with pytest.raises(InvalidArgumentError):
        temporal_average(frames, weights)


# -- ratio and application ---------------------------------------------------

def test_equal_backgrounds_give_unit_gain(rng):
    b = rng.random((6, 7, 3))
    assert np.all(compute_ratio(b, b).gains == 1.0)


def test_half_brightness_formula():
    ref = np.full((4, 4, 3), 0.8)
    g = compute_ratio(0.5 * ref, ref, 0.01).gains
    np.testing.assert_allclose(g, 0.41 / 0.81)
    assert g[0, 0, 0] == pytest.approx(0.5062, abs=1e-4)


@pytest.mark.parametrize("eps", [0.0, -0.1])
def test_nonpositive_epsilon_rejected(eps):
    with pytest.raises(InvalidArgumentError):
        compute_ratio(np.ones((2, 2, 3)), np.ones((2, 2, 3)), eps)


def test_gains_clamped():
    g = compute_ratio(np.zeros((2, 2, 3)), np.ones((2, 2, 3)), 0.01).gains
    assert np.all(g == 0.1)


def test_half_shadow_gain_map(hello):
    roi, _ = hello
    shadowed = shadow(roi)
    ratio = compute_ratio(estimate_background(shadowed, text_mask(shadowed)),
                          estimate_background(roi, text_mask(roi)), 0.01)
    g = luma2d(ratio.gains)
    # scalar recomputation on the known plain backgrounds, 16 px clear of the diffused seam
    assert np.abs(g[:, :112] - (0.8 * 0.3 + 0.01) / 0.81).max() < 0.02
    assert np.abs(g[:, 144:] - 1.0).max() < 0.02


def test_unit_ratio_leaves_image(rng):
    img = rng.random((5, 5, 3))
    np.testing.assert_array_equal(apply_lighting(img, RatioMap.unit(5, 5)), img)


def test_half_ratio_halves(rng):
    img = rng.random((5, 5, 3)) * 0.9
    np.testing.assert_array_equal(apply_lighting(img, RatioMap(np.full((5, 5, 3), 0.5))), img * 0.5)


def test_apply_shape_mismatch_rejected():
    with pytest.raises(InvalidArgumentError):
        apply_lighting(np.zeros((5, 5, 3)), RatioMap.unit(5, 4))


def test_shadow_transfers_to_replaced_text(hello):
    roi, _ = hello
    shadowed = shadow(roi)
    replaced, new_mask = render_text_roi("WORLD", {"bg": {"kind": "constant", "color": [0.8, 0.8, 0.8]}})
    corrector = LightingCorrector().fit(roi, [shadowed])
    out = corrector.transform(replaced)
    truth = shadow(replaced)
    keep = new_mask[:, :, 0] < 0.5
    assert np.abs(luma2d(out)[keep] - luma2d(truth)[keep]).mean() <= 0.03


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.1, 10.0))
def test_lighting_model_consistency(seed, g_lo):
    rng = np.random.default_rng(seed)
    eps = 0.01
    b = rng.uniform(0.05, 1.0, (6, 7, 3))
    g = np.exp(rng.uniform(np.log(g_lo), np.log(10.0), (6, 7, 3)))
    got = compute_ratio(g * b, b, eps).gains
    recon = apply_lighting(b, got, clamp=False)
    # exact residual of the guarded ratio: eps * (1 - g) / (b + eps)
    np.testing.assert_allclose(got - g, eps * (1 - g) / (b + eps), atol=1e-12)
    bound = eps / (b.min() + eps)
    scale = np.maximum(g, 1.0)
    assert np.all(np.abs(got - g) / scale <= bound + 1e-12)
    assert np.all(np.abs(recon - g * b) / (scale * b) <= bound + 1e-12)
    # the plain relative bound holds whenever g >= 0.5
    hi = g >= 0.5
    assert np.all((np.abs(got - g) / g)[hi] <= bound + 1e-12)
    assert np.all((np.abs(recon - g * b) / (g * b))[hi] <= bound + 1e-12)


# -- serialization and estimator ---------------------------------------------

def test_ratio_png_roundtrip(rng):
    r = RatioMap(rng.uniform(0.1, 10.0, (8, 9, 3)))
    back = RatioMap.from_png_bytes(r.to_png_bytes())
    np.testing.assert_array_equal(back.gains, r.quantized().gains)
    assert np.abs(back.gains - r.gains).max() <= 0.5 / GAIN_PNG_SCALE + 1e-12


def test_ratio_png_rejects_8bit():
    import cv2
    ok, buf = cv2.imencode(".png", np.zeros((3, 3), np.uint8))
    with pytest.raises(InvalidArgumentError):
        RatioMap.from_png_bytes(buf.tobytes())


def test_lighting_corrector_estimator(hello):
    roi, mask = hello
    est = LightingCorrector(epsilon=0.02)
    assert clone(est).get_params() == est.get_params()
    est.fit(roi, [roi, roi, roi], masks=[mask] * 4)
    np.testing.assert_allclose(est.ratio_.gains, 1.0)
    np.testing.assert_array_equal(est.transform(roi), roi)
