"""Reconstruction, temporal-stability and blur-transfer metrics."""

import math

import numpy as np
from scipy.signal import correlate

from .blur import wrap_angle_diff
from .exceptions import InvalidArgumentError, UndefinedCorrelationError
from .imgcore import check_image, check_same_shape, luma2d
from .refselect import sharpness_score

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _pair(a, b):
    a = check_image(a, "a")
    b = check_image(b, "b")
    check_same_shape(a, b)
    return a, b


def mse(a, b):
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b):
    """PSNR in dB for [0, 1] data; ``inf`` for identical images."""
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def _gaussian_window():
    ax = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(ax ** 2) / (2.0 * SSIM_SIGMA ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_map(a, b):
    """Local SSIM on luminance over every position where the 11x11 window fits."""
    a, b = _pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise InvalidArgumentError(f"images must be at least {SSIM_WINDOW}px on each side")
    x, y = luma2d(a), luma2d(b)
    win = _gaussian_window()

    def filt(z):
        return correlate(z, win, mode="valid")

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim(a, b, mask=None):
    """Mean SSIM; with ``mask`` only windows centred on masked pixels count."""
    m = ssim_map(a, b)
    if mask is None:
        return float(m.mean())
    r = SSIM_WINDOW // 2
    sel = np.asarray(mask, dtype=bool)
    if sel.ndim == 3:
        sel = sel[:, :, 0]
    sel = sel[r:sel.shape[0] - r, r:sel.shape[1] - r]
    if not sel.any():
        raise InvalidArgumentError("mask selects no valid SSIM position")
    return float(m[sel].mean())


def _as_trajectory(traj):
    """``(T, 4, 2)`` array of present samples; absent entries are ``None`` or NaN."""
    present = []
    for q in traj:
        if q is None:
            continue
        arr = np.asarray(q, dtype=np.float64)
        if arr.shape != (4, 2):
            raise InvalidArgumentError(f"trajectory entries must be 4x2 quads; got {arr.shape}")
        if np.isnan(arr).any():
            continue
        present.append(arr)
    return np.array(present).reshape(-1, 4, 2)


def moving_average(x, window):
    """Centred moving average along axis 0, shrinking symmetrically near the ends."""
    n = len(x)
    half = window // 2
    out = np.empty_like(x, dtype=np.float64)
    for t in range(n):
        k = min(half, t, n - 1 - t)
        out[t] = x[t - k:t + k + 1].mean(axis=0)
    return out


def jitter(traj, lowpass_window=5):
    """RMS high-pass vertex motion in pixels, averaged over the four vertices."""
    q = _as_trajectory(traj)
    if lowpass_window < 1:
        raise InvalidArgumentError("lowpass_window must be >= 1")
    if len(q) < lowpass_window:
        raise InvalidArgumentError(
            f"trajectory has {len(q)} samples; need at least {lowpass_window}")
    hp = q - moving_average(q, lowpass_window)
    per_vertex = np.sqrt(np.mean(np.sum(hp ** 2, axis=2), axis=0))
    return float(per_vertex.mean())


def pearson(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("correlation undefined for a zero-variance series")
    dx, dy = x - x.mean(), y - y.mean()
    den = math.sqrt(float((dx * dx).sum()) * float((dy * dy).sum()))
    if den == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a zero-variance series")
    return float(np.clip((dx * dy).sum() / den, -1.0, 1.0))


def blur_transfer_correlation(orig_rois, altered_rois):
    """Pearson correlation of the sharpness series of two ROI sequences."""
    orig_rois, altered_rois = list(orig_rois), list(altered_rois)
    if len(orig_rois) != len(altered_rois):
        raise InvalidArgumentError("ROI lists differ in length")
    if len(orig_rois) < 3:
        raise InvalidArgumentError("need at least 3 ROIs")
    a = [sharpness_score(r) for r in orig_rois]
    b = [sharpness_score(r) for r in altered_rois]
    return pearson(a, b)


def blur_param_errors(true, est):
    """Absolute errors ``(sigma_x, sigma_y, rho, w)`` between two BlurParams.

    The estimate is compared in whichever of its two equivalent forms (as is,
    or with axes swapped and angle turned by 90 degrees) has the smaller width
    error, since both describe the same kernel. The angle error is wrapped on
    the 180-degree circle.
    """
    a = true.as_array()
    best = None
    for cand in (est, est.swapped()):
        b = cand.as_array()
        e = np.abs(a - b)
        e[2] = abs(float(wrap_angle_diff(a[2], b[2])))
        if best is None or e[0] + e[1] < best[0] + best[1] - 1e-12:
            best = e
    return best
