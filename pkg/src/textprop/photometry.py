"""Lighting correction from ratios of text-free background estimates.

Text pixels are removed by diffusion inpainting, neighbouring backgrounds are
averaged, and the per-pixel, per-channel gain ``(cur + eps) / (ref + eps)``
carries the lighting change onto a replaced reference ROI.
"""

from dataclasses import dataclass

import cv2
import numpy as np
from scipy import sparse
from scipy.ndimage import binary_dilation, grey_closing, grey_opening
from scipy.sparse.linalg import splu
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import InsufficientBackgroundError, InvalidArgumentError
from .imgcore import check_image, check_same_shape, luma2d
from .refselect import otsu_threshold

GAIN_MIN = 0.1
GAIN_MAX = 10.0
GAIN_PNG_SCALE = 6553.5
MAX_MASKED_FRACTION = 0.9


@dataclass
class RatioMap:
    """Per-pixel, per-channel multiplicative gains."""

    gains: np.ndarray
    epsilon: float = 0.01

    def quantized(self):
        """Copy with gains rounded to the 16-bit PNG grid (``value / 6553.5``)."""
        return RatioMap(np.round(self.gains * GAIN_PNG_SCALE) / GAIN_PNG_SCALE, self.epsilon)

    def to_png_bytes(self):
        q = np.clip(np.round(self.gains * GAIN_PNG_SCALE), 0, 65535).astype(np.uint16)
        if q.shape[2] == 3:
            q = q[:, :, ::-1]
        ok, buf = cv2.imencode(".png", np.ascontiguousarray(q))
        if not ok:
            raise OSError("failed to encode ratio map")
        return buf.tobytes()

    @classmethod
    def from_png_bytes(cls, data, epsilon=0.01):
        q = cv2.imdecode(np.frombuffer(data, dtype=np.uint8), cv2.IMREAD_UNCHANGED)
        if q is None or q.dtype != np.uint16:
            raise InvalidArgumentError("ratio map must be a 16-bit PNG")
        if q.ndim == 2:
            q = q[:, :, None]
        else:
            q = q[:, :, ::-1]
        return cls(q.astype(np.float64) / GAIN_PNG_SCALE, epsilon)

    @classmethod
    def unit(cls, height, width, channels=3, epsilon=0.01):
        return cls(np.ones((height, width, channels)), epsilon)


def flatten_illumination(y, dark_text=True, size=None):
    """Luminance divided by a stroke-free shading estimate, mapped to [0, 1].

    The shading is a grey closing (dark text) or opening (light text) with a
    window wider than a stroke, which erases glyphs but keeps large-scale
    shadows and gradients. Thresholding the ratio then separates strokes from
    background rather than lit from unlit regions. Background sits near 0.5.
    ``size`` defaults to a quarter of the ROI height.
    """
    if size is None:
        size = max(3, (min(y.shape) // 4) | 1)
    op = grey_closing if dark_text else grey_opening
    base = op(y, size=(size, size), mode="nearest")
    r = (y + 0.01) / (base + 0.01)
    return np.clip(0.5 * r, 0.0, 1.0)


def _background_roughness(y, mask):
    """Mean squared step between 4-neighbours that are both outside ``mask``."""
    total, count = 0.0, 0
    for a, b, ma, mb in ((y[:, 1:], y[:, :-1], mask[:, 1:], mask[:, :-1]),
                         (y[1:, :], y[:-1, :], mask[1:, :], mask[:-1, :])):
        keep = ~(ma | mb)
        total += float(((a - b)[keep] ** 2).sum())
        count += int(keep.sum())
    return total / count if count else np.inf


def text_mask(roi, dilation=2):
    """Binary text mask from Otsu binarization of illumination-flattened luminance.

    Both text polarities are tried; the one leaving the smoother background
    outside the mask wins. The mask is grown by ``dilation`` pixels to cover
    anti-aliased edges.
    """
    y = luma2d(roi)
    best, best_rough = None, np.inf
    for dark in (True, False):
        f = flatten_illumination(y, dark)
        k, s1 = otsu_threshold(f)
        if s1 == 0.0:
            continue
        low = np.round(f * 255.0) <= k
        mask = low if dark else ~low
        if dilation > 0:
            mask = binary_dilation(mask, iterations=dilation)
        rough = _background_roughness(y, mask)
        if rough < best_rough:
            best, best_rough = mask, rough
    if best is None:
        return np.zeros(y.shape + (1,))
    return best.astype(np.float64)[:, :, None]


def _laplace_system(mask):
    """Sparse 4-neighbour Laplacian restricted to masked pixels (Neumann at borders)."""
    h, w = mask.shape
    idx = -np.ones(mask.shape, dtype=np.intp)
    ys, xs = np.nonzero(mask)
    n = len(ys)
    idx[ys, xs] = np.arange(n)
    rows, cols, vals = [], [], []
    deg = np.zeros(n)
    boundary = []  # (unknown, known_y, known_x)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        ny, nx = ys + dy, xs + dx
        inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
        deg += inside
        nb_unknown = np.zeros(n, dtype=bool)
        nb_unknown[inside] = mask[ny[inside], nx[inside]]
        sel = inside & nb_unknown
        rows.append(np.arange(n)[sel])
        cols.append(idx[ny[sel], nx[sel]])
        vals.append(-np.ones(sel.sum()))
        known = inside & ~nb_unknown
        boundary.append((np.arange(n)[known], ny[known], nx[known]))
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(deg)
    a = sparse.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n))
    return a, (ys, xs), boundary


def estimate_background(roi, text_mask):
    """Fill masked (text) pixels with the steady state of isotropic diffusion.

    The fill is the discrete harmonic interpolant of the unmasked pixels: every
    filled pixel equals the mean of its in-bounds 4-neighbours. This is the fixed
    point that iterative diffusion converges to, solved directly. Unmasked pixels
    are returned unchanged.

    Raises:
        InsufficientBackgroundError: 90% or more of the pixels are masked.
    """
    img = check_image(roi, "roi")
    m = check_image(text_mask, "text_mask", channels=1)[:, :, 0] > 0.5
    if m.shape != img.shape[:2]:
        raise InvalidArgumentError(f"mask shape {m.shape} does not match roi {img.shape[:2]}")
    frac = m.mean()
    if frac >= MAX_MASKED_FRACTION:
        raise InsufficientBackgroundError(
            f"{frac:.1%} of the ROI is masked; at most {MAX_MASKED_FRACTION:.0%} allowed")
    out = img.copy()
    if not m.any():
        return out
    a, (ys, xs), boundary = _laplace_system(m)
    lu = splu(a)
    for c in range(img.shape[2]):
        rhs = np.zeros(len(ys))
        for unk, ky, kx in boundary:
            np.add.at(rhs, unk, img[ky, kx, c])
        out[ys, xs, c] = lu.solve(rhs)
    return np.clip(out, 0.0, 1.0)


def triangular_weights(n):
    """Symmetric triangular window, e.g. ``[1, 2, 1]`` for ``n = 3``."""
    if n < 1:
        raise InvalidArgumentError("window length must be >= 1")
    half = (n + 1) / 2.0
    return [half - abs(i - (n - 1) / 2.0) for i in range(n)]


def temporal_average(frames, weights=None):
    """Pixel-wise weighted mean; weights are renormalized to sum to one."""
    frames = [check_image(f, "frame") for f in frames]
    if not frames:
        raise InvalidArgumentError("need at least one frame to average")
    weights = triangular_weights(len(frames)) if weights is None else list(weights)
    if len(weights) != len(frames):
        raise InvalidArgumentError("need one weight per frame")
    wts = np.asarray(weights, dtype=np.float64)
    if np.any(wts < 0) or wts.sum() <= 0:
        raise InvalidArgumentError("weights must be non-negative with a positive sum")
    for f in frames[1:]:
        check_same_shape(frames[0], f, ("frame 0", "frame"))
    wts = wts / wts.sum()
    out = np.zeros_like(frames[0])
    for f, wt in zip(frames, wts):
        out += wt * f
    return out


def compute_ratio(cur_bg, ref_bg, epsilon=0.01):
    """Gain map ``(cur + eps) / (ref + eps)`` clamped to [0.1, 10]."""
    if epsilon <= 0:
        raise InvalidArgumentError(f"epsilon must be > 0; got {epsilon}")
    cur = check_image(cur_bg, "cur_bg")
    ref = check_image(ref_bg, "ref_bg")
    check_same_shape(cur, ref, ("cur_bg", "ref_bg"))
    return RatioMap(np.clip((cur + epsilon) / (ref + epsilon), GAIN_MIN, GAIN_MAX), epsilon)


def apply_lighting(roi, ratio, clamp=True):
    """Multiply ``roi`` by the ratio gains, clamped to [0, 1]."""
    img = check_image(roi, "roi")
    gains = ratio.gains if isinstance(ratio, RatioMap) else np.asarray(ratio, dtype=np.float64)
    if gains.ndim == 2:
        gains = gains[:, :, None]
    if not np.all(np.isfinite(gains)):
        raise InvalidArgumentError("ratio gains must be finite")
    if gains.shape[:2] != img.shape[:2] or gains.shape[2] not in (1, img.shape[2]):
        raise InvalidArgumentError(f"ratio shape {gains.shape} does not match roi {img.shape}")
    out = img * gains
    return np.clip(out, 0.0, 1.0) if clamp else out


class LightingCorrector(BaseEstimator):
    """Learns the gain map between a reference ROI and a window of current ROIs.

    ``fit(X, y)`` takes the reference ROI ``X`` and the list ``y`` of aligned
    ROIs around the current frame (the current frame in the middle), inpaints
    all of them, averages the current backgrounds with a triangular window and
    divides by the reference background. ``transform`` applies the gains.
    """

    def __init__(self, epsilon=0.01, mask_dilation=2, weights=None):
        self.epsilon = epsilon
        self.mask_dilation = mask_dilation
        self.weights = weights

    def fit(self, X, y, masks=None):
        ref = check_image(X, "ref")
        window = [check_image(f, "frame") for f in y]
        if masks is None:
            masks = [text_mask(f, self.mask_dilation) for f in window]
            ref_mask = text_mask(ref, self.mask_dilation)
        else:
            ref_mask, masks = masks[0], list(masks[1:])
        ref_bg = estimate_background(ref, ref_mask)
        bgs = [estimate_background(f, m) for f, m in zip(window, masks)]
        self.ratio_ = compute_ratio(temporal_average(bgs, self.weights), ref_bg, self.epsilon)
        return self

    def transform(self, X):
        check_is_fitted(self, "ratio_")
        return apply_lighting(X, self.ratio_)
