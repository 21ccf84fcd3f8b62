"""Reference frame selection from OCR confidence, sharpness, contrast and pose."""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import InvalidArgumentError, NoCandidateError
from .geometry import frontalness_score
from .imgcore import luma2d

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])


def sharpness_score(roi_luma):
    """Variance of the 4-neighbour Laplacian over the non-border pixels."""
    y = luma2d(roi_luma)
    if y.shape[0] < 3 or y.shape[1] < 3:
        raise InvalidArgumentError(f"image must be at least 3x3; got {y.shape[1]}x{y.shape[0]}")
    lap = (y[:-2, 1:-1] + y[2:, 1:-1] + y[1:-1, :-2] + y[1:-1, 2:] - 4.0 * y[1:-1, 1:-1])
    return float(lap.var())


def histogram256(values):
    """256-bin histogram of [0, 1] values; bin ``k`` holds ``round(v * 255) == k``."""
    idx = np.clip(np.round(np.asarray(values, dtype=np.float64).ravel() * 255.0), 0, 255).astype(np.intp)
    return np.bincount(idx, minlength=256).astype(np.float64)


def otsu_threshold(values):
    """Otsu threshold bin and normalized between-class variance.

    Returns ``(k, s1)``: pixels in bins ``<= k`` form the lower class, and ``s1``
    is the between-class variance at ``k`` divided by the total variance of the
    binned intensities (0 for a constant input).
    """
    hist = histogram256(values)
    total = hist.sum()
    p = hist / total
    levels = np.arange(256) / 255.0
    omega = np.cumsum(p)
    mu = np.cumsum(p * levels)
    mu_t = mu[-1]
    var_t = float((p * (levels - mu_t) ** 2).sum())
    if var_t <= 0.0:
        return 0, 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_t * omega - mu) ** 2 / (omega * (1.0 - omega))
    between[~np.isfinite(between)] = 0.0
    between[omega >= 1.0] = 0.0
    k = int(np.argmax(between))
    return k, float(min(between[k] / var_t, 1.0))


def contrast_score(roi_luma):
    """Otsu's normalized interclass variance ``s1`` in [0, 1]."""
    return otsu_threshold(luma2d(roi_luma))[1]


@dataclass
class FrameQuality:
    frame_index: int
    ocr_confidence: float
    sharpness: float
    s1: float
    s2: float
    composite: float


def score_frame(frame_index, roi, quad, ocr_confidence, alpha1=0.7, alpha2=0.3):
    """Compute a :class:`FrameQuality` from a frontalized ROI and its frame quad."""
    y = luma2d(roi)
    s1 = contrast_score(y)
    s2 = frontalness_score(quad)
    return FrameQuality(frame_index, float(ocr_confidence), sharpness_score(y), s1, s2,
                        alpha1 * s1 + alpha2 * s2)


def select_reference(frames, alpha1=0.7, alpha2=0.3, conf_floor=0.99, top_k=10):
    """Pick the reference frame index.

    Frames with OCR confidence above ``conf_floor`` are kept, the ``top_k``
    sharpest survive, and the highest ``alpha1 * s1 + alpha2 * s2`` wins. Ties
    go to the lowest frame index.

    Raises:
        NoCandidateError: no frame clears the confidence floor.
    """
    frames = list(frames)
    if not frames:
        raise InvalidArgumentError("no frames to select from")
    if top_k < 1:
        raise InvalidArgumentError("top_k must be >= 1")
    passing = [f for f in frames if f.ocr_confidence > conf_floor]
    if not passing:
        best = max(f.ocr_confidence for f in frames)
        raise NoCandidateError(
            f"no frame has OCR confidence above {conf_floor} (best rejected: {best:.4f})", best)
    sharpest = sorted(passing, key=lambda f: (-f.sharpness, f.frame_index))[:top_k]
    best = min(sharpest, key=lambda f: (-(alpha1 * f.s1 + alpha2 * f.s2), f.frame_index))
    return best.frame_index


class ReferenceSelector(BaseEstimator):
    """Scores frontalized ROIs and selects the reference frame on ``fit``."""

    def __init__(self, alpha1=0.7, alpha2=0.3, conf_floor=0.99, top_k=10):
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.conf_floor = conf_floor
        self.top_k = top_k

    def fit(self, X, y=None, quads=None, indices=None):
        """``X``: frontalized ROIs, ``y``: OCR confidences, ``quads``: frame quads."""
        X = list(X)
        if y is None or quads is None:
            raise InvalidArgumentError("fit needs OCR confidences (y) and quads")
        if not (len(X) == len(y) == len(quads)):
            raise InvalidArgumentError("ROIs, confidences and quads differ in length")
        indices = list(range(len(X))) if indices is None else list(indices)
        self.scores_ = [score_frame(i, roi, q, c, self.alpha1, self.alpha2)
                        for i, roi, q, c in zip(indices, X, quads, y)]
        self.reference_index_ = select_reference(self.scores_, self.alpha1, self.alpha2,
                                                 self.conf_floor, self.top_k)
        return self

    def predict(self, X=None):
        check_is_fitted(self, "reference_index_")
        return self.reference_index_
