"""End-to-end text propagation: ingest, recipe building, propagation, recipe I/O.

A recipe holds everything needed to carry a replaced reference ROI into one
frame: the frontalizing homography, the lighting gain map and the blur
parameters. Recipes are built once per input clip and can be reused for any
number of replacement ROIs.
"""

import base64
import json
import logging
import os
import re
import time
from dataclasses import asdict, dataclass, fields

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .blur import IDENTITY, BlurParams, FitConfig, apply_differential_transform, fit_blur_params, initial_guess
from .exceptions import (AnnotationParseError, DegenerateGeometryError, FrameProcessingError,
                         InvalidArgumentError, TextPropError)
from .geometry import (apply_homography, canonical_quad, check_quad, estimate_homography, invert, normalize,
                       register_homography, roundtrip_operator, signed_distance_to_quad,
                       smooth_sequence, warp)
from .imgcore import check_image, read_png
from .photometry import (RatioMap, apply_lighting, compute_ratio, estimate_background, temporal_average,
                         text_mask, triangular_weights)
from .refselect import score_frame, select_reference

log = logging.getLogger(__name__)

RECIPE_FORMAT = "textprop-recipes"
RECIPE_VERSION = 1


@dataclass
class PipelineConfig:
    """Every tunable default of the pipeline, loadable from a JSON key-value file."""

    alpha1: float = 0.7
    alpha2: float = 0.3
    conf_floor: float = 0.99
    top_k: int = 10
    lambda_t: float = 10.0
    lambda_R: float = 1.0
    lambda_T: float = 0.1
    window: int = 3
    epsilon: float = 0.01
    feather: float = 2.0
    canonical_size: tuple = (256, 64)
    mask_dilation: int = 2
    max_shift: int = 5
    register: bool = True
    max_correction: float = 2.0
    n_jobs: int = 1

    def __post_init__(self):
        self.canonical_size = tuple(int(v) for v in self.canonical_size)
        if self.window < 1 or self.window % 2 == 0:
            raise InvalidArgumentError("window must be a positive odd frame count")
        if self.lambda_t < 0 or self.feather < 0 or self.epsilon <= 0:
            raise InvalidArgumentError("lambda_t and feather must be >= 0, epsilon > 0")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidArgumentError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_file(cls, path):
        with open(path) as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise AnnotationParseError(f"config {path}: {exc.msg}", exc.lineno) from exc
        if not isinstance(data, dict):
            raise InvalidArgumentError("config file must hold a JSON object")
        return cls.from_dict(data)

    def fit_config(self):
        return FitConfig(lambda_R=self.lambda_R, lambda_T=self.lambda_T, window=self.window,
                         max_shift=self.max_shift)


@dataclass
class FrameAnnotation:
    index: int
    file: str
    quad: object = None
    ocr_confidence: float = 0.0
    ocr_text: str = ""

    @property
    def active(self):
        return self.quad is not None


@dataclass
class TransformRecipe:
    frame_index: int
    theta: np.ndarray
    ratio: RatioMap
    psi: BlurParams
    reference: bool = False

    def output_quad(self, size):
        """Where the canonical ROI lands in the frame."""
        return apply_homography(invert(self.theta), canonical_quad(*size))


# -- ingestion ---------------------------------------------------------------

def _entries_with_lines(text):
    """Decode the ``frames`` array, pairing each entry with its starting line."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise AnnotationParseError(exc.msg, exc.lineno) from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("frames"), list):
        raise AnnotationParseError("top level must be an object with a 'frames' array", 1)
    m = re.search(r'"frames"\s*:\s*\[', text)
    dec = json.JSONDecoder()
    pos = m.end()
    out = []
    for _ in doc["frames"]:
        while text[pos] in " \t\r\n,":
            pos += 1
        obj, end = dec.raw_decode(text, pos)
        out.append((obj, text.count("\n", 0, pos) + 1))
        pos = end
    return out


def parse_annotations(text):
    """Parse manifest text into :class:`FrameAnnotation` objects sorted by index."""
    anns = []
    for entry, line in _entries_with_lines(text):
        if not isinstance(entry, dict):
            raise AnnotationParseError("frame entry must be an object", line)
        try:
            index = entry["index"]
            file = entry["file"]
        except KeyError as exc:
            raise AnnotationParseError(f"missing key {exc.args[0]!r}", line) from None
        if not isinstance(index, int) or not isinstance(file, str):
            raise AnnotationParseError("'index' must be an int and 'file' a string", line)
        quad = entry.get("quad")
        if quad is not None:
            try:
                quad = np.asarray(quad, dtype=np.float64)
            except (TypeError, ValueError):
                raise AnnotationParseError("'quad' must be numeric", line) from None
            if quad.shape != (4, 2):
                raise AnnotationParseError(f"'quad' must be 4 [x, y] pairs; got shape {quad.shape}", line)
        conf = entry.get("ocr_confidence", 0.0)
        if not isinstance(conf, (int, float)) or not 0.0 <= conf <= 1.0:
            raise AnnotationParseError("'ocr_confidence' must be a number in [0, 1]", line)
        anns.append(FrameAnnotation(index, file, quad, float(conf), str(entry.get("ocr_text", ""))))
    if len({a.index for a in anns}) != len(anns):
        raise AnnotationParseError("duplicate frame index")
    return sorted(anns, key=lambda a: a.index)


def ingest(annotations_file, frames_dir):
    """Load frames in index order as ``(image, FrameAnnotation)`` pairs.

    Frames whose quad is absent or degenerate are kept with ``quad = None`` and
    pass through propagation unmodified.
    """
    with open(annotations_file) as fh:
        anns = parse_annotations(fh.read())
    if not anns:
        raise InvalidArgumentError("annotation file lists no frames")
    clip = []
    for ann in anns:
        path = os.path.join(frames_dir, ann.file)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing frame image: {path}")
        if ann.quad is not None:
            try:
                check_quad(ann.quad)
            except DegenerateGeometryError as exc:
                log.warning("frame %d: %s; passing through", ann.index, exc)
                ann.quad = None
        clip.append((read_png(path), ann))
    return clip


# -- recipe building ---------------------------------------------------------

def _reflect_pad(theta, pad, fit_len):
    """Extend a parameter sequence by point reflection about denoised endpoints.

    Each end is mirrored through the value of a quadratic fitted to its first
    ``fit_len`` samples, so steady or gently curving motion continues across
    the boundary instead of being pulled towards the last observed value.
    Padding longer than the clip continues along the fitted end slope.
    """
    n = len(theta)
    m = min(fit_len, n)
    t = np.arange(m, dtype=np.float64)

    def extend(block):
        if m < 2:
            value, slope = block[0], np.zeros_like(block[0])
        else:
            coef = np.polyfit(t, block[:m], min(2, m - 1))
            value, slope = coef[-1], coef[-2]
        k = min(pad, n - 1)
        mirrored = 2.0 * value - block[1:k + 1]
        last = mirrored[-1] if k else value
        steps = np.arange(1, pad - k + 1, dtype=np.float64)[:, None]
        return np.concatenate([mirrored, last - steps * slope])

    head = extend(theta)[::-1]
    tail = extend(theta[::-1])
    return np.concatenate([head, theta, tail])


def frontalizing_homographies(quads, size, lambda_t):
    """Quad-to-canonical homographies from temporally smoothed quad vertices.

    Smoothing acts on the vertex trajectories (the four-corner
    parameterization of each homography), in which camera translation is
    linear in time; the normalized matrix entries are rational in the motion
    and would be biased by smoothing on fast moves. The trajectories are
    padded at both ends first (see :func:`_reflect_pad`) so that a moving ROI
    is not dragged towards its endpoints.
    """
    target = canonical_quad(*size)
    flat = np.stack([np.asarray(q, dtype=np.float64).reshape(8) for q in quads])
    n = len(flat)
    if n >= 3 and lambda_t > 0:
        pad = int(np.ceil(10.0 * np.sqrt(lambda_t)))
        fit_len = max(3, int(np.ceil(16.0 * np.sqrt(lambda_t))))
        flat = smooth_sequence(_reflect_pad(flat, pad, fit_len), lambda_t)[pad:pad + n]
    else:
        flat = smooth_sequence(flat, lambda_t)
    return [estimate_homography(q.reshape(4, 2), target) for q in flat]


def _fit_center(refs, rois, init, observers, center, cfg):
    return fit_blur_params(refs, rois, cfg, init=init, observers=observers).params[center]


def _window_members(pos, indices, half):
    """Positions of active frames temporally adjacent to ``pos`` within ``half``.

    The window stops at a missing (passthrough) frame so that it contracts
    rather than reaching across the gap.
    """
    members = [pos]
    for step in (-1, 1):
        p = pos
        while len(members) < 2 * half + 1:
            q = p + step
            if not 0 <= q < len(indices) or abs(indices[q] - indices[p]) != 1 \
                    or abs(indices[q] - indices[pos]) > half:
                break
            members.append(q)
            p = q
    return sorted(members)


def frontalize_clip(clip, config=None):
    """Smoothed homographies and canonical ROIs of the active frames.

    Returns ``(active, thetas, rois)`` where ``active`` is the list of
    ``(image, FrameAnnotation)`` pairs that carry a quad.
    """
    config = config or PipelineConfig()
    active = [(img, ann) for img, ann in clip if ann.active]
    if not active:
        raise InvalidArgumentError("no frame carries a quad")
    thetas = frontalizing_homographies([ann.quad for _, ann in active], config.canonical_size,
                                       config.lambda_t)
    rois = [warp(img, th, *config.canonical_size) for (img, _), th in zip(active, thetas)]
    return active, thetas, rois


def register_to_reference(rois, thetas, ref_pos, config, indices=None):
    """Refine smoothed homographies by aligning each ROI to the reference ROI.

    Annotation noise leaves sub-pixel misregistration that smoothing only
    partly removes; direct image alignment of every frontalized ROI against
    the reference ROI corrects it. Frames whose alignment fails keep their
    smoothed homography. The refined sequence is smoothed again with
    ``lambda_t`` so that temporal stability is still governed by it.
    """
    size = config.canonical_size
    template = rois[ref_pos]
    refined = []
    for pos, (roi, th) in enumerate(zip(rois, thetas)):
        c = None if pos == ref_pos else register_homography(template, roi, config.max_correction)
        if c is None:
            if pos != ref_pos:
                log.warning("frame %s: alignment to the reference failed; keeping the smoothed pose",
                            pos if indices is None else indices[pos])
            refined.append(th)
        else:
            refined.append(normalize(invert(c) @ th))
    corners = canonical_quad(*size)
    return frontalizing_homographies([apply_homography(invert(h), corners) for h in refined],
                                     size, config.lambda_t)


def _score(active, rois, config):
    return [score_frame(ann.index, roi, ann.quad, ann.ocr_confidence, config.alpha1, config.alpha2)
            for (_, ann), roi in zip(active, rois)]


def score_clip(clip, config=None):
    """Score every active frame and pick the reference: ``(ref_index, scores)``."""
    config = config or PipelineConfig()
    active, _, rois = frontalize_clip(clip, config)
    scores = _score(active, rois, config)
    ref = select_reference(scores, config.alpha1, config.alpha2, config.conf_floor, config.top_k)
    return ref, scores


def build_recipes(clip, ref_index=None, config=None):
    """Compute one :class:`TransformRecipe` per active frame.

    Args:
        clip: list of ``(image, FrameAnnotation)`` pairs, as from :func:`ingest`.
        ref_index: frame index of the reference; selected automatically when None.
        config: :class:`PipelineConfig`.

    Returns:
        ``(recipes, ref_index, scores)``; ``scores`` are the per-frame
        :class:`FrameQuality` records (empty when ``ref_index`` was given).
    """
    config = config or PipelineConfig()
    size = config.canonical_size
    active, thetas, rois = frontalize_clip(clip, config)
    indices = [ann.index for _, ann in active]

    scores = []
    if ref_index is None:
        scores = _score(active, rois, config)
        ref_index = select_reference(scores, config.alpha1, config.alpha2, config.conf_floor, config.top_k)
    if ref_index not in indices:
        raise InvalidArgumentError(f"reference frame {ref_index} is not an active frame")
    rpos = indices.index(ref_index)
    if config.register:
        thetas = register_to_reference(rois, thetas, rpos, config, indices)
        rois = [warp(img, th, *size) for (img, _), th in zip(active, thetas)]
    ref_roi = rois[rpos]

    ref_mask = text_mask(ref_roi, config.mask_dilation)
    bgs = []
    for pos, roi in enumerate(rois):
        try:
            mask = np.maximum(text_mask(roi, config.mask_dilation), ref_mask)
            bgs.append(estimate_background(roi, mask))
        except TextPropError as exc:
            raise FrameProcessingError(indices[pos], exc) from exc
    ref_bg = bgs[rpos]

    half = config.window // 2
    windows = [_window_members(pos, indices, half) for pos in range(len(rois))]
    ratios = []
    for pos, members in enumerate(windows):
        if pos == rpos:
            ratios.append(RatioMap.unit(size[1], size[0], ref_roi.shape[2], config.epsilon))
            continue
        # weights follow each member's offset on the triangular window
        tri = triangular_weights(config.window)
        wts = [tri[half + indices[m] - indices[pos]] for m in members]
        avg = temporal_average([bgs[m] for m in members], wts)
        ratios.append(compute_ratio(avg, ref_bg, config.epsilon).quantized())

    cfg = config.fit_config()
    lit_refs = [apply_lighting(ref_roi, r) for r in ratios]
    # fit through the insert-and-refrontalize resampling each output will undergo
    observers = [roundtrip_operator(th, size, (img.shape[1], img.shape[0]))
                 for th, (img, _) in zip(thetas, active)]
    init = [initial_guess(ref, roi, cfg, obs) for ref, roi, obs in zip(lit_refs, rois, observers)]
    jobs = [(pos, members) for pos, members in enumerate(windows) if pos != rpos]
    fitted = Parallel(n_jobs=config.n_jobs)(
        delayed(_fit_center)([lit_refs[m] for m in members], [rois[m] for m in members],
                             [init[m] for m in members], [observers[m] for m in members],
                             members.index(pos), cfg)
        for pos, members in jobs)
    psis = [IDENTITY] * len(rois)
    for (pos, _), psi in zip(jobs, fitted):
        psis[pos] = psi

    recipes = [TransformRecipe(idx, th, ratio, psi, pos == rpos)
               for pos, (idx, th, ratio, psi) in enumerate(zip(indices, thetas, ratios, psis))]
    return recipes, ref_index, scores


# -- propagation -------------------------------------------------------------

def composite(frame, roi, theta, feather=2.0):
    """Warp a canonical ROI into ``frame`` through ``theta^-1`` with a linear edge feather.

    The blend weight ramps from 0 at ``feather / 2`` pixels outside the quad
    to 1 at ``feather / 2`` pixels inside; pixels beyond the ramp are left
    untouched.
    """
    out = frame.copy()
    h, w = frame.shape[:2]
    size = (roi.shape[1], roi.shape[0])
    quad = apply_homography(invert(theta), canonical_quad(*size))
    pad = feather / 2.0 + 1.0
    x0 = max(int(np.floor(quad[:, 0].min() - pad)), 0)
    y0 = max(int(np.floor(quad[:, 1].min() - pad)), 0)
    x1 = min(int(np.ceil(quad[:, 0].max() + pad)) + 1, w)
    y1 = min(int(np.ceil(quad[:, 1].max() + pad)) + 1, h)
    if x1 <= x0 or y1 <= y0:
        return out
    gx, gy = np.meshgrid(np.arange(x0, x1, dtype=np.float64), np.arange(y0, y1, dtype=np.float64))
    d = signed_distance_to_quad(quad, gx, gy)
    if feather > 0:
        alpha = np.clip(d / feather + 0.5, 0.0, 1.0)
    else:
        alpha = (d >= 0).astype(np.float64)
    shift = np.array([[1.0, 0.0, -x0], [0.0, 1.0, -y0], [0.0, 0.0, 1.0]])
    patch = warp(roi, shift @ invert(theta), x1 - x0, y1 - y0)
    region = out[y0:y1, x0:x1]
    sel = alpha > 0
    a = alpha[sel][:, None]
    region[sel] = a * patch[sel] + (1.0 - a) * region[sel]
    return out


def propagate_frame(frame, recipe, replaced_roi, feather=2.0):
    """Light, blur and re-insert the replaced ROI into one frame."""
    roi = apply_lighting(replaced_roi, recipe.ratio)
    roi = apply_differential_transform(roi, recipe.psi)
    return composite(frame, roi, recipe.theta, feather)


def propagate(clip, recipes, replaced_roi, feather=2.0):
    """Produce the output clip; frames without a recipe pass through as copies."""
    replaced = check_image(replaced_roi, "replaced_roi")
    by_index = {r.frame_index: r for r in recipes}
    for r in recipes:
        if r.ratio.gains.shape[:2] != replaced.shape[:2]:
            raise InvalidArgumentError(
                f"replacement ROI is {replaced.shape[1]}x{replaced.shape[0]}; recipes expect "
                f"{r.ratio.gains.shape[1]}x{r.ratio.gains.shape[0]}")
        break
    out = []
    for img, ann in clip:
        recipe = by_index.get(ann.index)
        if recipe is None:
            out.append(img.copy())
            continue
        try:
            out.append(propagate_frame(img, recipe, replaced, feather))
        except TextPropError as exc:
            raise FrameProcessingError(ann.index, exc) from exc
    return out


def propagate_many(clip, recipes, replaced_rois, feather=2.0, sink=None, build_seconds=0.0):
    """Propagate K replacement ROIs through the same recipes.

    When ``sink`` is given each output clip is handed to ``sink(k, frames)``
    instead of being kept in memory. Returns ``(clips, report)``; ``report``
    holds ``recipe_build_seconds``, ``propagate_seconds``, ``frames_per_second``
    (output frames over total time including recipe building) and the
    per-copy timings.
    """
    clips = []
    per_copy = []
    start = time.perf_counter()
    for k, roi in enumerate(replaced_rois):
        t0 = time.perf_counter()
        frames = propagate(clip, recipes, roi, feather)
        per_copy.append(time.perf_counter() - t0)
        if sink is None:
            clips.append(frames)
        else:
            sink(k, frames)
    elapsed = time.perf_counter() - start
    total_frames = len(clip) * len(per_copy)
    total = build_seconds + elapsed
    report = {
        "copies": len(per_copy),
        "frames_per_copy": len(clip),
        "recipe_build_seconds": build_seconds,
        "propagate_seconds": elapsed,
        "per_copy_seconds": per_copy,
        "frames_per_second": total_frames / total if total > 0 else float("inf"),
        "seconds_per_frame": total / total_frames if total_frames else float("nan"),
    }
    return (None if sink is not None else clips), report


# -- recipe serialization ----------------------------------------------------

def recipes_to_dict(recipes, canonical_size, ref_index):
    return {
        "format": RECIPE_FORMAT,
        "version": RECIPE_VERSION,
        "canonical_size": list(canonical_size),
        "reference_index": ref_index,
        "recipes": [{
            "frame_index": r.frame_index,
            "reference": r.reference,
            "theta": np.asarray(r.theta, dtype=np.float64).ravel().tolist(),
            "psi": r.psi.as_array().tolist(),
            "epsilon": r.ratio.epsilon,
            "ratio_shape": list(r.ratio.gains.shape),
            # unit gains are not on the 1/6553.5 grid, so they are stored as null
            "ratio_png": (None if np.all(r.ratio.gains == 1.0)
                          else base64.b64encode(r.ratio.to_png_bytes()).decode("ascii")),
        } for r in recipes],
    }


def recipes_from_dict(d):
    if d.get("format") != RECIPE_FORMAT:
        raise InvalidArgumentError("not a recipe file")
    if d.get("version") != RECIPE_VERSION:
        raise InvalidArgumentError(f"unsupported recipe version {d.get('version')}")
    recipes = [TransformRecipe(
        frame_index=int(r["frame_index"]),
        theta=np.asarray(r["theta"], dtype=np.float64).reshape(3, 3),
        ratio=(RatioMap.unit(*r["ratio_shape"], epsilon=r["epsilon"]) if r["ratio_png"] is None
               else RatioMap.from_png_bytes(base64.b64decode(r["ratio_png"]), r["epsilon"])),
        psi=BlurParams(*r["psi"]),
        reference=bool(r["reference"])) for r in d["recipes"]]
    return recipes, tuple(d["canonical_size"]), d.get("reference_index")


def save_recipes(path, recipes, canonical_size, ref_index):
    with open(path, "w") as fh:
        json.dump(recipes_to_dict(recipes, canonical_size, ref_index), fh)


def load_recipes(path):
    """Returns ``(recipes, canonical_size, reference_index)``."""
    with open(path) as fh:
        return recipes_from_dict(json.load(fh))


# -- estimator ---------------------------------------------------------------

class TextPropagator(BaseEstimator):
    """Builds recipes from an input clip on ``fit``; propagates replacement ROIs on ``transform``.

    Hyperparameters mirror :class:`PipelineConfig`. ``reference_index`` forces
    the reference frame instead of selecting it.
    """

    def __init__(self, alpha1=0.7, alpha2=0.3, conf_floor=0.99, top_k=10, lambda_t=10.0,
                 lambda_R=1.0, lambda_T=0.1, window=3, epsilon=0.01, feather=2.0,
                 canonical_size=(256, 64), mask_dilation=2, max_shift=5, register=True,
                 max_correction=2.0, n_jobs=1, reference_index=None):
        self.alpha1 = alpha1
        self.alpha2 = alpha2
        self.conf_floor = conf_floor
        self.top_k = top_k
        self.lambda_t = lambda_t
        self.lambda_R = lambda_R
        self.lambda_T = lambda_T
        self.window = window
        self.epsilon = epsilon
        self.feather = feather
        self.canonical_size = canonical_size
        self.mask_dilation = mask_dilation
        self.max_shift = max_shift
        self.register = register
        self.max_correction = max_correction
        self.n_jobs = n_jobs
        self.reference_index = reference_index

    @classmethod
    def from_config(cls, config, reference_index=None):
        return cls(**asdict(config), reference_index=reference_index)

    def config(self):
        params = self.get_params()
        params.pop("reference_index")
        return PipelineConfig(**params)

    def fit(self, X, y=None):
        """``X`` is a clip: a list of ``(image, FrameAnnotation)`` pairs."""
        t0 = time.perf_counter()
        recipes, ref, scores = build_recipes(list(X), self.reference_index, self.config())
        self.recipe_build_seconds_ = time.perf_counter() - t0
        self.recipes_ = recipes
        self.reference_index_ = ref
        self.scores_ = scores
        self.clip_ = list(X)
        return self

    def reference_roi(self):
        """Frontalized reference ROI of the fitted clip."""
        check_is_fitted(self, "recipes_")
        img = next(img for img, ann in self.clip_ if ann.index == self.reference_index_)
        rec = next(r for r in self.recipes_ if r.reference)
        return warp(img, rec.theta, *self.config().canonical_size)

    def transform(self, X):
        """Propagate the replaced reference ROI ``X`` through the fitted clip."""
        check_is_fitted(self, "recipes_")
        return propagate(self.clip_, self.recipes_, X, self.feather)

    def transform_many(self, rois, sink=None):
        check_is_fitted(self, "recipes_")
        return propagate_many(self.clip_, self.recipes_, rois, self.feather, sink,
                              self.recipe_build_seconds_)

    def save_recipes(self, path):
        check_is_fitted(self, "recipes_")
        save_recipes(path, self.recipes_, self.config().canonical_size, self.reference_index_)
