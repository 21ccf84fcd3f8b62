"""Synthetic scene-text clips with full ground truth.

A clip shows a planar sign carrying one line of text. Each frame is produced
by lighting the sign plane with a gain field, blurring it with the
differential transform, and projecting it into the frame with a pinhole
camera. Running the same chain on a second text yields the paired target
clip.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from ..blur import BlurParams, apply_differential_transform
from ..exceptions import InvalidArgumentError
from ..geometry import (CANONICAL_SIZE, canonical_quad, estimate_homography, frontalness_score,
                        invert, warp)
from ..imgcore import write_png
from .render import background_field, text_alpha

CANVAS_MARGIN = (128, 96)


@dataclass
class ScenarioSpec:
    """Declarative description of one synthetic clip.

    ``camera_path``, ``lighting_path`` and ``blur_path`` are dicts with a
    ``kind`` key; see :func:`camera_quads`, :func:`gain_field` and
    :func:`blur_trajectory` for the accepted kinds and their parameters.
    ``quad_noise`` is the standard deviation in pixels of the detection noise
    added to annotated quad vertices.
    """

    text_source: str = "HELLO"
    text_target: str = "WORLD"
    background: dict = field(default_factory=lambda: {"kind": "constant", "color": [0.85, 0.85, 0.8]})
    fg: tuple = (0.1, 0.1, 0.15)
    camera_path: dict = field(default_factory=lambda: {"kind": "static"})
    lighting_path: dict = field(default_factory=lambda: {"kind": "none"})
    blur_path: dict = field(default_factory=lambda: {"kind": "constant"})
    frame_count: int = 30
    seed: int = 0
    frame_size: tuple = (400, 200)
    quad_noise: float = 0.25
    padding: int = 6

    @classmethod
    def from_dict(cls, d):
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise InvalidArgumentError(f"unknown scenario keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("fg", "frame_size"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["fg"] = list(self.fg)
        d["frame_size"] = list(self.frame_size)
        return d


@dataclass
class GroundTruthBundle:
    frames: list
    target_frames: list
    quads: list
    annotated_quads: list
    homographies: list
    psis: list
    gains: list
    source_roi: np.ndarray
    target_roi: np.ndarray
    ocr_confidences: list
    spec: ScenarioSpec

    def manifest(self, prefix="frame"):
        return {"frames": [
            {"index": i, "file": f"{prefix}_{i:04d}.png",
             "quad": np.asarray(q).tolist(),
             "ocr_confidence": float(c), "ocr_text": self.spec.text_source}
            for i, (q, c) in enumerate(zip(self.annotated_quads, self.ocr_confidences))]}

    def ground_truth(self):
        return {
            "scenario": self.spec.to_dict(),
            "frames": [
                {"index": i,
                 "theta": np.asarray(h).ravel().tolist(),
                 "psi": p.as_array().tolist(),
                 "quad": np.asarray(q).tolist(),
                 "gain": {"lighting_path": self.spec.lighting_path, "t": i,
                          "mean": np.asarray(g).mean(axis=(0, 1)).tolist()}}
                for i, (h, p, q, g) in enumerate(zip(self.homographies, self.psis,
                                                     self.quads, self.gains))]}

    def save(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        for i, (f, t) in enumerate(zip(self.frames, self.target_frames)):
            write_png(os.path.join(out_dir, f"frame_{i:04d}.png"), f)
            write_png(os.path.join(out_dir, f"target_{i:04d}.png"), t)
        write_png(os.path.join(out_dir, "source_roi.png"), self.source_roi)
        write_png(os.path.join(out_dir, "target_roi.png"), self.target_roi)
        with open(os.path.join(out_dir, "annotations.json"), "w") as fh:
            json.dump(self.manifest(), fh, indent=1)
        with open(os.path.join(out_dir, "ground_truth.json"), "w") as fh:
            json.dump(self.ground_truth(), fh, indent=1)


def _phase(t, n):
    return t / (n - 1) if n > 1 else 0.0


def _pinhole_quad(yaw_deg, pitch_deg, offset, scale, frame_size):
    """Project the canonical ROI rectangle through a pinhole camera."""
    w, h = CANONICAL_SIZE
    corners = canonical_quad(w, h)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    pts = np.c_[(corners[:, 0] - cx) * scale, (corners[:, 1] - cy) * scale, np.zeros(4)]
    a, b = math.radians(yaw_deg), math.radians(pitch_deg)
    ry = np.array([[math.cos(a), 0, math.sin(a)], [0, 1, 0], [-math.sin(a), 0, math.cos(a)]])
    rx = np.array([[1, 0, 0], [0, math.cos(b), -math.sin(b)], [0, math.sin(b), math.cos(b)]])
    depth = 600.0
    cam = pts @ (rx @ ry).T + np.array([0.0, 0.0, depth])
    fw, fh = frame_size
    u = depth * cam[:, 0] / cam[:, 2] + (fw - 1) / 2.0 + offset[0]
    v = depth * cam[:, 1] / cam[:, 2] + (fh - 1) / 2.0 + offset[1]
    return np.c_[u, v]


def camera_quads(path, n, frame_size):
    """Per-frame true quads for a camera path.

    Kinds: ``static`` (``yaw``, ``pitch``, ``offset``, ``scale``),
    ``linear-pan`` (``start`` and ``end`` offsets, ``yaw``, ``pitch``, ``scale``),
    ``curved-orbit`` (``yaw_amplitude``, ``pitch``, ``radius``, ``scale``).
    """
    kind = path.get("kind", "static")
    quads = []
    for t in range(n):
        s = _phase(t, n)
        scale = path.get("scale", 1.0)
        if kind == "static":
            q = _pinhole_quad(path.get("yaw", 0.0), path.get("pitch", 0.0),
                              path.get("offset", (0.0, 0.0)), scale, frame_size)
        elif kind == "linear-pan":
            start = np.asarray(path.get("start", (-40.0, 0.0)), dtype=np.float64)
            end = np.asarray(path.get("end", (40.0, 0.0)), dtype=np.float64)
            q = _pinhole_quad(path.get("yaw", 10.0), path.get("pitch", 0.0),
                              start + (end - start) * s, scale, frame_size)
        elif kind == "curved-orbit":
            amp = path.get("yaw_amplitude", 15.0)
            radius = path.get("radius", 40.0)
            ang = math.radians(amp) * (2.0 * s - 1.0)
            offset = (-radius * math.sin(ang), 0.5 * radius * (1.0 - math.cos(ang)))
            q = _pinhole_quad(math.degrees(ang), path.get("pitch", 5.0), offset, scale, frame_size)
        else:
            raise InvalidArgumentError(f"unknown camera path kind: {kind!r}")
        quads.append(q)
    return quads


def gain_field(path, t, n, xs, ys):
    """Gain field at plane coordinates for frame ``t``; shape ``xs.shape + (3,)``.

    Kinds: ``none``; ``global-ramp`` (``start``, ``end`` gains and optional
    per-channel ``tint``); ``moving-half-shadow`` (shadow ``depth`` gain,
    ``softness`` in px, edge position moving from ``start_x`` to ``end_x``;
    everything left of the edge is shadowed).
    """
    kind = path.get("kind", "none")
    s = _phase(t, n)
    shape = np.shape(xs) + (3,)
    if kind == "none":
        return np.ones(shape)
    if kind == "global-ramp":
        g = path.get("start", 1.0) + (path.get("end", 0.5) - path.get("start", 1.0)) * s
        tint = np.asarray(path.get("tint", (1.0, 1.0, 1.0)), dtype=np.float64)
        return np.broadcast_to(g * tint, shape).copy()
    if kind == "moving-half-shadow":
        depth = path.get("depth", 0.3)
        soft = path.get("softness", 8.0)
        edge = path.get("start_x", -40.0) + (path.get("end_x", 300.0) - path.get("start_x", -40.0)) * s
        inside = 1.0 / (1.0 + np.exp(-(edge - np.asarray(xs)) / soft))
        g = 1.0 - (1.0 - depth) * inside
        return np.repeat(g[..., None], 3, axis=-1)
    raise InvalidArgumentError(f"unknown lighting path kind: {kind!r}")


def blur_trajectory(path, n):
    """Per-frame :class:`BlurParams`.

    Kinds: ``constant`` (``params``), ``ramp`` (``start``/``end``, linear),
    ``keyframes`` (list of ``[frame, params]`` pairs, piecewise linear).
    """
    kind = path.get("kind", "constant")
    out = []
    for t in range(n):
        s = _phase(t, n)
        if kind == "constant":
            p = np.asarray(path.get("params", (0.1, 0.1, 0.0, 0.0)), dtype=np.float64)
        elif kind == "ramp":
            a = np.asarray(path["start"], dtype=np.float64)
            b = np.asarray(path["end"], dtype=np.float64)
            p = a + (b - a) * s
        elif kind == "keyframes":
            keys = sorted(path["keys"], key=lambda k: k[0])
            frames = np.array([k[0] for k in keys], dtype=np.float64)
            vals = np.array([k[1] for k in keys], dtype=np.float64)
            p = np.array([np.interp(t, frames, vals[:, j]) for j in range(4)])
        else:
            raise InvalidArgumentError(f"unknown blur path kind: {kind!r}")
        out.append(BlurParams.clipped(*p))
    return out


def ocr_confidence(psi, quad):
    """Stand-in OCR confidence falling with blur strength and obliqueness."""
    blur = max(-psi.w, 0.0) * 0.5 * (psi.sigma_x + psi.sigma_y)
    return float(np.clip(0.999 - 0.004 * blur - 0.05 * (1.0 - frontalness_score(quad)), 0.0, 1.0))


def _plane(text, spec, xs, ys):
    w, h = CANONICAL_SIZE
    mx, my = CANVAS_MARGIN
    alpha = np.zeros(xs.shape)
    alpha[my:my + h, mx:mx + w] = text_alpha(text, w, h, spec.padding)
    bg = background_field(spec.background, xs, ys, roi_width=w)
    fg = np.asarray(spec.fg, dtype=np.float64)
    return np.clip(bg * (1.0 - alpha[..., None]) + fg * alpha[..., None], 0.0, 1.0)


def generate_clip(spec):
    """Render a :class:`GroundTruthBundle` for ``spec``; deterministic given the seed."""
    n = int(spec.frame_count)
    if n < 1:
        raise InvalidArgumentError("frame_count must be >= 1")
    if isinstance(spec.blur_path.get("psis"), list):
        psis = [BlurParams(*p) for p in spec.blur_path["psis"]]
    else:
        psis = blur_trajectory(spec.blur_path, n)
    quads = camera_quads(spec.camera_path, n, spec.frame_size)
    if len(psis) != n or len(quads) != n:
        raise InvalidArgumentError("trajectory lengths must equal frame_count")

    w, h = CANONICAL_SIZE
    mx, my = CANVAS_MARGIN
    cw, ch = w + 2 * mx, h + 2 * my
    xs, ys = np.meshgrid(np.arange(cw, dtype=np.float64) - mx, np.arange(ch, dtype=np.float64) - my)
    plane_src = _plane(spec.text_source, spec, xs, ys)
    plane_tgt = _plane(spec.text_target, spec, xs, ys)
    canvas_to_plane = np.array([[1.0, 0.0, -mx], [0.0, 1.0, -my], [0.0, 0.0, 1.0]])
    rng = np.random.default_rng(spec.seed)
    fw, fh = spec.frame_size

    frames, targets, homs, gains, annotated, confs = [], [], [], [], [], []
    for t in range(n):
        plane_to_frame = estimate_homography(canonical_quad(w, h), quads[t])
        to_frame = plane_to_frame @ canvas_to_plane
        g = gain_field(spec.lighting_path, t, n, xs, ys)
        for plane, out in ((plane_src, frames), (plane_tgt, targets)):
            lit = np.clip(plane * g, 0.0, 1.0)
            out.append(warp(apply_differential_transform(lit, psis[t]), to_frame, fw, fh))
        homs.append(invert(plane_to_frame))
        gains.append(g[my:my + h, mx:mx + w])
        annotated.append(quads[t] + rng.normal(0.0, spec.quad_noise, size=(4, 2)))
        confs.append(ocr_confidence(psis[t], quads[t]))

    src_roi = plane_src[my:my + h, mx:mx + w].copy()
    tgt_roi = plane_tgt[my:my + h, mx:mx + w].copy()
    return GroundTruthBundle(frames, targets, quads, annotated, homs, psis, gains,
                             src_roi, tgt_roi, confs, spec)

