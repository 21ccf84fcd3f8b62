"""Procedural backgrounds and anti-aliased text rasterization."""

import numpy as np
from scipy.ndimage import map_coordinates

from ..exceptions import InvalidArgumentError, LayoutError
from ..geometry import CANONICAL_SIZE
from .font import GLYPH_H, GLYPH_W, SUPPORTED, text_bitmap

PERLIN_MAX_AMPLITUDE = 0.2
SUPERSAMPLE = 4


def _perlin(xs, ys, scale, seed):
    """2-D gradient noise in roughly [-1, 1], evaluated at arbitrary coordinates."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(256)
    perm = np.concatenate([perm, perm])
    angles = rng.uniform(0, 2 * np.pi, 256)
    grads = np.stack([np.cos(angles), np.sin(angles)], axis=1)

    u = np.asarray(xs, dtype=np.float64) / scale
    v = np.asarray(ys, dtype=np.float64) / scale
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    fu = u - i0
    fv = v - j0

    def corner(di, dj):
        h = perm[(perm[(i0 + di) & 255] + (j0 + dj)) & 255]
        g = grads[h]
        return g[..., 0] * (fu - di) + g[..., 1] * (fv - dj)

    def fade(t):
        return t * t * t * (t * (t * 6 - 15) + 10)

    a, b = fade(fu), fade(fv)
    top = corner(0, 0) * (1 - a) + corner(1, 0) * a
    bottom = corner(0, 1) * (1 - a) + corner(1, 1) * a
    return np.sqrt(2.0) * (top * (1 - b) + bottom * b)


def background_field(spec, xs, ys, roi_width=CANONICAL_SIZE[0]):
    """Evaluate a background spec at plane coordinates; returns ``xs.shape + (3,)``.

    Supported kinds:

    * ``constant``: ``color``
    * ``linear-gradient``: ``start``, ``end`` colors and ``angle`` in degrees;
      the ramp spans one ROI width along the given direction
    * ``perlin-texture``: base ``color``, ``amplitude`` (capped at 0.2),
      ``scale`` in pixels and ``seed``
    """
    kind = spec.get("kind", "constant")
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if kind == "constant":
        color = np.asarray(spec.get("color", (0.85, 0.85, 0.8)), dtype=np.float64)
        out = np.broadcast_to(color, xs.shape + (3,)).copy()
    elif kind == "linear-gradient":
        start = np.asarray(spec.get("start", (0.9, 0.9, 0.85)), dtype=np.float64)
        end = np.asarray(spec.get("end", (0.6, 0.65, 0.7)), dtype=np.float64)
        ang = np.radians(spec.get("angle", 0.0))
        t = (xs * np.cos(ang) + ys * np.sin(ang)) / roi_width
        out = start + (end - start) * t[..., None]
    elif kind == "perlin-texture":
        color = np.asarray(spec.get("color", (0.75, 0.75, 0.7)), dtype=np.float64)
        amp = min(float(spec.get("amplitude", 0.1)), PERLIN_MAX_AMPLITUDE)
        noise = _perlin(xs, ys, float(spec.get("scale", 24.0)), int(spec.get("seed", 0)))
        out = color + amp * noise[..., None]
    else:
        raise InvalidArgumentError(f"unknown background kind: {kind!r}")
    return np.clip(out, 0.0, 1.0)


def layout(text, width, height, padding):
    """Integer glyph scale and top-left pixel offset that center ``text``."""
    if not text or not text.strip():
        raise LayoutError("text must be a non-empty printable string")
    bad = sorted(set(c for c in text if c not in SUPPORTED))
    if bad:
        raise LayoutError(f"unsupported characters: {''.join(bad)!r}")
    cells_w = len(text) * (GLYPH_W + 1) - 1
    scale = min((width - 2 * padding) // cells_w, (height - 2 * padding) // GLYPH_H)
    if scale < 1:
        raise LayoutError(f"text {text!r} does not fit a {width}x{height} ROI")
    x0 = (width - scale * cells_w) // 2
    y0 = (height - scale * GLYPH_H) // 2
    return scale, x0, y0


def glyph_field(bitmap, scale, x0, y0, xs, ys):
    """Bilinear interpolation of the cell bitmap at continuous pixel coordinates.

    Pixel ``i`` spans ``[i, i + 1)``; cell ``c`` spans
    ``[x0 + c * scale, x0 + (c + 1) * scale)``. Ink is where the field exceeds 0.5,
    which rounds block corners and turns diagonal cell runs into slanted edges.
    """
    padded = np.pad(bitmap.astype(np.float64), 1)
    u = (np.asarray(xs) - x0) / scale - 0.5 + 1.0
    v = (np.asarray(ys) - y0) / scale - 0.5 + 1.0
    return map_coordinates(padded, [v, u], order=1, mode="constant", cval=0.0)


def text_alpha(text, width=CANONICAL_SIZE[0], height=CANONICAL_SIZE[1], padding=6):
    """Anti-aliased ink coverage in [0, 1] of ``text`` centered in a ``width`` x ``height`` box."""
    scale, x0, y0 = layout(text, width, height, padding)
    bitmap = text_bitmap(text)
    offs = (np.arange(SUPERSAMPLE) + 0.5) / SUPERSAMPLE
    xs = (np.arange(width)[:, None] + offs[None, :]).ravel()
    ys = (np.arange(height)[:, None] + offs[None, :]).ravel()
    gx, gy = np.meshgrid(xs, ys)
    ink = glyph_field(bitmap, scale, x0, y0, gx, gy) > 0.5
    return ink.reshape(height, SUPERSAMPLE, width, SUPERSAMPLE).mean(axis=(1, 3))


def render_text_roi(text, style=None):
    """Rasterize ``text`` onto the canonical ROI.

    ``style`` keys: ``fg`` (RGB color), ``bg`` (background spec, see
    :func:`background_field`), ``padding`` (pixels), ``size`` ((width, height)).

    Returns:
        ``(image, mask)`` where ``image`` is ``(H, W, 3)`` and ``mask`` is a
        binary ``(H, W, 1)`` array of pixels with at least half ink coverage.
    """
    style = style or {}
    width, height = style.get("size", CANONICAL_SIZE)
    alpha = text_alpha(text, width, height, style.get("padding", 6))
    gx, gy = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    bg = background_field(style.get("bg", {"kind": "constant"}), gx, gy, roi_width=width)
    fg = np.asarray(style.get("fg", (0.1, 0.1, 0.15)), dtype=np.float64)
    img = bg * (1.0 - alpha[..., None]) + fg * alpha[..., None]
    mask = (alpha >= 0.5).astype(np.float64)[..., None]
    return np.clip(img, 0.0, 1.0), mask
