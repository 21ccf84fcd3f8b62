"""Planar pose normalization: 4-point homographies, warping, temporal smoothing.

A quad is a ``(4, 2)`` array of ``(x, y)`` vertices ordered clockwise on screen
(top-left, top-right, bottom-right, bottom-left). A homography is a ``(3, 3)``
array normalized so that ``m[2, 2] == 1``.
"""

import cv2
import numpy as np
from scipy import sparse
from scipy.linalg import solveh_banded

from .exceptions import DegenerateGeometryError, InvalidArgumentError
from .imgcore import check_image, luma2d, sample_bilinear

MIN_QUAD_AREA = 1.0
CANONICAL_SIZE = (256, 64)


def shoelace_area(quad):
    """Signed polygon area; positive for clockwise order in image coordinates."""
    q = np.asarray(quad, dtype=np.float64)
    x, y = q[:, 0], q[:, 1]
    return 0.5 * (np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def check_quad(quad, name="quad"):
    """Return ``quad`` as a float ``(4, 2)`` array, rejecting degenerate shapes."""
    q = np.asarray(quad, dtype=np.float64)
    if q.shape != (4, 2):
        raise InvalidArgumentError(f"{name} must have shape (4, 2); got {q.shape}")
    if not np.all(np.isfinite(q)):
        raise InvalidArgumentError(f"{name} has non-finite vertices")
    area = shoelace_area(q)
    if abs(area) <= MIN_QUAD_AREA:
        raise DegenerateGeometryError(f"{name} is degenerate (area {abs(area):.3g} px^2)")
    edges = np.roll(q, -1, axis=0) - q
    cross = edges[:, 0] * np.roll(edges, -1, axis=0)[:, 1] - edges[:, 1] * np.roll(edges, -1, axis=0)[:, 0]
    scale = np.max(np.abs(edges)) ** 2
    if np.any(np.abs(cross) <= 1e-9 * scale) or not (np.all(cross > 0) or np.all(cross < 0)):
        raise DegenerateGeometryError(f"{name} is not a strictly convex quadrilateral")
    return q


def canonical_quad(width, height):
    """Outer pixel-edge corners of a ``width`` x ``height`` image."""
    return np.array([[-0.5, -0.5], [width - 0.5, -0.5],
                     [width - 0.5, height - 0.5], [-0.5, height - 0.5]])


def normalize(h):
    m = np.asarray(h, dtype=np.float64)
    if m.shape != (3, 3):
        raise InvalidArgumentError(f"homography must be 3x3; got {m.shape}")
    if abs(m[2, 2]) < 1e-15:
        raise DegenerateGeometryError("homography has m[2, 2] == 0 and cannot be normalized")
    return m / m[2, 2]


def estimate_homography(src, dst):
    """Solve the 8x8 direct linear system mapping four ``src`` points onto ``dst``."""
    s = check_quad(src, "src")
    d = check_quad(dst, "dst")
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(s, d)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    try:
        p = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise DegenerateGeometryError(f"homography system is singular: {exc}") from exc
    return np.append(p, 1.0).reshape(3, 3)


def apply_homography(h, points):
    """Map ``(..., 2)`` points through ``h``."""
    pts = np.asarray(points, dtype=np.float64)
    m = np.asarray(h, dtype=np.float64)
    x = m[0, 0] * pts[..., 0] + m[0, 1] * pts[..., 1] + m[0, 2]
    y = m[1, 0] * pts[..., 0] + m[1, 1] * pts[..., 1] + m[1, 2]
    z = m[2, 0] * pts[..., 0] + m[2, 1] * pts[..., 1] + m[2, 2]
    return np.stack([x / z, y / z], axis=-1)


def invert(h):
    m = normalize(h)
    det = np.linalg.det(m)
    if not np.isfinite(det) or abs(det) < 1e-12 * max(1.0, np.abs(m).max()) ** 3:
        raise DegenerateGeometryError("homography is singular")
    return normalize(np.linalg.inv(m))


def warp(img, h, out_w, out_h):
    """Inverse-mapped bilinear warp.

    Output pixel ``(x, y)`` takes the value of ``img`` at ``h^-1 (x, y, 1)``;
    samples falling outside the source replicate its nearest edge pixel.
    """
    arr = check_image(img)
    hinv = invert(h)
    if out_w < 1 or out_h < 1:
        raise InvalidArgumentError("output dimensions must be positive")
    gx, gy = np.meshgrid(np.arange(out_w, dtype=np.float64), np.arange(out_h, dtype=np.float64))
    src = apply_homography(hinv, np.stack([gx, gy], axis=-1))
    return sample_bilinear(arr, src[..., 0], src[..., 1])


def bilinear_matrix(xs, ys, width, height):
    """Sparse matrix form of :func:`~textprop.imgcore.sample_bilinear`.

    Row ``i`` holds the interpolation weights of sample ``(xs[i], ys[i])`` over
    the row-major pixels of a ``width`` x ``height`` image, with the same
    replicate-edge clipping.
    """
    xs = np.clip(np.ravel(xs).astype(np.float64), 0.0, width - 1)
    ys = np.clip(np.ravel(ys).astype(np.float64), 0.0, height - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    fx, fy = xs - x0, ys - y0
    rows = np.tile(np.arange(len(xs)), 4)
    cols = np.concatenate([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1])
    vals = np.concatenate([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy])
    return sparse.csr_matrix((vals, (rows, cols)), shape=(len(xs), width * height))


def roundtrip_operator(h, size, frame_size):
    """Linear map of a canonical ROI through ``h^-1`` into the frame and back through ``h``.

    Models what a canonical image looks like after being inserted into the
    frame and frontalized again, i.e. the two bilinear resamplings that
    separate a propagated ROI from its frontalized observation. Returns a
    sparse ``(W*H, W*H)`` matrix acting on row-major pixels.
    """
    w, hgt = size
    fw, fh = frame_size
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(hgt, dtype=np.float64))
    fpts = apply_homography(invert(h), np.stack([gx.ravel(), gy.ravel()], axis=-1))
    into_roi = bilinear_matrix(fpts[:, 0], fpts[:, 1], fw, fh)
    used = np.unique(into_roi.indices)
    uy, ux = np.divmod(used, fw)
    cpts = apply_homography(h, np.stack([ux, uy], axis=-1).astype(np.float64))
    into_frame = bilinear_matrix(cpts[:, 0], cpts[:, 1], w, hgt)
    return (into_roi[:, used] @ into_frame).tocsr()


def smooth_sequence(values, lambda_t=10.0):
    """First-difference smoothing of each column of an ``(n, d)`` array.

    Solves ``min sum (s - t)^2 + lambda_t * sum (s[i+1] - s[i])^2`` per column,
    i.e. the tridiagonal system ``(I + lambda_t * D'D) s = t``.
    """
    if lambda_t < 0:
        raise InvalidArgumentError(f"lambda_t must be >= 0; got {lambda_t}")
    values = np.asarray(values, dtype=np.float64)
    n = len(values)
    if n < 1:
        raise InvalidArgumentError("sequence must contain at least one sample")
    if lambda_t == 0 or n == 1:
        return values.copy()
    # upper banded storage of I + lambda_t * D'D
    ab = np.zeros((2, n))
    ab[0, 1:] = -lambda_t
    ab[1, :] = 1.0 + 2.0 * lambda_t
    ab[1, 0] = ab[1, -1] = 1.0 + lambda_t
    return solveh_banded(ab, values)


def smooth_parameter_sequence(seq, lambda_t=10.0):
    """Temporally smooth a homography sequence.

    Each of the eight free entries of the normalized matrices is smoothed with
    :func:`smooth_sequence`.
    """
    if len(seq) < 1:
        raise InvalidArgumentError("sequence must contain at least one homography")
    theta = np.stack([normalize(m).ravel()[:8] for m in seq])
    smoothed = smooth_sequence(theta, lambda_t)
    return [np.append(row, 1.0).reshape(3, 3) for row in smoothed]


def _shading_normalized(img, sigma):
    y = luma2d(img).astype(np.float32)
    return y / (cv2.GaussianBlur(y, (0, 0), sigma) + np.float32(0.01))


def register_homography(template, roi, max_correction=2.0, shading_sigma=8.0):
    """Homography ``c`` with ``roi(c(x)) ~= template(x)`` by ECC maximization.

    Both images are divided by a wide Gaussian local mean first, which removes
    smooth shading so that shadows and gain ramps do not pull the alignment.
    Returns ``None`` when ECC does not converge or when the correction moves
    any corner of the image by more than ``max_correction`` pixels.
    """
    a, b = check_image(template, "template"), check_image(roi, "roi")
    h, w = a.shape[:2]
    crit = (cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, 100, 1e-6)
    try:
        _, c = cv2.findTransformECC(_shading_normalized(a, shading_sigma),
                                    _shading_normalized(b, shading_sigma),
                                    np.eye(3, dtype=np.float32), cv2.MOTION_HOMOGRAPHY, crit, None, 5)
    except cv2.error:
        return None
    c = c.astype(np.float64)
    if not np.all(np.isfinite(c)) or abs(np.linalg.det(c)) < 1e-6:
        return None
    corners = canonical_quad(w, h)
    if np.abs(apply_homography(c, corners) - corners).max() > max_correction:
        return None
    return normalize(c)


def frontalness_score(quad):
    """Quad area divided by the area of its axis-aligned bounding rectangle."""
    q = check_quad(quad)
    extent = q.max(axis=0) - q.min(axis=0)
    return abs(shoelace_area(q)) / (extent[0] * extent[1])


def signed_distance_to_quad(quad, xs, ys):
    """Distance from points to the boundary of a convex quad, positive inside.

    Outside the quad this is the largest signed edge distance, which equals the
    true distance except in the corner wedges.
    """
    q = check_quad(quad)
    if shoelace_area(q) < 0:
        q = q[::-1]
    dist = np.full(np.shape(xs), np.inf)
    for i in range(4):
        p0, p1 = q[i], q[(i + 1) % 4]
        e = p1 - p0
        length = np.hypot(e[0], e[1])
        # inward normal for clockwise-on-screen (positive area) ordering
        nx, ny = -e[1] / length, e[0] / length
        d = (xs - p0[0]) * nx + (ys - p0[1]) * ny
        dist = np.minimum(dist, d)
    return dist
