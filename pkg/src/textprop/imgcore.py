"""Image primitives: validation, luminance, convolution, resampling, PNG I/O.

Images are ``numpy`` float arrays of shape ``(H, W, C)`` with ``C`` in {1, 3}
and values in [0, 1]. Two-dimensional arrays are accepted wherever an image is
expected and treated as single-channel.
"""

import os

import cv2
import numpy as np
from scipy.signal import fftconvolve

from .exceptions import InvalidArgumentError

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])

# Above this kernel radius the FFT path is faster than direct summation.
_FFT_RADIUS = 3


def check_image(img, name="img", channels=None):
    """Validate an image and return it as a float64 ``(H, W, C)`` array."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise InvalidArgumentError(
            f"{name} must have shape (H, W), (H, W, 1) or (H, W, 3); got {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise InvalidArgumentError(f"{name} is empty")
    if channels is not None and arr.shape[2] != channels:
        raise InvalidArgumentError(f"{name} must have {channels} channel(s); got {arr.shape[2]}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{name} contains non-finite values")
    return arr


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        raise InvalidArgumentError(
            f"{names[0]} and {names[1]} differ in shape: {a.shape} vs {b.shape}")


def to_luminance(img):
    """Rec. 601 luma of an RGB image, returned as ``(H, W, 1)``."""
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InvalidArgumentError(f"to_luminance expects a 3-channel image; got shape {arr.shape}")
    arr = check_image(arr, channels=3)
    return (arr @ LUMA_WEIGHTS)[:, :, None]


def luma2d(img):
    """Luminance as a 2-D array; single-channel input passes through."""
    arr = check_image(img)
    if arr.shape[2] == 1:
        return arr[:, :, 0]
    return arr @ LUMA_WEIGHTS


def check_kernel(kernel):
    k = np.asarray(kernel, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 != 1:
        raise InvalidArgumentError(f"kernel must be square with odd side; got {k.shape}")
    return k


def kernel_radius(kernel):
    return (np.asarray(kernel).shape[0] - 1) // 2


def convolve(img, kernel, clamp=True):
    """Dense 2-D convolution with replicate (clamp-to-edge) borders.

    Each channel is convolved independently. The kernel is a square array of
    odd side ``2 * radius + 1``; its radius must be smaller than both image
    dimensions. Set ``clamp=False`` to get the raw linear response.
    """
    arr = check_image(img)
    k = check_kernel(kernel)
    r = kernel_radius(k)
    h, w = arr.shape[:2]
    if r >= min(h, w):
        raise InvalidArgumentError(
            f"kernel radius {r} must be smaller than image size {w}x{h}")
    if r == 0:
        out = arr * k[0, 0]
    elif r <= _FFT_RADIUS:
        padded = np.pad(arr, ((r, r), (r, r), (0, 0)), mode="edge")
        out = np.zeros_like(arr)
        # true convolution: output(y, x) = sum k(i, j) * img(y - i, x - j)
        for i in range(-r, r + 1):
            for j in range(-r, r + 1):
                wgt = k[i + r, j + r]
                if wgt != 0.0:
                    out += wgt * padded[r - i:r - i + h, r - j:r - j + w]
    else:
        padded = np.pad(arr, ((r, r), (r, r), (0, 0)), mode="edge")
        out = fftconvolve(padded, k[:, :, None], mode="valid", axes=(0, 1))
    if clamp:
        out = np.clip(out, 0.0, 1.0)
    return out


def sample_bilinear(img, xs, ys):
    """Sample ``img`` at float coordinates with replicate-edge bilinear interpolation.

    ``xs`` and ``ys`` are arrays of equal shape S; the result has shape S + (C,).
    Pixel centers sit at integer coordinates.
    """
    h, w = img.shape[:2]
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, w - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bottom = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def resample_bilinear(img, out_w, out_h):
    """Resize with bilinear interpolation on pixel centers.

    Uses the half-pixel convention ``src = (dst + 0.5) * scale - 0.5``. When the
    size is unchanged the input is returned as an exact copy.
    """
    arr = check_image(img)
    if int(out_w) != out_w or int(out_h) != out_h:
        raise InvalidArgumentError("output dimensions must be integers")
    out_w, out_h = int(out_w), int(out_h)
    if out_w < 2 or out_h < 2:
        raise InvalidArgumentError(f"output dimensions must be >= 2; got {out_w}x{out_h}")
    h, w = arr.shape[:2]
    if (out_w, out_h) == (w, h):
        return arr.copy()
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    gx, gy = np.meshgrid(xs, ys)
    return sample_bilinear(arr, gx, gy)


def read_png(path):
    """Load an 8- or 16-bit PNG as a float image in [0, 1]."""
    path = os.fspath(path)
    data = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if data is None:
        raise FileNotFoundError(f"cannot read image: {path}")
    scale = 65535.0 if data.dtype == np.uint16 else 255.0
    data = data.astype(np.float64) / scale
    if data.ndim == 2:
        return data[:, :, None]
    if data.shape[2] == 4:
        data = data[:, :, :3]
    return np.ascontiguousarray(data[:, :, ::-1])


def to_uint8(img):
    arr = check_image(img)
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img):
    """Write a float image as an 8-bit PNG using ``round(x * 255)``."""
    data = to_uint8(img)
    if data.shape[2] == 3:
        data = data[:, :, ::-1]
    else:
        data = data[:, :, 0]
    if not cv2.imwrite(os.fspath(path), np.ascontiguousarray(data)):
        raise OSError(f"cannot write image: {path}")
