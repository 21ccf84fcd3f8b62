"""Oriented-Gaussian differential blur model and its per-window parameter fitter.

The transform maps a reference ROI ``I`` to ``(1 + w) I - w (I * G)`` where
``G`` is a normalized Gaussian with widths ``sigma_x``, ``sigma_y`` rotated by
``rho`` degrees. Since the output equals ``I + w (I - I * G)``, ``w < 0``
blurs (``w == -1`` is plain Gaussian blur), ``w > 0`` sharpens by unsharp
masking and ``w == 0`` is the identity.

Fitting is a two-stage numerical search: a coarse grid over kernel shape
(with ``w`` solved in closed form at each node) seeds a damped Gauss-Newton
refinement of the full windowed objective

    J = lambda_R * sum_i MSE(apply(ref_i, psi_i), target_i)
        + lambda_T * sum_i |psi_i - psi_{i+1}|^2
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft as sfft
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .exceptions import InvalidArgumentError
from .imgcore import check_image, convolve

SIGMA_MIN = 0.1
SIGMA_MAX = 5.0
MAX_RADIUS = int(math.ceil(3 * SIGMA_MAX))

# Unit conversion applied to each parameter inside the temporal penalty.
_TEMPORAL_SCALE = np.array([1.0, 1.0, math.pi / 180.0, 1.0])
_LOWER = np.array([SIGMA_MIN, SIGMA_MIN, -np.inf, -1.0])
_UPPER = np.array([SIGMA_MAX, SIGMA_MAX, np.inf, 1.0])


@dataclass(frozen=True)
class BlurParams:
    """Differential blur parameters: widths in pixels, angle in degrees, blend weight."""

    sigma_x: float = SIGMA_MIN
    sigma_y: float = SIGMA_MIN
    rho: float = 0.0
    w: float = 0.0

    def __post_init__(self):
        for name in ("sigma_x", "sigma_y"):
            v = getattr(self, name)
            if not SIGMA_MIN <= v <= SIGMA_MAX:
                raise InvalidArgumentError(f"{name}={v} outside [{SIGMA_MIN}, {SIGMA_MAX}]")
        if not 0.0 <= self.rho < 180.0:
            raise InvalidArgumentError(f"rho={self.rho} outside [0, 180)")
        if not -1.0 <= self.w <= 1.0:
            raise InvalidArgumentError(f"w={self.w} outside [-1, 1]")

    @classmethod
    def clipped(cls, sigma_x, sigma_y, rho, w):
        """Build params after clamping widths and weight and wrapping the angle."""
        rho = float(rho) % 180.0
        if rho >= 180.0:  # float rounding of tiny negatives
            rho = 0.0
        return cls(float(np.clip(sigma_x, SIGMA_MIN, SIGMA_MAX)),
                   float(np.clip(sigma_y, SIGMA_MIN, SIGMA_MAX)),
                   rho, float(np.clip(w, -1.0, 1.0)))

    @classmethod
    def from_array(cls, arr):
        return cls.clipped(*np.asarray(arr, dtype=np.float64))

    def as_array(self):
        return np.array([self.sigma_x, self.sigma_y, self.rho, self.w])

    def swapped(self):
        """Equivalent parameterization with the axes exchanged."""
        return BlurParams.clipped(self.sigma_y, self.sigma_x, self.rho + 90.0, self.w)


IDENTITY = BlurParams()


def wrap_angle_diff(a, b):
    """Signed angular difference on the 180-degree circle, in (-90, 90]."""
    d = (np.asarray(a) - np.asarray(b)) % 180.0
    return np.where(d > 90.0, d - 180.0, d)


def kernel_radius_for(sigma_x, sigma_y):
    return int(math.ceil(3.0 * max(sigma_x, sigma_y)))


def _gaussian_grid(sigma_x, sigma_y, rho_deg, radius):
    rho = math.radians(rho_deg)
    c, s = math.cos(rho), math.sin(rho)
    ax = np.arange(-radius, radius + 1, dtype=np.float64)
    x, y = np.meshgrid(ax, ax)
    xr = x * c + y * s
    yr = -x * s + y * c
    g = np.exp(-(xr ** 2 / sigma_x ** 2 + yr ** 2 / sigma_y ** 2))
    return g / g.sum()


def make_oriented_gaussian(params):
    """Normalized oriented Gaussian kernel of radius ``ceil(3 * max(sigma))``.

    Rows index ``y`` and columns index ``x``, both running from ``-radius`` to
    ``radius``.
    """
    p = params if isinstance(params, BlurParams) else BlurParams(*params)
    radius = kernel_radius_for(p.sigma_x, p.sigma_y)
    return _gaussian_grid(p.sigma_x, p.sigma_y, p.rho, radius)


def apply_differential_transform(img, params):
    """Evaluate ``(1 + w) I - w (I * G)`` with replicate borders, clamped to [0, 1]."""
    arr = check_image(img)
    p = params if isinstance(params, BlurParams) else BlurParams(*params)
    blurred = convolve(arr, make_oriented_gaussian(p), clamp=False)
    return np.clip((1.0 + p.w) * arr - p.w * blurred, 0.0, 1.0)


@dataclass(frozen=True)
class FitConfig:
    """Settings for :func:`fit_blur_params`.

    ``max_shift`` bounds the integer translation searched when aligning each
    target to the reference; 0 disables alignment.
    """

    lambda_R: float = 1.0
    lambda_T: float = 0.1
    window: int = 3
    sigma_grid: tuple = tuple(np.arange(0.25, 5.0, 0.5).round(2))
    rho_grid: tuple = (0.0, 30.0, 60.0, 90.0, 120.0, 150.0)
    max_iter: int = 50
    tol: float = 1e-6
    fd_step: float = 1e-3
    max_shift: int = 5
    n_starts: int = 1

    def __post_init__(self):
        if self.lambda_R < 0 or self.lambda_T < 0:
            raise InvalidArgumentError("loss weights must be >= 0")
        if self.window < 1:
            raise InvalidArgumentError("window must be >= 1")
        if self.max_iter < 0 or self.max_shift < 0 or self.n_starts < 1:
            raise InvalidArgumentError("max_iter, max_shift must be >= 0 and n_starts >= 1")


@dataclass
class FitResult:
    params: list
    objective: float
    converged: bool
    n_iter: int
    shifts: list = field(default_factory=list)


class _SpectralConvolver:
    """Replicate-border convolution at a fixed padded FFT size.

    One instance serves every kernel up to ``MAX_RADIUS`` for images of a
    given height and width, so repeated evaluations share the image spectrum.
    """

    def __init__(self, height, width, pad=MAX_RADIUS):
        self.h, self.w, self.pad = height, width, pad
        self.fshape = (sfft.next_fast_len(height + 2 * pad, real=True),
                       sfft.next_fast_len(width + 2 * pad, real=True))

    def spectrum(self, img):
        p = self.pad
        padded = np.pad(img, ((p, p), (p, p)) + ((0, 0),) * (img.ndim - 2), mode="edge")
        return sfft.rfft2(padded, s=self.fshape, axes=(0, 1))

    def kernel_spectrum(self, kernel):
        r = (kernel.shape[0] - 1) // 2
        emb = np.zeros(self.fshape)
        emb[:r + 1, :r + 1] = kernel[r:, r:]
        if r:
            emb[:r + 1, -r:] = kernel[r:, :r]
            emb[-r:, :r + 1] = kernel[:r, r:]
            emb[-r:, -r:] = kernel[:r, :r]
        return sfft.rfft2(emb)

    def convolve(self, img_spec, kernel):
        ks = self.kernel_spectrum(kernel)
        if img_spec.ndim == 3:
            ks = ks[:, :, None]
        out = sfft.irfft2(img_spec * ks, s=self.fshape, axes=(0, 1))
        p = self.pad
        return out[p:p + self.h, p:p + self.w]


def _kernel(p):
    sx, sy, rho = p[0], p[1], p[2]
    return _gaussian_grid(sx, sy, rho, kernel_radius_for(sx, sy))


def _luma(img):
    if img.shape[2] == 1:
        return img[:, :, 0]
    return img @ np.array([0.299, 0.587, 0.114])


def estimate_shift(ref, target, max_shift):
    """Integer translation ``(dy, dx)`` with ``target(y, x) ~ ref(y - dy, x - dx)``.

    Chosen by maximal normalized cross-correlation of luminance over the
    interior that stays valid for every candidate shift.
    """
    if max_shift == 0:
        return (0, 0)
    a = _luma(ref)
    b = _luma(target)
    m = max_shift
    h, w = a.shape
    tb = b[m:h - m, m:w - m]
    tb = tb - tb.mean()
    nb = np.sqrt((tb ** 2).sum())
    best, best_score = (0, 0), -np.inf
    for dy in range(-m, m + 1):
        for dx in range(-m, m + 1):
            ta = a[m - dy:h - m - dy, m - dx:w - m - dx]
            ta = ta - ta.mean()
            denom = np.sqrt((ta ** 2).sum()) * nb
            score = (ta * tb).sum() / denom if denom > 0 else 0.0
            # strict improvement keeps the smallest shift on ties
            if score > best_score + 1e-12:
                best, best_score = (dy, dx), score
    return best


class _FrameTerm:
    """Data term of one (reference, target) pair, cropped to the aligned overlap.

    With an ``observer`` (a sparse matrix over row-major pixels) the prediction
    is passed through it before comparison, so the fit accounts for any fixed
    linear resampling that separates the prediction from the observed target.
    """

    def __init__(self, ref, target, shift, margin, conv, observer=None):
        self.ref = ref
        self.conv = conv
        self.observer = observer
        self.spec = conv.spectrum(ref)
        h, w = ref.shape[:2]
        dy, dx = shift
        m = margin
        self.src = (slice(m - dy, h - m - dy), slice(m - dx, w - m - dx))
        self.target = target[m:h - m, m:w - m]
        self.count = self.target.size

    def observe(self, img):
        if self.observer is None:
            return img
        flat = img.reshape(-1, img.shape[2]) if img.ndim == 3 else img.reshape(-1)
        return (self.observer @ flat).reshape(img.shape)

    def blurred(self, p):
        return self.conv.convolve(self.spec, _kernel(p))

    def residual(self, p, blurred=None):
        if blurred is None:
            blurred = self.blurred(p)
        w = p[3]
        pred = np.clip((1.0 + w) * self.ref - w * blurred, 0.0, 1.0)
        return self.observe(pred)[self.src] - self.target

    def grid_search(self, cfg, n_best):
        """Best kernel shapes on luminance with ``w`` solved in closed form."""
        ref_l = _luma(self.ref)
        spec_l = self.conv.spectrum(ref_l)
        ref_c = self.observe(ref_l)[self.src]
        t = _luma(self.target) - ref_c
        tt = float((t * t).sum())
        candidates = []
        sig = sorted(cfg.sigma_grid)
        for i, sx in enumerate(sig):
            for sy in sig[:i + 1]:
                rhos = (0.0,) if sx == sy else cfg.rho_grid
                for rho in rhos:
                    b = self.conv.convolve(spec_l, _gaussian_grid(sx, sy, rho, kernel_radius_for(sx, sy)))
                    d = ref_c - self.observe(b)[self.src]
                    dd = float((d * d).sum())
                    dt = float((d * t).sum())
                    w = float(np.clip(dt / dd, -1.0, 1.0)) if dd > 0 else 0.0
                    sse = tt - 2.0 * w * dt + w * w * dd
                    candidates.append((sse, (sx, sy, rho, w)))
        candidates.sort(key=lambda c: c[0])
        return [np.array(c[1]) for c in candidates[:n_best]]


def _project(p):
    q = np.clip(p, np.tile(_LOWER, len(p) // 4), np.tile(_UPPER, len(p) // 4))
    q[2::4] = q[2::4] % 180.0
    return q


def _temporal_residuals(p, n):
    if n < 2:
        return np.zeros(0)
    ps = p.reshape(n, 4)
    diff = ps[:-1] - ps[1:]
    diff[:, 2] = wrap_angle_diff(ps[:-1, 2], ps[1:, 2])
    return (diff * _TEMPORAL_SCALE).ravel()


def _objective(terms, p, cfg, blurred=None):
    n = len(terms)
    data = 0.0
    for i, term in enumerate(terms):
        r = term.residual(p[4 * i:4 * i + 4], None if blurred is None else blurred[i])
        data += float((r * r).sum()) / term.count
    temporal = float((_temporal_residuals(p, n) ** 2).sum())
    return cfg.lambda_R * data + cfg.lambda_T * temporal


def _refine(terms, p0, cfg):
    """Damped Gauss-Newton (Levenberg-Marquardt) with monotone step acceptance."""
    n = len(terms)
    k = 4 * n
    p = _project(p0.copy())
    blurred = [t.blurred(p[4 * i:4 * i + 4]) for i, t in enumerate(terms)]
    cost = _objective(terms, p, cfg, blurred)
    mu = 1e-3
    h = cfg.fd_step
    converged = False
    it = 0
    # temporal term Jacobian: constant, block-bidiagonal
    jt = np.zeros((max(n - 1, 0) * 4, k))
    for i in range(n - 1):
        for j in range(4):
            jt[4 * i + j, 4 * i + j] = _TEMPORAL_SCALE[j]
            jt[4 * i + j, 4 * (i + 1) + j] = -_TEMPORAL_SCALE[j]
    jtj_t = cfg.lambda_T * jt.T @ jt
    lower = np.tile(_LOWER, n)
    upper = np.tile(_UPPER, n)
    lower[2::4], upper[2::4] = -np.inf, np.inf
    while it < cfg.max_iter:
        it += 1
        jtj = np.zeros((k, k))
        grad = cfg.lambda_T * jt.T @ _temporal_residuals(p, n)
        for i, term in enumerate(terms):
            pi = p[4 * i:4 * i + 4]
            r0 = term.residual(pi, blurred[i]).ravel()
            cols = []
            for j in range(4):
                step = h if pi[j] + h <= _UPPER[j] else -h
                pj = pi.copy()
                pj[j] += step
                b = blurred[i] if j == 3 else term.blurred(pj)
                cols.append((term.residual(pj, b).ravel() - r0) / step)
            jd = np.stack(cols, axis=1)
            scale = cfg.lambda_R / term.count
            sl = slice(4 * i, 4 * i + 4)
            jtj[sl, sl] += scale * jd.T @ jd
            grad[sl] += scale * jd.T @ r0
        # parameters resting on a bound with the gradient pushing outward stay fixed
        at_low = (p <= lower) & (grad > 0)
        at_high = (p >= upper) & (grad < 0)
        free = ~(at_low | at_high)
        if not free.any():
            converged = True
            break
        # damping scales with data curvature only: the temporal penalty leaves
        # the common mode of the window unconstrained and must not stiffen it
        diag = np.diag(jtj)[free].copy()
        diag = np.maximum(diag, 1e-6 * diag.max() + 1e-12)
        jf = (jtj + jtj_t)[np.ix_(free, free)]
        gf = grad[free]
        improved = False
        rel = 0.0
        for _ in range(12):
            a = jf + mu * np.diag(diag)
            try:
                delta = np.zeros(k)
                delta[free] = -np.linalg.solve(a, gf)
            except np.linalg.LinAlgError:
                mu *= 4.0
                continue
            p_new = _project(p + delta)
            if np.array_equal(p_new, p):
                break
            b_new = [t.blurred(p_new[4 * i:4 * i + 4]) for i, t in enumerate(terms)]
            cost_new = _objective(terms, p_new, cfg, b_new)
            if cost_new < cost:
                improved = True
                rel = (cost - cost_new) / max(cost, 1e-300)
                p, blurred, cost = p_new, b_new, cost_new
                mu = max(mu / 3.0, 1e-9)
                break
            mu *= 4.0
        if not improved or rel < cfg.tol:
            converged = True
            break
    return p, cost, converged, it


def initial_guess(ref, target, cfg=None, observer=None):
    """Alignment shift and coarse-grid seeds for one (reference, target) pair.

    Returns ``(shift, seeds)`` with ``seeds`` the ``cfg.n_starts`` best grid
    nodes as ``[sigma_x, sigma_y, rho, w]`` arrays. Results can be passed to
    :func:`fit_blur_params` through ``init`` to avoid recomputing them when
    frames are shared by overlapping windows.
    """
    cfg = cfg or FitConfig()
    ref = check_image(ref, "ref")
    target = check_image(target, "target")
    _check_fit_shape(ref, target, cfg)
    shift = estimate_shift(ref, target, cfg.max_shift)
    conv = _SpectralConvolver(*ref.shape[:2])
    term = _FrameTerm(ref, target, shift, cfg.max_shift, conv, observer)
    return shift, term.grid_search(cfg, cfg.n_starts)


def _check_fit_shape(a, b, cfg):
    if a.shape != b.shape:
        raise InvalidArgumentError(f"all images must share shape {a.shape}; got {b.shape}")
    h, w = a.shape[:2]
    if min(h, w) - 2 * cfg.max_shift < 8 or min(h, w) <= MAX_RADIUS:
        raise InvalidArgumentError(f"images of size {w}x{h} are too small to fit")


def fit_blur_params(ref, window, cfg=None, init=None, observers=None):
    """Fit one :class:`BlurParams` per window frame.

    Args:
        ref: reference ROI, or a list with one reference per window frame
            (e.g. references lighting-corrected towards each frame).
        window: list of N target ROIs, all with the reference's shape.
        cfg: :class:`FitConfig`; defaults are used when omitted.
        init: optional list of N ``(shift, seeds)`` pairs from
            :func:`initial_guess`.
        observers: optional list of N sparse matrices (or None entries)
            applied to each prediction before it is compared with its target;
            see :func:`textprop.geometry.roundtrip_operator`.

    Returns:
        :class:`FitResult` holding the fitted parameters in frame order, the
        final objective, a convergence flag, the iteration count and the
        integer shift used to align each target.
    """
    cfg = cfg or FitConfig()
    targets = [check_image(t, "window frame") for t in window]
    if not targets:
        raise InvalidArgumentError("window must contain at least one frame")
    if isinstance(ref, (list, tuple)):
        refs = [check_image(r, "ref") for r in ref]
        if len(refs) != len(targets):
            raise InvalidArgumentError("need one reference per window frame")
    else:
        refs = [check_image(ref, "ref")] * len(targets)
    for img in refs + targets:
        _check_fit_shape(refs[0], img, cfg)
    if init is not None and len(init) != len(targets):
        raise InvalidArgumentError("need one initial guess per window frame")

    conv = _SpectralConvolver(*refs[0].shape[:2])
    if init is None:
        shifts = [estimate_shift(r, t, cfg.max_shift) for r, t in zip(refs, targets)]
    else:
        shifts = [tuple(s) for s, _ in init]
    if observers is None:
        observers = [None] * len(targets)
    elif len(observers) != len(targets):
        raise InvalidArgumentError("need one observer per window frame")
    terms = [_FrameTerm(r, t, s, cfg.max_shift, conv, o)
             for r, t, s, o in zip(refs, targets, shifts, observers)]
    if init is None:
        seeds = [term.grid_search(cfg, cfg.n_starts) for term in terms]
    else:
        seeds = [list(sd) for _, sd in init]

    best = None
    for k in range(cfg.n_starts):
        p0 = np.concatenate([s[min(k, len(s) - 1)] for s in seeds])
        p, cost, converged, it = _refine(terms, p0, cfg)
        if best is None or cost < best[1]:
            best = (p, cost, converged, it)
    p, cost, converged, it = best
    params = [BlurParams.from_array(p[4 * i:4 * i + 4]) for i in range(len(terms))]
    return FitResult(params=params, objective=cost, converged=converged, n_iter=it, shifts=shifts)


class BlurFitter(BaseEstimator):
    """Estimator wrapper: ``fit`` learns per-frame blur params, ``transform`` applies them.

    Typical use mirrors text propagation: fit on the original reference ROI and
    a window of original frames, then transform the replaced reference ROI.
    """

    def __init__(self, lambda_R=1.0, lambda_T=0.1, max_iter=50, tol=1e-6,
                 fd_step=1e-3, max_shift=5, n_starts=1):
        self.lambda_R = lambda_R
        self.lambda_T = lambda_T
        self.max_iter = max_iter
        self.tol = tol
        self.fd_step = fd_step
        self.max_shift = max_shift
        self.n_starts = n_starts

    def _config(self, n):
        return FitConfig(lambda_R=self.lambda_R, lambda_T=self.lambda_T, window=n,
                         max_iter=self.max_iter, tol=self.tol, fd_step=self.fd_step,
                         max_shift=self.max_shift, n_starts=self.n_starts)

    def fit(self, X, y):
        """``X`` is the reference ROI, ``y`` the list of window frames."""
        y = list(y)
        result = fit_blur_params(X, y, self._config(len(y)))
        self.params_ = result.params
        self.objective_ = result.objective
        self.converged_ = result.converged
        self.n_iter_ = result.n_iter
        self.shifts_ = result.shifts
        return self

    def transform(self, X):
        """Apply each fitted parameter set to ``X``; returns one image per frame."""
        check_is_fitted(self, "params_")
        return [apply_differential_transform(X, p) for p in self.params_]
