"""Input-transformation baseline defenses.

Two label-free comparison defenses: random resize-and-pad, and pixel
deflection composed with wavelet denoising (deflect, then denoise). The
wavelet step is a multi-level 2-D Haar transform with BayesShrink-style
data-driven soft thresholding, implemented here directly since the
transform itself is only a few lines of numpy.

All functions are pure in (input, rng); none consults the classifier.
"""

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ConfigError
from .seeding import derive_rng
from .validation import check_image_batch

BASELINE_METHODS = ("random_resize", "wd_pd")


@dataclass(frozen=True)
class BaselineSpec:
    method: str = "wd_pd"
    resize_min: int = 32
    resize_max: int = 36              # ~1.1x a 32-px side
    canonical_size: int | None = None  # None: pad to resize_max
    deflections: int = 4               # ~0.4% of pixels at 32x32
    window: int = 10
    threshold_mode: str = "soft"
    interpolation: str = "nearest"

    def __post_init__(self):
        if self.method not in BASELINE_METHODS:
            raise ConfigError(
                f"unknown baseline {self.method!r}; registered: {list(BASELINE_METHODS)}")
        if not (0 < self.resize_min <= self.resize_max):
            raise ConfigError("resize range must satisfy 0 < min <= max")
        if self.deflections < 0:
            raise ConfigError("deflection count must be >= 0")
        if self.threshold_mode not in ("soft", "hard"):
            raise ConfigError("threshold_mode must be 'soft' or 'hard'")
        if self.interpolation not in ("nearest", "bilinear"):
            raise ConfigError("interpolation must be 'nearest' or 'bilinear'")


def default_baseline_specs(image_size: int) -> dict:
    """Desk defaults: resize up to 1.1x; deflections ~0.4% of pixels."""
    return {
        "random_resize": BaselineSpec(
            method="random_resize", resize_min=image_size,
            resize_max=int(round(1.1 * image_size))),
        "wd_pd": BaselineSpec(
            method="wd_pd",
            deflections=max(1, round(0.004 * image_size * image_size))),
    }


# ---------------------------------------------------------------------------
# random resize + pad
# ---------------------------------------------------------------------------

def random_resize_pad(x, rng: np.random.Generator, spec: BaselineSpec) -> np.ndarray:
    """Resize each image to a random side in the spec range, then zero-pad
    it at a random offset onto the canonical canvas.

    The canonical side defaults to the top of the resize range, so the
    degenerate range (S, S) is the identity under nearest interpolation.
    """
    x = check_image_batch(x, "x")
    size = x.shape[1]
    if not (size <= spec.resize_min and spec.resize_max <= int(1.25 * size) + 1):
        raise ConfigError(
            f"resize range [{spec.resize_min}, {spec.resize_max}] must lie within "
            f"[{size}, {int(1.25 * size)}] for {size}px inputs")
    canonical = spec.canonical_size or spec.resize_max
    if canonical < spec.resize_max:
        raise ConfigError("canonical_size must be >= resize_max")
    n, _, _, c = x.shape
    out = np.zeros((n, canonical, canonical, c), dtype=np.float32)
    for i in range(n):
        side = int(rng.integers(spec.resize_min, spec.resize_max + 1))
        resized = _resize_image(x[i], side, spec.interpolation)
        oy = int(rng.integers(0, canonical - side + 1))
        ox = int(rng.integers(0, canonical - side + 1))
        out[i, oy:oy + side, ox:ox + side] = resized
    return np.clip(out, 0.0, 1.0)


def _resize_image(img: np.ndarray, side: int, interpolation: str) -> np.ndarray:
    if side == img.shape[0] and interpolation == "nearest":
        return img
    t = torch.tensor(img.transpose(2, 0, 1)[None], dtype=torch.float32)
    kwargs = {} if interpolation == "nearest" else {"align_corners": False}
    t = F.interpolate(t, size=(side, side), mode=interpolation, **kwargs)
    return t[0].permute(1, 2, 0).numpy()


# ---------------------------------------------------------------------------
# pixel deflection
# ---------------------------------------------------------------------------

def pixel_deflection(x, rng: np.random.Generator, count: int,
                     window: int) -> np.ndarray:
    """Replace ``count`` random pixels per image with a neighbor's value.

    Each deflected pixel copies all channels from a uniformly chosen
    pixel at most ``window`` away (sources read from the input image);
    untouched pixels are bit-identical to the input.
    """
    x = check_image_batch(x, "x")
    if count < 0:
        raise ValueError("count must be >= 0")
    out = x.copy()
    if count == 0:
        return out
    n, h, w, _ = x.shape
    for i in range(n):
        ty = rng.integers(0, h, size=count)
        tx = rng.integers(0, w, size=count)
        dy = rng.integers(-window, window + 1, size=count)
        dx = rng.integers(-window, window + 1, size=count)
        sy = np.clip(ty + dy, 0, h - 1)
        sx = np.clip(tx + dx, 0, w - 1)
        out[i, ty, tx, :] = x[i, sy, sx, :]
    return out


# ---------------------------------------------------------------------------
# wavelet denoising (2-D Haar + BayesShrink)
# ---------------------------------------------------------------------------

def _haar_forward(a: np.ndarray):
    """One Haar level. Returns (LL, (LH, HL, HH), pad) with pad the
    bottom/right edge padding applied to make the sides even."""
    pad = (a.shape[0] % 2, a.shape[1] % 2)
    if pad[0] or pad[1]:
        a = np.pad(a, ((0, pad[0]), (0, pad[1])), mode="edge")
    s = 1.0 / np.sqrt(2.0)
    lo_r = (a[0::2, :] + a[1::2, :]) * s
    hi_r = (a[0::2, :] - a[1::2, :]) * s
    ll = (lo_r[:, 0::2] + lo_r[:, 1::2]) * s
    lh = (lo_r[:, 0::2] - lo_r[:, 1::2]) * s
    hl = (hi_r[:, 0::2] + hi_r[:, 1::2]) * s
    hh = (hi_r[:, 0::2] - hi_r[:, 1::2]) * s
    return ll, (lh, hl, hh), pad


def _haar_inverse(ll, details, pad):
    lh, hl, hh = details
    s = 1.0 / np.sqrt(2.0)
    lo_r = np.empty((ll.shape[0], 2 * ll.shape[1]))
    hi_r = np.empty_like(lo_r)
    lo_r[:, 0::2] = (ll + lh) * s
    lo_r[:, 1::2] = (ll - lh) * s
    hi_r[:, 0::2] = (hl + hh) * s
    hi_r[:, 1::2] = (hl - hh) * s
    a = np.empty((2 * lo_r.shape[0], lo_r.shape[1]))
    a[0::2, :] = (lo_r + hi_r) * s
    a[1::2, :] = (lo_r - hi_r) * s
    if pad[0]:
        a = a[:-1, :]
    if pad[1]:
        a = a[:, :-1]
    return a


def _denoise_channel(ch: np.ndarray, mode: str, levels: int) -> np.ndarray:
    ch = ch.astype(np.float64)
    stack = []
    ll = ch
    for _ in range(levels):
        if min(ll.shape) < 4:
            break
        ll, details, pad = _haar_forward(ll)
        stack.append((details, pad))
    if not stack:
        return ch
    # noise scale from the finest diagonal band (robust MAD estimate)
    hh1 = stack[0][0][2]
    sigma = np.median(np.abs(hh1)) / 0.6745
    if sigma <= 0:
        return ch
    for level, (details, pad) in enumerate(stack):
        shrunk = []
        for d in details:
            var_y = float(np.mean(d * d))
            sig_x = np.sqrt(max(var_y - sigma * sigma, 0.0))
            thr = sigma * sigma / sig_x if sig_x > 0 else float(np.abs(d).max())
            if mode == "soft":
                shrunk.append(np.sign(d) * np.maximum(np.abs(d) - thr, 0.0))
            else:
                shrunk.append(np.where(np.abs(d) > thr, d, 0.0))
        stack[level] = (tuple(shrunk), pad)
    for details, pad in reversed(stack):
        ll = _haar_inverse(ll, details, pad)
    return ll


def wavelet_denoise(x, threshold_mode: str = "soft", levels: int = 3) -> np.ndarray:
    """Per-channel Haar wavelet shrinkage with a BayesShrink threshold."""
    x = check_image_batch(x, "x")
    if threshold_mode not in ("soft", "hard"):
        raise ValueError("threshold_mode must be 'soft' or 'hard'")
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        for c in range(x.shape[3]):
            out[i, :, :, c] = _denoise_channel(x[i, :, :, c], threshold_mode, levels)
    return np.clip(out, 0.0, 1.0)


def wd_pd(x, rng: np.random.Generator, spec: BaselineSpec) -> np.ndarray:
    """Pixel deflection followed by wavelet denoising."""
    deflected = pixel_deflection(x, rng, spec.deflections, spec.window)
    return wavelet_denoise(deflected, spec.threshold_mode)


# ---------------------------------------------------------------------------
# estimator wrapper
# ---------------------------------------------------------------------------

class BaselineDefense(BaseEstimator, TransformerMixin):
    """Stateless transformer over one baseline method.

    ``transform`` reseeds from random_state on every call, so repeated
    applications of the same fitted object are reproducible.
    """

    def __init__(self, method="wd_pd", spec=None, random_state=0):
        self.method = method
        self.spec = spec
        self.random_state = random_state

    def fit(self, X=None, y=None):
        return self

    def _resolved_spec(self, image_size: int) -> BaselineSpec:
        if self.spec is not None:
            return self.spec
        return default_baseline_specs(image_size)[self.method]

    def transform(self, X):
        X = check_image_batch(X, "X")
        spec = self._resolved_spec(X.shape[1])
        if spec.method != self.method:
            raise ConfigError(
                f"spec.method {spec.method!r} does not match method {self.method!r}")
        rng = derive_rng(self.random_state, "baseline", self.method)
        if self.method == "random_resize":
            return random_resize_pad(X, rng, spec)
        return wd_pd(X, rng, spec)
