"""Image-quality metrics, filament-length measurement and RMSPE."""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter1d, map_coordinates

from artifact.errors import DomainError, GeometryError, NotFoundError, ParameterError, ShapeError
from artifact.imaging import Roi, as_image


@dataclass
class EvalReport:
    mssim: float = None
    psnr: float = None
    mse: float = None
    sigma_t_outside: float = None
    filament_lengths: list = field(default_factory=list)   # [(id, length_px)]
    rmspe: float = None

    def to_dict(self):
        d = asdict(self)
        d["filament_lengths"] = [[int(i), float(v)] for i, v in self.filament_lengths]
        if d["psnr"] is not None and math.isinf(d["psnr"]):
            d["psnr"] = "inf"
        return d


def _pair(a, b, roi):
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ShapeError(f"images differ in shape: {a.shape} vs {b.shape}")
    if roi is not None:
        a, b = roi.crop(a), roi.crop(b)
    return a, b


def mse(a, b, roi=None):
    a, b = _pair(a, b, roi)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, roi=None, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical."""
    err = mse(a, b, roi)
    if err == 0.0:
        return math.inf
    return float(10.0 * math.log10(peak ** 2 / err))


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (x / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img, g):
    """Separable weighted average over every window lying fully inside ``img``."""
    rows = sliding_window_view(img, g.size, axis=1) @ g
    return sliding_window_view(rows, g.size, axis=0) @ g


def ssim_map(a, b, window=11, sigma=1.5, K1=0.01, K2=0.03, data_range=1.0):
    """Local SSIM at every fully-contained window position (population moments)."""
    if min(a.shape) < window:
        raise GeometryError(f"region {a.shape} is smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    C1 = (K1 * data_range) ** 2
    C2 = (K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + C1) * (2 * cov + C2)
    den = (mu_a * mu_a + mu_b * mu_b + C1) * (var_a + var_b + C2)
    return num / den


def mssim(a, b, roi=None, window=11, sigma=1.5, K1=0.01, K2=0.03, data_range=1.0):
    """Mean of the Gaussian-weighted local SSIM over the ROI."""
    a, b = _pair(a, b, roi)
    return float(ssim_map(a, b, window, sigma, K1, K2, data_range).mean())


# -- filament lengths ------------------------------------------------------

@dataclass
class FilamentSpec:
    id: int
    axis: tuple          # unit (ux, uy), pointing from base towards the tip
    base: tuple          # (x, y)
    width: float = 3.0   # averaging width across the filament, px
    polarity: str = "dark"

    def __post_init__(self):
        if self.width < 1:
            raise ParameterError("filament width must be >= 1 px")
        if self.polarity not in ("bright", "dark"):
            raise ParameterError(f"polarity must be 'bright' or 'dark', got {self.polarity!r}")
        n = math.hypot(*self.axis)
        if n == 0:
            raise ParameterError("filament axis must be non-zero")
        object.__setattr__(self, "axis", (self.axis[0] / n, self.axis[1] / n))

    @property
    def sign(self):
        return 1.0 if self.polarity == "bright" else -1.0

    @classmethod
    def from_filament(cls, fil, width_factor=2.0):
        """Spec for a phantom filament, averaging over +-sigma by default."""
        return cls(fil.id, fil.direction, fil.base, max(1.0, width_factor * fil.sigma),
                   "bright" if fil.polarity > 0 else "dark")

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["id"]), tuple(d["axis"]), tuple(d["base"]), float(d.get("width", 3.0)),
                   d.get("polarity", "dark"))

    def to_dict(self):
        return asdict(self)


def filament_lineout(T, spec, step=0.25, across_step=0.5):
    """Width-averaged profile along the filament axis, sampled every ``step`` px from the base.

    Returns ``(s, profile)``; sampling stops where the axis leaves the image.
    """
    T = as_image(T)
    h, w = T.shape
    ux, uy = spec.axis
    bx, by = spec.base
    if not (-0.5 <= bx <= w - 0.5 and -0.5 <= by <= h - 0.5):
        raise GeometryError(f"filament base {spec.base} lies outside the image")
    limits = []
    for u, b, size in ((ux, bx, w), (uy, by, h)):
        if u > 0:
            limits.append((size - 1 - b) / u)
        elif u < 0:
            limits.append(-b / u)
    s_max = min(limits) if limits else 0.0
    s = np.arange(0.0, s_max + 1e-9, step)
    if s.size < 2:
        raise GeometryError("filament axis leaves the image immediately")
    half = spec.width / 2.0
    d = np.arange(-half, half + 1e-9, across_step)
    xs = bx + s[:, None] * ux + d[None, :] * (-uy)
    ys = by + s[:, None] * uy + d[None, :] * ux
    vals = map_coordinates(T, [ys.ravel(), xs.ravel()], order=1, mode="nearest")
    return s, vals.reshape(xs.shape).mean(axis=1)


def measure_filament_length(T, spec, background, threshold_fraction=0.5, mode="half-peak",
                            smooth=1.0, min_peak=1e-9, step=0.25):
    """Distance from the base to the filament endpoint, in px.

    The deviation ``polarity * (lineout - background)`` is smoothed along the
    axis (Gaussian, ``smooth`` px). Its maximum anchors the search; in
    ``"half-peak"`` mode the endpoint is where the deviation first drops below
    ``threshold_fraction`` of that maximum beyond it (linearly interpolated),
    in ``"extremum"`` mode the endpoint is the maximum itself.
    """
    if mode not in ("half-peak", "extremum"):
        raise ParameterError(f"unknown endpoint mode {mode!r}")
    s, prof = filament_lineout(T, spec, step)
    dev = spec.sign * (prof - background)
    if smooth > 0:
        dev = gaussian_filter1d(dev, smooth / step, mode="nearest")
    k = int(np.argmax(dev))
    peak = float(dev[k])
    if not peak > min_peak:
        raise NotFoundError(f"filament {spec.id}: no extremum above the noise floor")
    if mode == "extremum":
        return float(s[k])
    level = threshold_fraction * peak
    below = np.flatnonzero(dev[k:] < level)
    if below.size == 0:
        return float(s[-1])
    j = k + int(below[0])
    d0, d1 = dev[j - 1], dev[j]
    frac = (d0 - level) / (d0 - d1) if d0 != d1 else 0.0
    return float(s[j - 1] + frac * (s[j] - s[j - 1]))


def rmspe(measured, truth):
    """Root-mean-square percentage error."""
    m = np.asarray(measured, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if m.shape != t.shape or m.ndim != 1 or m.size == 0:
        raise ShapeError("measured and truth must be equal-length non-empty sequences")
    if np.any(t == 0):
        raise DomainError("truth contains a zero entry")
    return float(100.0 * np.sqrt(np.mean(((m - t) / t) ** 2)))


def roi_from_mask(mask, pad=0):
    """Bounding rectangle of a boolean mask, grown by ``pad`` and clipped to the image."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise GeometryError("mask is empty")
    h, w = np.shape(mask)
    y0, y1 = max(0, ys.min() - pad), min(h, ys.max() + 1 + pad)
    x0, x1 = max(0, xs.min() - pad), min(w, xs.max() + 1 + pad)
    return Roi(int(x0), int(y0), int(x1 - x0), int(y1 - y0))
