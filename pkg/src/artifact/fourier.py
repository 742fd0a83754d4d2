"""Fourier-domain artifact suppression: low-frequency masking plus magnitude thresholding."""

from dataclasses import asdict, dataclass

import numpy as np

from artifact.errors import ParameterError
from artifact.imaging import DEFAULT_FLOOR, as_image, reconstruct_transmission


@dataclass(frozen=True)
class FourierFilterConfig:
    lowfreq_radius: int = 20
    magnitude_percentile: float = 99.5
    exclude_dc_region_from_threshold: bool = True
    threshold_after_mask: bool = True

    def __post_init__(self):
        if not 0 < self.magnitude_percentile < 100:
            raise ParameterError("magnitude_percentile must lie in (0, 100)")
        if self.lowfreq_radius < 0:
            raise ParameterError("lowfreq_radius must be non-negative")

    def check_shape(self, shape):
        if not 0 < self.lowfreq_radius < min(shape) / 2:
            raise ParameterError(
                f"lowfreq_radius {self.lowfreq_radius} must lie in (0, {min(shape) / 2}) for shape {shape}")
        return self

    def to_dict(self):
        return asdict(self)


def fft2(img):
    return np.fft.fft2(as_image(img))


def ifft2(spec):
    """Inverse transform; returns the real part."""
    return np.fft.ifft2(spec).real


def dc_distance(shape):
    """Integer-frequency distance of every FFT bin from DC (unshifted layout)."""
    h, w = shape
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    return np.hypot(ky[:, None], kx[None, :])


def lowfreq_mask(shape, radius):
    """True on the bins removed by the low-frequency mask (distance from DC <= radius)."""
    return dc_distance(shape) <= radius


def filter_spectrum(spec, cfg):
    """Apply both suppression steps to a spectrum, returning a new array."""
    spec = np.array(spec, dtype=np.complex128)
    low = lowfreq_mask(spec.shape, cfg.lowfreq_radius)
    mag = np.abs(spec)
    if cfg.threshold_after_mask:
        pool = ~low if cfg.exclude_dc_region_from_threshold else np.ones(spec.shape, dtype=bool)
        spec[low] = 0.0
        candidates = np.abs(spec)[pool]
        candidates = candidates[candidates > 0]
    else:
        pool = ~low if cfg.exclude_dc_region_from_threshold else np.ones(spec.shape, dtype=bool)
        candidates = mag[pool]
        spec[low] = 0.0
    if candidates.size:
        threshold = np.percentile(candidates, cfg.magnitude_percentile)
        spec[np.abs(spec) > threshold] = 0.0
    return spec


def filter_image(img, cfg=FourierFilterConfig()):
    """Suppress low-frequency background and the strongest spectral peaks, then restore the mean.

    The low-frequency mask is symmetric about DC on the integer frequency grid
    and the magnitude threshold treats conjugate pairs identically, so the
    filtered spectrum stays Hermitian and its inverse is real.
    """
    img = as_image(img)
    cfg.check_shape(img.shape)
    filtered = ifft2(filter_spectrum(np.fft.fft2(img), cfg))
    return filtered + (img.mean() - filtered.mean())


def filter_and_reconstruct(shot, flat, cfg=FourierFilterConfig(), floor=DEFAULT_FLOOR):
    """Transmission from independently filtered shot and flat."""
    return reconstruct_transmission(filter_image(shot, cfg), filter_image(flat, cfg), floor)
