"""Image containers, NPY/PNG I/O, normalization and transmission reconstruction.

Images are plain 2-D ``float64`` numpy arrays; masks are 2-D boolean arrays
of the same shape. Every function returns a new array and leaves its inputs
untouched.
"""

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from artifact.errors import (
    ArtifactIOError,
    DegenerateScaleError,
    DomainError,
    FormatError,
    GeometryError,
    ParameterError,
    ShapeError,
)

DEFAULT_FLOOR = 1e-6
DEFAULT_EPSILON = 1e-6


@dataclass(frozen=True)
class Roi:
    """Axis-aligned rectangle in pixel coordinates (x is the column)."""

    x0: int
    y0: int
    width: int
    height: int

    def __post_init__(self):
        if self.x0 < 0 or self.y0 < 0:
            raise GeometryError(f"ROI origin must be non-negative, got ({self.x0}, {self.y0})")
        if self.width < 1 or self.height < 1:
            raise GeometryError(f"ROI size must be positive, got {self.width}x{self.height}")

    @property
    def slices(self):
        return (slice(self.y0, self.y0 + self.height), slice(self.x0, self.x0 + self.width))

    @property
    def area(self):
        return self.width * self.height

    def check_inside(self, shape):
        h, w = shape[:2]
        if self.x0 + self.width > w or self.y0 + self.height > h:
            raise GeometryError(f"{self} does not fit inside image of shape {shape}")
        return self

    def crop(self, img):
        self.check_inside(np.shape(img))
        return np.array(img[self.slices], dtype=np.float64)

    def mask(self, shape):
        m = np.zeros(shape, dtype=bool)
        m[self.check_inside(shape).slices] = True
        return m

    @classmethod
    def parse(cls, text):
        """Parse ``"x0,y0,w,h"``."""
        try:
            x0, y0, w, h = (int(v) for v in str(text).split(","))
        except ValueError as exc:
            raise ParameterError(f"ROI must be 'x0,y0,width,height', got {text!r}") from exc
        return cls(x0, y0, w, h)

    @classmethod
    def full(cls, shape):
        return cls(0, 0, shape[1], shape[0])

    def to_list(self):
        return [self.x0, self.y0, self.width, self.height]


def as_image(data):
    """Validate and convert ``data`` to a finite 2-D float64 array."""
    arr = np.array(data, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"expected a non-empty 2-D image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError("image contains NaN or infinite values")
    return arr


def as_mask(data, shape=None):
    m = np.asarray(data)
    if m.dtype != bool:
        if not np.all((m == 0) | (m == 1)):
            raise DomainError("mask values must be 0 or 1")
        m = m.astype(bool)
    if shape is not None and m.shape != tuple(shape):
        raise ShapeError(f"mask shape {m.shape} does not match image shape {tuple(shape)}")
    return m


def _check_same_shape(a, b, what="images"):
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"{what} differ in shape: {np.shape(a)} vs {np.shape(b)}")


# -- NPY I/O ----------------------------------------------------------------

def load_npy(path):
    """Read a 2-D numeric NPY file as a float64 image."""
    fmt = np.lib.format
    try:
        with open(path, "rb") as fh:
            try:
                fmt.read_magic(fh)
                fh.seek(0)
                arr = fmt.read_array(fh, allow_pickle=False)
            except ValueError as exc:
                raise FormatError(f"{path}: not a valid NPY file ({exc})") from exc
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    if arr.ndim != 2:
        raise ShapeError(f"{path}: expected a 2-D array, found shape {arr.shape}")
    if arr.dtype.kind not in "biuf":
        raise FormatError(f"{path}: non-numeric dtype {arr.dtype}")
    return as_image(arr)


def save_npy(img, path):
    """Write ``img`` as NPY v1.0, little-endian float64, C order."""
    arr = np.ascontiguousarray(img, dtype="<f8")
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D image, got shape {arr.shape}")
    try:
        with open(path, "wb") as fh:
            np.lib.format.write_array(fh, arr, version=(1, 0), allow_pickle=False)
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


def save_png(img, path, log_scale=False):
    """Min-max scaled 8-bit grayscale PNG for visual inspection only."""
    from PIL import Image

    arr = np.asarray(img, dtype=np.float64)
    if log_scale:
        arr = np.log(arr - arr.min() + 1e-12)
    lo, hi = float(arr.min()), float(arr.max())
    scaled = np.zeros_like(arr) if hi <= lo else (arr - lo) / (hi - lo)
    try:
        Image.fromarray(np.round(scaled * 255).astype(np.uint8), mode="L").save(Path(path))
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc


# -- normalization and reconstruction --------------------------------------

def percentile_normalize(img, p=90.0):
    """Divide by the ``p``-th percentile (linear interpolation between order statistics)."""
    if not 0 < p <= 100:
        raise ParameterError(f"percentile must be in (0, 100], got {p}")
    img = as_image(img)
    scale = float(np.percentile(img, p))
    if scale == 0.0:
        raise DegenerateScaleError(f"{p}th percentile is zero; cannot normalize")
    return img / scale


def prepare_frame(img, percentile=90.0, crop=None, normalize_first=True):
    """Percentile-normalize and crop a raw frame, in the configured order."""
    if crop is None:
        return percentile_normalize(img, percentile)
    if normalize_first:
        return crop.crop(percentile_normalize(img, percentile))
    return percentile_normalize(crop.crop(img), percentile)


def reconstruct_transmission(shot, flat, floor=DEFAULT_FLOOR):
    """Flat-field normalized transmission ``shot / max(flat, floor)``."""
    _check_same_shape(shot, flat, "shot and flat")
    if floor <= 0:
        raise ParameterError("floor must be positive")
    return as_image(shot) / np.maximum(as_image(flat), floor)


def to_log(img, epsilon=DEFAULT_EPSILON):
    img = as_image(img)
    if np.any(img < 0):
        raise DomainError("log transform needs non-negative pixels")
    return np.log(img + epsilon)


def from_log(img, epsilon=DEFAULT_EPSILON):
    return np.exp(as_image(img)) - epsilon


def stat_outside_roi(img, roi):
    """Population mean and standard deviation of the pixels outside ``roi``.

    ``roi`` may be a :class:`Roi` or a boolean mask of excluded pixels.
    """
    img = as_image(img)
    if isinstance(roi, Roi):
        excluded = roi.mask(img.shape)
    else:
        excluded = as_mask(roi, img.shape)
    values = img[~excluded]
    if values.size == 0:
        raise GeometryError("ROI covers the whole image; no pixels left outside it")
    return float(values.mean()), float(values.std())
