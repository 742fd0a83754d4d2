"""Enhanced-contrast patch extraction for copy-paste augmentation.

A laser-driven shot is registered against the mean of its cold shots, the
two are subtracted in the log domain, and rectangular crops of the residual
are rescaled to [-1, 1].
"""

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from artifact.errors import ArtifactIOError, CorrelationError, GeometryError, ParameterError, ShapeError
from artifact.imaging import DEFAULT_EPSILON, Roi, as_image, load_npy, save_npy, to_log

MIN_REGION = 16


def phase_correlate(a, b, region=None, keep_fraction=0.25):
    """Integer translation ``(dx, dy)`` such that ``b`` is approximately ``np.roll(a, (dy, dx))``.

    Both images are restricted to ``region`` and mean-subtracted. The
    cross-power spectrum is normalized to unit magnitude on the
    ``keep_fraction`` strongest bins and zeroed elsewhere, then inverted;
    among equal peaks the shift with the smallest magnitude wins.
    ``keep_fraction=1`` is classic phase correlation. Dropping the weak bins
    matters for band-limited textures in thin non-periodic crops, where
    whitened noise-only bins otherwise blur the peak by a pixel.
    """
    if not 0 < keep_fraction <= 1:
        raise ParameterError("keep_fraction must lie in (0, 1]")
    a, b = as_image(a), as_image(b)
    if a.shape != b.shape:
        raise ShapeError(f"images differ in shape: {a.shape} vs {b.shape}")
    if region is not None:
        a, b = region.crop(a), region.crop(b)
    h, w = a.shape
    if h < MIN_REGION or w < MIN_REGION:
        raise GeometryError(f"registration region {w}x{h} is smaller than {MIN_REGION}x{MIN_REGION}")
    cross = np.conj(np.fft.fft2(a - a.mean())) * np.fft.fft2(b - b.mean())
    mag = np.abs(cross)
    scale = mag.max()
    if not scale > 0:
        raise CorrelationError("registration region has no spectral content", {"shape": [h, w]})
    keep = mag > scale * 1e-12
    if keep_fraction < 1:
        keep &= mag >= np.quantile(mag[keep], 1.0 - keep_fraction)
    norm = np.zeros_like(cross)
    norm[keep] = cross[keep] / mag[keep]
    corr = np.fft.ifft2(norm).real
    peak = corr.max()
    ties = np.argwhere(corr >= peak - 1e-9 * abs(peak))
    dy = np.where(ties[:, 0] > h // 2, ties[:, 0] - h, ties[:, 0])
    dx = np.where(ties[:, 1] > w // 2, ties[:, 1] - w, ties[:, 1])
    best = min(zip(dx * dx + dy * dy, np.abs(dy), np.abs(dx), dy, dx))
    return int(best[4]), int(best[3])


def shift_image(img, shift):
    """Circular integer shift by ``(dx, dy)``."""
    dx, dy = shift
    return np.roll(as_image(img), (int(dy), int(dx)), axis=(0, 1))


def residual(shot, cold_mean, shift=(0, 0), epsilon=DEFAULT_EPSILON):
    """Log-domain residual ``log(shot + eps) - log(shifted cold_mean + eps)``."""
    shot, cold_mean = as_image(shot), as_image(cold_mean)
    if shot.shape != cold_mean.shape:
        raise ShapeError(f"shot {shot.shape} and cold mean {cold_mean.shape} differ in shape")
    return to_log(shot, epsilon) - shift_image(to_log(cold_mean, epsilon), shift)


@dataclass
class Patch:
    data: np.ndarray
    source: str
    rect: Roi
    vmin: float
    vmax: float

    def denormalize(self):
        """Undo the [-1, 1] rescaling."""
        if self.vmax == self.vmin:
            return np.full_like(self.data, self.vmin)
        return (self.data + 1.0) / 2.0 * (self.vmax - self.vmin) + self.vmin

    def meta(self):
        return {"source": self.source, "rect": self.rect.to_list(), "min": self.vmin, "max": self.vmax}


@dataclass
class PatchBank:
    patches: list = field(default_factory=list)
    domain: str = "log-residual"

    def __len__(self):
        return len(self.patches)

    def arrays(self):
        return [p.data for p in self.patches]

    def extend(self, other):
        self.patches.extend(other.patches)
        return self

    def save(self, out_dir):
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            meta = []
            for i, p in enumerate(self.patches):
                name = f"patch_{i:03d}.npy"
                save_npy(p.data, out / name)
                meta.append({"file": name, **p.meta()})
            (out / "bank.json").write_text(json.dumps({"domain": self.domain, "patches": meta}, indent=2))
        except OSError as exc:
            raise ArtifactIOError(f"cannot write patch bank to {out}: {exc}") from exc

    @classmethod
    def load(cls, bank_dir):
        path = Path(bank_dir)
        try:
            info = json.loads((path / "bank.json").read_text())
        except OSError as exc:
            raise ArtifactIOError(f"cannot read patch bank {path}: {exc}") from exc
        patches = [Patch(load_npy(path / m["file"]), m["source"], Roi(*m["rect"]), m["min"], m["max"])
                   for m in info["patches"]]
        return cls(patches, info.get("domain", "log-residual"))


def normalize_patch(crop):
    """Affine map of ``crop`` onto [-1, 1]; constant crops map to 0."""
    lo, hi = float(crop.min()), float(crop.max())
    if hi == lo:
        return np.zeros_like(crop), lo, hi
    return np.clip(2.0 * (crop - lo) / (hi - lo) - 1.0, -1.0, 1.0), lo, hi


def crop_and_normalize(R, rects, source="shot"):
    R = as_image(R)
    if not rects:
        raise ParameterError("no crop rectangles given")
    bank = PatchBank()
    for rect in rects:
        data, lo, hi = normalize_patch(rect.crop(R))
        bank.patches.append(Patch(data, source, rect, lo, hi))
    return bank


def split_shock_patches(shock_region, rows=2, cols=3, source="shock", min_tile=4):
    """Six equal tiles (2 x 3 grid) of a shock region, each normalized to [-1, 1].

    Sides that do not divide evenly are edge-padded up to the next multiple.
    """
    region = as_image(shock_region)
    h, w = region.shape
    th, tw = -(-h // rows), -(-w // cols)
    if th < min_tile or tw < min_tile:
        raise GeometryError(f"region {w}x{h} is too small for a {rows}x{cols} grid of >= {min_tile} px tiles")
    padded = np.pad(region, ((0, th * rows - h), (0, tw * cols - w)), mode="edge")
    rects = [Roi(c * tw, r * th, tw, th) for r in range(rows) for c in range(cols)]
    return crop_and_normalize(padded, rects, source)


def extract_patches(shot, cold_frames, region, rects, epsilon=DEFAULT_EPSILON, source="shot",
                    keep_fraction=0.25):
    """Register the mean cold shot on ``region``, form the residual and crop it.

    Returns ``(bank, shift, residual)``.
    """
    cold_mean = np.mean([as_image(c) for c in cold_frames], axis=0)
    shift = phase_correlate(to_log(cold_mean, epsilon), to_log(shot, epsilon), region, keep_fraction)
    R = residual(shot, cold_mean, shift, epsilon)
    return crop_and_normalize(R, rects, source), shift, R
