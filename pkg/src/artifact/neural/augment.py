"""Copy-paste augmentation of signal patches onto log-domain training images."""

import math
from dataclasses import dataclass, field

import numpy as np

from artifact.errors import GeometryError, ParameterError


@dataclass
class AugmentConfig:
    """Paste settings.

    ``patch_bank`` holds 2-D arrays with values in [-1, 1]. Patches are
    re-centred on their median before pasting so the patch background adds
    (approximately) nothing, then scaled by ``paste_gain`` and added in the
    log domain. The top ``reserved_top_fraction`` of the image is never
    touched.
    """

    paste_probability: float = 0.9
    patch_bank: list = field(default_factory=list)
    paste_gain: float = 0.2
    reserved_top_fraction: float = 0.2
    center: str = "median"

    def __post_init__(self):
        if not 0.0 <= self.paste_probability <= 1.0:
            raise ParameterError("paste_probability must lie in [0, 1]")
        if self.center not in ("median", "none"):
            raise ParameterError(f"unknown centring rule {self.center!r}")
        for p in self.patch_bank:
            if np.ndim(p) != 2 or np.min(p) < -1.0 or np.max(p) > 1.0:
                raise ParameterError("patches must be 2-D with values in [-1, 1]")


def copy_paste_augment(x_log, cfg, seed):
    """Paste one random patch at a random location with probability ``paste_probability``.

    ``seed`` may be an int or a ``numpy.random.Generator``. Returns the
    augmented image and the boolean mask of the pasted rectangle (all False
    when nothing was pasted).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x_log = np.asarray(x_log, dtype=np.float64)
    h, w = x_log.shape
    mask = np.zeros((h, w), dtype=bool)
    if rng.random() >= cfg.paste_probability:
        return x_log.copy(), mask
    if not cfg.patch_bank:
        raise ParameterError("patch bank is empty but paste_probability > 0")

    patch = np.asarray(cfg.patch_bank[rng.integers(len(cfg.patch_bank))], dtype=np.float64)
    ph, pw = patch.shape
    top = math.ceil(cfg.reserved_top_fraction * h)
    if ph > h - top or pw > w:
        raise GeometryError(f"patch {patch.shape} does not fit below the reserved band of a {h}x{w} image")
    y0 = int(rng.integers(top, h - ph + 1))
    x0 = int(rng.integers(0, w - pw + 1))
    if cfg.center == "median":
        patch = patch - np.median(patch)
    out = x_log.copy()
    out[y0:y0 + ph, x0:x0 + pw] += cfg.paste_gain * patch
    mask[y0:y0 + ph, x0:x0 + pw] = True
    return out, mask
