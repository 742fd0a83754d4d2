"""Synthetic radiographs with exact ground-truth decompositions.

A synthetic shot is the product

    shot = envelope * base_transmission * signal_map * artifact * noise

where ``artifact = exp(intensity_scale * resample(master_pattern, drift))`` is
a band-limited log-domain speckle texture that moves (shift + magnification)
from frame to frame, and ``signal_map`` is 1 except where filaments or a
shock front perturb the transmission.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr

from artifact.errors import GeometryError, ParameterError, ShapeError


@dataclass
class ArtifactModel:
    master_pattern: np.ndarray
    band: tuple = (4.0, 32.0)
    amplitude: float = 0.05


@dataclass(frozen=True)
class DriftParams:
    dx: float = 0.0
    dy: float = 0.0
    magnification: float = 1.0
    intensity_scale: float = 1.0

    def validate(self, max_shift=10.0):
        if not 0.9 <= self.magnification <= 1.1:
            raise ParameterError(f"magnification {self.magnification} outside [0.9, 1.1]")
        if abs(self.dx) > max_shift or abs(self.dy) > max_shift:
            raise ParameterError(f"shift ({self.dx}, {self.dy}) exceeds {max_shift} px")
        return self

    def to_dict(self):
        return asdict(self)


def radial_frequency(shape):
    """Distance from DC in cycles per image, on the unshifted FFT grid."""
    h, w = shape
    fy = np.fft.fftfreq(h) * h
    fx = np.fft.fftfreq(w) * w
    return np.hypot(fy[:, None], fx[None, :])


def gen_master_pattern(seed, shape, band=(4.0, 32.0), amplitude=0.05):
    """Zero-mean band-limited white noise with RMS ``amplitude``.

    The spectrum is kept on the annulus ``low <= |f| <= high`` (cycles per
    image) and zeroed elsewhere, so the pattern is periodic.
    """
    h, w = shape
    low, high = band
    if not 0 < low < high < min(h, w) / 2:
        raise ParameterError(f"band {band} must satisfy 0 < low < high < {min(h, w) / 2}")
    if amplitude == 0:
        return np.zeros(shape)
    rng = np.random.default_rng(seed)
    spec = np.fft.fft2(rng.standard_normal(shape))
    r = radial_frequency(shape)
    spec[(r < low) | (r > high)] = 0.0
    pattern = np.fft.ifft2(spec).real
    pattern -= pattern.mean()
    return pattern * (amplitude / np.sqrt(np.mean(pattern ** 2)))


def make_artifact_model(seed, shape, band=(4.0, 32.0), amplitude=0.05):
    return ArtifactModel(gen_master_pattern(seed, shape, band, amplitude), tuple(band), amplitude)


def resample(pattern, drift):
    """Bilinear, periodic resampling under a shift and a magnification about the centre.

    The output at pixel ``p`` reads the input at ``c + (p - c) / m - (dx, dy)``.
    """
    h, w = pattern.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    m = drift.magnification
    ys = cy + (np.arange(h) - cy) / m - drift.dy
    xs = cx + (np.arange(w) - cx) / m - drift.dx
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    y0 = y0.astype(int)
    x0 = x0.astype(int)
    r0, r1 = y0 % h, (y0 + 1) % h
    c0, c1 = x0 % w, (x0 + 1) % w
    top = pattern[r0][:, c0] * (1 - fx) + pattern[r0][:, c1] * fx
    bottom = pattern[r1][:, c0] * (1 - fx) + pattern[r1][:, c1] * fx
    return top * (1 - fy) + bottom * fy


def drift_artifact(model, drift, max_shift=10.0):
    """Multiplicative artifact layer for one frame."""
    drift.validate(max_shift)
    return np.exp(drift.intensity_scale * resample(model.master_pattern, drift))


def beam_envelope(shape, fwhm_factor=2.0):
    """Broad centred Gaussian (peak 1) with FWHM ``fwhm_factor`` times the image width."""
    h, w = shape
    sigma = fwhm_factor * w / (2.0 * math.sqrt(2.0 * math.log(2.0)))
    y = np.arange(h) - (h - 1) / 2.0
    x = np.arange(w) - (w - 1) / 2.0
    return np.exp(-(y[:, None] ** 2 + x[None, :] ** 2) / (2.0 * sigma ** 2))


def random_drift(rng, max_shift=3.0, max_mag_dev=0.02, max_intensity_dev=0.05):
    return DriftParams(
        dx=float(rng.uniform(-max_shift, max_shift)),
        dy=float(rng.uniform(-max_shift, max_shift)),
        magnification=float(1.0 + rng.uniform(-max_mag_dev, max_mag_dev)),
        intensity_scale=float(1.0 + rng.uniform(-max_intensity_dev, max_intensity_dev)),
    )


# -- signal maps ------------------------------------------------------------

@dataclass
class FilamentGeometry:
    length_range: tuple = (0.25, 0.6)       # fraction of image height
    sigma_range: tuple = (1.2, 2.0)         # Gaussian cross-section sigma, px
    contrast_range: tuple = (0.15, 0.3)
    angle_jitter_deg: float = 8.0
    taper: float = 2.0                      # tip softness, px
    dark_fraction: float = 0.5
    reserved_top_fraction: float = 0.2
    side_margin: float = 4.0


@dataclass
class Filament:
    id: int
    base: tuple        # (x, y), on the bottom row
    tip: tuple         # (x, y); the along-axis profile is at half height here
    sigma: float
    contrast: float
    polarity: int      # +1 bright (enhancement), -1 dark (deficit)

    @property
    def length(self):
        return math.hypot(self.tip[0] - self.base[0], self.tip[1] - self.base[1])

    @property
    def direction(self):
        n = self.length
        return ((self.tip[0] - self.base[0]) / n, (self.tip[1] - self.base[1]) / n)

    def to_dict(self):
        d = asdict(self)
        d["length"] = self.length
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["id"]), tuple(d["base"]), tuple(d["tip"]), float(d["sigma"]),
                   float(d["contrast"]), int(d["polarity"]))


def filament_profile(shape, fil, taper=2.0):
    """Unsigned profile ``contrast * along(s) * across(d)`` of one filament.

    ``along(s) = Phi((L - s) / taper)`` for ``0 <= s <= L + 3 taper`` so the
    profile falls to half its plateau exactly at the recorded tip, and
    ``across(d)`` is a Gaussian truncated at 3 sigma.
    """
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ux, uy = fil.direction
    rx, ry = xx - fil.base[0], yy - fil.base[1]
    s = rx * ux + ry * uy
    d = np.abs(rx * uy - ry * ux)
    length = fil.length
    along = np.where((s >= 0) & (s <= length + 3 * taper), ndtr((length - s) / taper), 0.0)
    across = np.where(d <= 3 * fil.sigma, np.exp(-0.5 * (d / fil.sigma) ** 2), 0.0)
    return fil.contrast * along * across


def render_filaments(shape, filaments, taper=2.0):
    smap = np.ones(shape)
    mask = np.zeros(shape, dtype=bool)
    for fil in filaments:
        prof = filament_profile(shape, fil, taper)
        smap *= 1.0 + fil.polarity * prof
        mask |= prof > 0
    return smap, mask


def gen_filament_map(seed, shape, n_filaments, geometry=None, contrast_scale=1.0):
    """Quasi-parallel filaments growing up from the bottom edge.

    Returns ``(signal_map, mask, filaments)``; ``filaments`` is the endpoint
    table (list of :class:`Filament`) used as length ground truth.
    """
    geo = geometry or FilamentGeometry()
    if n_filaments < 1:
        raise ParameterError("n_filaments must be >= 1")
    h, w = shape
    rng = np.random.default_rng(seed)
    top = math.ceil(geo.reserved_top_fraction * h)
    usable = w - 2 * geo.side_margin
    spacing = usable / n_filaments
    if spacing < 2 * 3 * geo.sigma_range[1] / 2:
        raise GeometryError(f"{n_filaments} filaments do not fit across {w} px")

    filaments = []
    y_base = float(h - 1)
    for i in range(n_filaments):
        sigma = float(rng.uniform(*geo.sigma_range))
        contrast = float(rng.uniform(*geo.contrast_range)) * contrast_scale
        polarity = -1 if rng.random() < geo.dark_fraction else 1
        x_base = geo.side_margin + (i + 0.5) * spacing + float(rng.uniform(-0.2, 0.2)) * spacing
        theta = math.radians(float(rng.uniform(-geo.angle_jitter_deg, geo.angle_jitter_deg)))
        length = float(rng.uniform(*geo.length_range)) * h
        # keep the whole support (tip taper + cross-section) below the reserved band
        max_len = (y_base - top - 3 * sigma) / math.cos(theta) - 3 * geo.taper
        if max_len < geo.length_range[0] * h * 0.5:
            raise GeometryError(f"filaments of length {length:.1f} px cannot fit in {shape}")
        length = min(length, max_len)
        tip_x = x_base + length * math.sin(theta)
        if not geo.side_margin <= tip_x <= w - 1 - geo.side_margin:
            theta = -theta
            tip_x = x_base + length * math.sin(theta)
            if not 0 <= tip_x <= w - 1:
                raise GeometryError("filament tip leaves the image")
        tip = (tip_x, y_base - length * math.cos(theta))
        filaments.append(Filament(i + 1, (x_base, y_base), tip, sigma, contrast, polarity))

    smap, mask = render_filaments(shape, filaments, geo.taper)
    if contrast_scale == 0 or all(f.contrast == 0 for f in filaments):
        mask[:] = False
    return smap, mask, filaments


@dataclass
class ShockConfig:
    area_fraction: float = 0.3
    contrast: float = 0.3
    shell_width: float = 6.0
    edge_width: float = 1.5
    ripple: float = 0.04
    reserved_top_fraction: float = 0.2


def _shock_geometry(shape, rng):
    h, w = shape
    xc = w / 2.0 + float(rng.uniform(-0.15, 0.15)) * w
    yc = h - 1 + float(rng.uniform(0.1, 0.3)) * h
    k = int(rng.integers(3, 6))
    phase = float(rng.uniform(0, 2 * math.pi))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    r = np.hypot(xx - xc, yy - yc)
    ang = np.arctan2(yy - yc, xx - xc)
    return r, ang, k, phase


def gen_shock_map(seed, shape, config=None):
    """Arc-shaped transmission deficit rising from the bottom edge.

    The front radius is solved by bisection so the support covers
    ``area_fraction`` of the image (rows in the reserved top band excluded).
    """
    cfg = config or ShockConfig()
    h, w = shape
    rng = np.random.default_rng(seed)
    r, ang, k, phase = _shock_geometry(shape, rng)
    ripple = 1.0 + cfg.ripple * np.sin(k * ang + phase)
    top = math.ceil(cfg.reserved_top_fraction * h)
    allowed = np.zeros(shape, dtype=bool)
    allowed[top:] = True

    def support(radius):
        return (r < radius * ripple) & allowed

    lo, hi = 0.0, float(np.hypot(h, w)) * 3
    target = cfg.area_fraction * h * w
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if support(mid).sum() < target:
            lo = mid
        else:
            hi = mid
    radius = hi
    mask = support(radius)
    depth = np.where(mask, radius * ripple - r, 0.0)
    ramp = 1.0 - np.exp(-depth / cfg.edge_width)
    shell = 0.5 + 0.5 * np.exp(-depth / cfg.shell_width)
    smap = np.where(mask, 1.0 - cfg.contrast * ramp * shell, 1.0)
    if cfg.contrast == 0:
        mask = np.zeros(shape, dtype=bool)
    return smap, mask


# -- shots, flats, bundles ---------------------------------------------------

@dataclass
class GroundTruthBundle:
    """A synthetic shot (and optionally its flat) with every factor stored."""

    shot: np.ndarray
    artifact_shot: np.ndarray
    envelope: np.ndarray
    noise_shot: np.ndarray
    base_transmission: float
    signal_map: np.ndarray
    signal_mask: np.ndarray
    drift_shot: DriftParams
    flat: np.ndarray = None
    artifact_flat: np.ndarray = None
    noise_flat: np.ndarray = None
    drift_flat: DriftParams = None
    filaments: list = field(default_factory=list)


def noise_field(seed, clean, noise_level=0.01, photon_count=None):
    """Multiplicative noise realization, clipped at zero."""
    rng = np.random.default_rng(seed)
    if photon_count:
        expected = np.maximum(clean, 0.0) * photon_count
        counts = rng.poisson(expected)
        return np.where(expected > 0, counts / np.where(expected > 0, expected, 1.0), 0.0)
    if noise_level == 0:
        return np.ones_like(clean)
    return np.maximum(1.0 + noise_level * rng.standard_normal(clean.shape), 0.0)


def gen_cold_shot(artifact, drift, base_transmission, noise_seed, noise_level=0.01,
                  envelope=None, photon_count=None, max_shift=10.0):
    """Cold shot: envelope x base transmission x drifted artifact x noise."""
    if not 0 < base_transmission <= 1:
        raise ParameterError("base_transmission must lie in (0, 1]")
    shape = artifact.master_pattern.shape
    env = beam_envelope(shape) if envelope is None else envelope
    layer = drift_artifact(artifact, drift, max_shift)
    clean = env * base_transmission * layer
    noise = noise_field(noise_seed, clean, noise_level, photon_count)
    return GroundTruthBundle(
        shot=clean * noise, artifact_shot=layer, envelope=env, noise_shot=noise,
        base_transmission=base_transmission, signal_map=np.ones(shape),
        signal_mask=np.zeros(shape, dtype=bool), drift_shot=drift)


def gen_flat(artifact, drift, noise_seed, noise_level=0.01, envelope=None,
             photon_count=None, max_shift=10.0):
    """Flat field (no sample): a cold shot with unit transmission."""
    return gen_cold_shot(artifact, drift, 1.0, noise_seed, noise_level, envelope,
                         photon_count, max_shift)


def inject(cold, signal_map):
    """Synthetic shot ``cold * signal_map``."""
    if np.shape(cold) != np.shape(signal_map):
        raise ShapeError(f"cold {np.shape(cold)} and signal map {np.shape(signal_map)} differ")
    return np.asarray(cold, dtype=np.float64) * np.asarray(signal_map, dtype=np.float64)


def make_bundle(artifact, drift_shot, drift_flat, base_transmission, signal_map, signal_mask,
                shot_noise_seed, flat_noise_seed, noise_level=0.01, photon_count=None,
                filaments=(), max_shift=10.0):
    """Shot with signal plus its paired flat, all factors retained."""
    cold = gen_cold_shot(artifact, drift_shot, base_transmission, shot_noise_seed,
                         noise_level, None, None, max_shift)
    env = cold.envelope
    clean = env * base_transmission * signal_map * cold.artifact_shot
    noise = noise_field(shot_noise_seed, clean, noise_level, photon_count)
    flat = gen_flat(artifact, drift_flat, flat_noise_seed, noise_level, env, photon_count, max_shift)
    return GroundTruthBundle(
        shot=clean * noise, artifact_shot=cold.artifact_shot, envelope=env, noise_shot=noise,
        base_transmission=base_transmission, signal_map=np.asarray(signal_map, dtype=np.float64),
        signal_mask=np.asarray(signal_mask, dtype=bool), drift_shot=drift_shot,
        flat=flat.shot, artifact_flat=flat.artifact_shot, noise_flat=flat.noise_shot,
        drift_flat=drift_flat, filaments=list(filaments))
