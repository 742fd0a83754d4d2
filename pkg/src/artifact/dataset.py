"""Synthetic dataset generation and loading.

Directory layout::

    manifest.json
    train/cold_###.npy            cold shots for network training
    val/cold_###.npy              cold shots for validation loss
    flats/flat_###.npy            flat-field stack (eigen flat fields)
    sources/src#_shot.npy         laser-driven shots (filament or shock) for patch extraction
    sources/src#_cold_##.npy      matching cold shots (small drift jitter)
    sources/src#_mask.npy
    cases/<name>_{cold,flat,shot,signal,mask,artifact}.npy
                                  evaluation cases: injection tests and the shock case

Every random draw comes from a seed derived from the master seed and the
item's category/index, recorded in the manifest next to the drift
parameters and filament endpoints.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from artifact.errors import ArtifactIOError, ConfigError, DataError
from artifact.imaging import as_mask, load_npy, save_npy
from artifact.phantom import (
    DriftParams,
    Filament,
    FilamentGeometry,
    ShockConfig,
    gen_cold_shot,
    gen_filament_map,
    gen_flat,
    gen_shock_map,
    inject,
    make_artifact_model,
    random_drift,
)

_CATEGORY = {"master": 0, "train": 1, "val": 2, "flat": 3, "source": 4, "case": 5, "filament": 6, "shock": 7}


def derive_seed(master, category, index=0, sub=0):
    """Stable 32-bit seed for one item."""
    ss = np.random.SeedSequence(entropy=int(master), spawn_key=(_CATEGORY[category], int(index), int(sub)))
    return int(ss.generate_state(1, np.uint32)[0])


@dataclass
class DatasetConfig:
    shape: tuple = (128, 128)
    n_train: int = 64
    n_val: int = 16
    n_flats: int = 20
    band: tuple = (4.0, 32.0)
    amplitude: float = 0.05
    max_shift: float = 3.0
    max_mag_dev: float = 0.02
    max_intensity_dev: float = 0.05
    base_transmission: float = 0.42
    noise_level: float = 0.01
    n_filaments: int = 6
    geometry: FilamentGeometry = field(default_factory=FilamentGeometry)
    injection_cases: list = field(default_factory=lambda: [
        {"name": "strong", "contrast_scale": 1.0},
        {"name": "weak", "contrast_scale": 0.5},
    ])
    shock: ShockConfig = field(default_factory=ShockConfig)
    n_sources: int = 2
    n_shock_sources: int = 1
    cold_per_source: int = 8
    source_jitter: float = 0.25
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(v) for v in self.shape)
        self.band = tuple(float(v) for v in self.band)
        if isinstance(self.geometry, dict):
            self.geometry = FilamentGeometry(**self.geometry)
        if isinstance(self.shock, dict):
            self.shock = ShockConfig(**self.shock)
        for name in ("n_train", "n_val", "n_flats", "n_sources", "n_shock_sources", "cold_per_source",
                     "n_filaments"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.n_flats < 2:
            raise ConfigError("n_flats must be >= 2")

    def to_dict(self):
        d = asdict(self)
        d["shape"] = list(self.shape)
        d["band"] = list(self.band)
        return d

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown dataset config keys: {sorted(unknown)}")
        return cls(**d)


def _drift(cfg, seed):
    return random_drift(np.random.default_rng(seed), cfg.max_shift, cfg.max_mag_dev, cfg.max_intensity_dev)


def _write(out, rel, img, files):
    save_npy(img, out / rel)
    files.append(rel)


def gen_dataset(cfg, out_dir):
    """Write the full dataset described by ``cfg`` to ``out_dir`` and return the manifest."""
    out = Path(out_dir)
    try:
        for sub in ("train", "val", "flats", "sources", "cases"):
            (out / sub).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ArtifactIOError(f"cannot create dataset directory {out}: {exc}") from exc

    master = cfg.seed
    artifact_seed = derive_seed(master, "master")
    artifact = make_artifact_model(artifact_seed, cfg.shape, cfg.band, cfg.amplitude)
    files = []
    manifest = {"config": cfg.to_dict(), "artifact_seed": artifact_seed, "files": files,
                "train": [], "val": [], "flats": [], "sources": [], "cases": []}

    def cold(category, i):
        dseed, nseed = derive_seed(master, category, i, 0), derive_seed(master, category, i, 1)
        drift = _drift(cfg, dseed)
        b = gen_cold_shot(artifact, drift, cfg.base_transmission, nseed, cfg.noise_level)
        return b, {"drift_seed": dseed, "noise_seed": nseed, "drift": drift.to_dict()}

    for split, n in (("train", cfg.n_train), ("val", cfg.n_val)):
        for i in range(n):
            b, info = cold(split, i)
            rel = f"{split}/cold_{i:03d}.npy"
            _write(out, rel, b.shot, files)
            manifest[split].append({"file": rel, **info})

    for i in range(cfg.n_flats):
        dseed, nseed = derive_seed(master, "flat", i, 0), derive_seed(master, "flat", i, 1)
        drift = _drift(cfg, dseed)
        rel = f"flats/flat_{i:03d}.npy"
        _write(out, rel, gen_flat(artifact, drift, nseed, cfg.noise_level).shot, files)
        manifest["flats"].append({"file": rel, "drift_seed": dseed, "noise_seed": nseed, "drift": drift.to_dict()})

    # laser-driven shots for patch extraction: one base drift, cold shots jittered
    # around it, the shot itself offset by a known integer translation
    kinds = ["filament"] * cfg.n_sources + ["shock"] * cfg.n_shock_sources
    for k, kind in enumerate(kinds):
        rng = np.random.default_rng(derive_seed(master, "source", k, 0))
        base = _drift(cfg, derive_seed(master, "source", k, 1))
        j = cfg.source_jitter
        offset = (int(rng.integers(-3, 4)), int(rng.integers(-3, 4)))
        fils = []
        if kind == "shock":
            fseed = derive_seed(master, "shock", 100 + k)
            smap, mask = gen_shock_map(fseed, cfg.shape, cfg.shock)
        else:
            fseed = derive_seed(master, "filament", 100 + k)
            smap, mask, fils = gen_filament_map(fseed, cfg.shape, cfg.n_filaments, cfg.geometry)
        shot_drift = DriftParams(base.dx + offset[0], base.dy + offset[1], base.magnification,
                                 base.intensity_scale)
        nseed = derive_seed(master, "source", k, 2)
        shot = inject(gen_cold_shot(artifact, shot_drift, cfg.base_transmission, nseed,
                                    cfg.noise_level, max_shift=cfg.max_shift + 4).shot, smap)
        entry = {"kind": kind, "shot": f"sources/src{k}_shot.npy", "mask": f"sources/src{k}_mask.npy",
                 "cold": [], "offset": list(offset), "drift": shot_drift.to_dict(), "signal_seed": fseed,
                 "filaments": [f.to_dict() for f in fils]}
        _write(out, entry["shot"], shot, files)
        _write(out, entry["mask"], mask.astype(np.float64), files)
        for c in range(cfg.cold_per_source):
            jr = np.random.default_rng(derive_seed(master, "source", k, 10 + c))
            d = DriftParams(base.dx + jr.uniform(-j, j), base.dy + jr.uniform(-j, j),
                            base.magnification * (1 + jr.uniform(-j, j) * 0.01),
                            base.intensity_scale * (1 + jr.uniform(-j, j) * 0.02))
            rel = f"sources/src{k}_cold_{c:02d}.npy"
            b = gen_cold_shot(artifact, d, cfg.base_transmission, derive_seed(master, "source", k, 100 + c),
                              cfg.noise_level, max_shift=cfg.max_shift + 4)
            _write(out, rel, b.shot, files)
            entry["cold"].append(rel)
        manifest["sources"].append(entry)

    cases = [(c["name"], "filament", c) for c in cfg.injection_cases] + [("shock", "shock", {})]
    for idx, (name, kind, spec) in enumerate(cases):
        b, info = cold("case", idx)
        fseed = derive_seed(master, "shock" if kind == "shock" else "filament", idx)
        fils = []
        if kind == "shock":
            smap, mask = gen_shock_map(fseed, cfg.shape, cfg.shock)
        else:
            smap, mask, fils = gen_filament_map(fseed, cfg.shape, cfg.n_filaments, cfg.geometry,
                                                spec.get("contrast_scale", 1.0))
        fl_d, fl_n = derive_seed(master, "case", idx, 2), derive_seed(master, "case", idx, 3)
        flat_drift = _drift(cfg, fl_d)
        flat = gen_flat(artifact, flat_drift, fl_n, cfg.noise_level)
        entry = {"name": name, "kind": kind, "signal_seed": fseed, **info,
                 "flat_drift_seed": fl_d, "flat_noise_seed": fl_n, "flat_drift": flat_drift.to_dict(),
                 "filaments": [f.to_dict() for f in fils]}
        for key, img in (("cold", b.shot), ("flat", flat.shot), ("shot", inject(b.shot, smap)),
                         ("signal", smap), ("mask", mask.astype(np.float64)),
                         ("artifact", b.artifact_shot)):
            rel = f"cases/{name}_{key}.npy"
            _write(out, rel, img, files)
            entry[key] = rel
        manifest["cases"].append(entry)

    try:
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as exc:
        raise ArtifactIOError(f"cannot write manifest: {exc}") from exc
    return manifest


class Dataset:
    """Read access to a generated dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        try:
            self.manifest = json.loads((self.root / "manifest.json").read_text())
        except OSError as exc:
            raise ArtifactIOError(f"cannot read manifest in {self.root}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"malformed manifest in {self.root}: {exc}") from exc

    def load(self, rel):
        return load_npy(self.root / rel)

    def split(self, name):
        return [self.load(e["file"]) for e in self.manifest[name]]

    def flats(self):
        return self.split("flats")

    def case(self, name):
        for entry in self.manifest["cases"]:
            if entry["name"] == name:
                out = {k: self.load(entry[k]) for k in ("cold", "flat", "shot", "signal", "artifact")}
                out["mask"] = as_mask(self.load(entry["mask"]))
                out["filaments"] = [Filament.from_dict(f) for f in entry["filaments"]]
                out["entry"] = entry
                return out
        raise DataError(f"no case named {name!r} in {self.root}")

    def case_names(self, kind=None):
        return [e["name"] for e in self.manifest["cases"] if kind is None or e["kind"] == kind]

    def sources(self, kind=None):
        for entry in self.manifest["sources"]:
            if kind is not None and entry["kind"] != kind:
                continue
            yield {
                "shot": self.load(entry["shot"]),
                "mask": as_mask(self.load(entry["mask"])),
                "cold": [self.load(c) for c in entry["cold"]],
                "filaments": [Filament.from_dict(f) for f in entry["filaments"]],
                "entry": entry,
            }
