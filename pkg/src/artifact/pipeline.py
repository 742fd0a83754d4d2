"""End-to-end workflows: dataset, patch banks, training, correction, evaluation, reports.

A workflow takes a resolved configuration dictionary (see
:data:`DEFAULT_CONFIG`) and an output directory. Every workflow writes its
arrays as NPY (with PNG previews), its reports as JSON (tables mirrored to
CSV) and a ``run.json`` record with the configuration, package versions and
SHA-256 hashes of everything it read and wrote.
"""

import copy
import csv
import hashlib
import io
import json
import logging
import math
import platform
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from artifact import __version__
from artifact.dataset import Dataset, DatasetConfig, gen_dataset
from artifact.dffn import TvFitConfig, build_eff_model, dffn_reconstruct, fit_weights
from artifact.ensemble import (
    EnsembleModel,
    EntropyConfig,
    ensemble_transmission,
    entropy_map,
    member_seeds,
    ood_flag,
    train_ensemble,
)
from artifact.errors import ArtifactError, ArtifactIOError, ConfigError, NotFoundError, StageError
from artifact.features import PatchBank, extract_patches, split_shock_patches
from artifact.fourier import FourierFilterConfig, filter_and_reconstruct
from artifact.imaging import Roi, reconstruct_transmission, save_npy, save_png, stat_outside_roi
from artifact.metrics import (
    FilamentSpec,
    measure_filament_length,
    mse,
    mssim,
    psnr,
    rmspe,
    roi_from_mask,
)
from artifact.neural.adam import AdamConfig
from artifact.neural.augment import AugmentConfig
from artifact.neural.loss import LossConfig
from artifact.neural.serialize import load_model, save_model
from artifact.neural.train import TrainingSet, corrected_transmission, train
from artifact.neural.unet import UNetConfig
from artifact.phantom import filament_profile

log = logging.getLogger(__name__)

METHODS = ("raw", "fourier", "dffn", "unet", "ensemble")
DEFAULT_METHODS = ("raw", "fourier", "dffn", "unet")

DEFAULT_CONFIG = {
    "seed": 0,
    "dataset": {},
    "dataset_dir": None,
    "methods": list(DEFAULT_METHODS),
    "fourier": {
        "lowfreq_radius": 20,
        "magnitude_percentile": 99.5,
        "exclude_dc_region_from_threshold": True,
        "threshold_after_mask": True,
    },
    "dffn": {"S": 100, "percentile": 95.0, "tolerance": 1e-6, "max_iterations": 400, "mask_roi": True},
    "unet": {
        "base_channels": 32,
        "depth": 3,
        "epochs": 20,
        "learning_rate": 1e-4,
        "alpha": 10.0,
        "paste_probability": 0.9,
        "paste_gain": 0.2,
        "percentile": 90.0,
        "dtype": "float32",
        "patch_pad": 2,
        "model_path": None,
    },
    "shock_model": {"base_channels": 48, "include_filament_patches": True, "model_path": None},
    "ensemble": {"members": 4, "model_dir": None},
    "evaluation": {
        "roi_pad": 4,
        "lineout_row": None,
        "pixel_pitch": None,
        "data_range": 1.0,
        "length_mode": "half-peak",
        "length_smooth": 1.0,
        "width_factor": 2.0,
    },
    "registration": {"top_fraction": 0.2},
    "floor": 1e-6,
    "epsilon": 1e-6,
}


# -- configuration -----------------------------------------------------------

def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise ConfigError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and key != "dataset":
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path + key!r} must be an object")
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(user=None):
    """Defaults overlaid with ``user`` (unknown keys are rejected)."""
    cfg = _merge(DEFAULT_CONFIG, user or {})
    methods = cfg["methods"]
    if not methods:
        raise ConfigError("method set must not be empty")
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown methods {bad}; choose from {list(METHODS)}")
    DatasetConfig.from_dict({**cfg["dataset"], "seed": cfg["dataset"].get("seed", cfg["seed"])})
    return cfg


def load_config(path):
    """Read a JSON configuration; a ``run.json`` record yields the configuration it recorded."""
    try:
        user = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ArtifactIOError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    if "command" in user and "config" in user:
        user = {k: v for k, v in user["config"].items() if k != "args"}
    return user


@contextmanager
def stage(name):
    """Re-raise any package error as a :class:`StageError` tagged with ``name``."""
    try:
        yield
    except StageError:
        raise
    except (ArtifactError, OSError) as exc:
        raise StageError(name, exc) from exc


# -- run records ----------------------------------------------------------------

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions():
    import scipy

    return {"artifact": __version__, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def _rel(path, root):
    try:
        return str(Path(path).resolve().relative_to(Path(root).resolve()))
    except ValueError:
        return str(Path(path).resolve())


class RunRecorder:
    """Collects inputs and outputs of one run and writes the ``run.json`` record.

    Outputs registered as volatile (e.g. training logs with wall-clock
    times) are listed without a hash.
    """

    def __init__(self, out_dir, command, config, record_name="run.json"):
        self.out_dir = Path(out_dir)
        self.command = command
        self.config = config
        self.record_name = record_name
        self.inputs = []
        self.outputs = []
        self.volatile = []

    def input(self, path):
        self.inputs.append(Path(path))
        return path

    def output(self, path, volatile=False):
        (self.volatile if volatile else self.outputs).append(Path(path))
        return path

    def write(self, extra=None):
        def entries(paths):
            out = {}
            for p in paths:
                if p.is_dir():
                    for f in sorted(q for q in p.rglob("*") if q.is_file()):
                        out[_rel(f, self.out_dir)] = sha256_file(f)
                elif p.exists():
                    out[_rel(p, self.out_dir)] = sha256_file(p)
            return out

        record = {
            "command": self.command,
            "config": self.config,
            "versions": versions(),
            "inputs": entries(self.inputs),
            "outputs": entries(self.outputs),
            "volatile_outputs": sorted(_rel(p, self.out_dir) for p in self.volatile),
        }
        if extra:
            record.update(extra)
        path = self.out_dir / self.record_name
        path.write_text(json.dumps(record, indent=2, sort_keys=True, default=_json_default))
        return path


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _clean_floats(obj):
    if isinstance(obj, dict):
        return {k: _clean_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean_floats(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        if math.isnan(v):
            return "nan"
        return v
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj):
    Path(path).write_text(json.dumps(_clean_floats(obj), indent=2, sort_keys=True, default=_json_default))
    return path


def write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v)
                         for v in row])
    Path(path).write_text(buf.getvalue())
    return path


def save_image(img, path, rec=None, log_scale=False):
    """NPY plus a PNG preview next to it."""
    path = Path(path)
    save_npy(img, path)
    png = path.with_suffix(".png")
    save_png(img, png, log_scale=log_scale)
    if rec is not None:
        rec.output(path)
        rec.output(png)
    return path


# -- workspace: dataset, banks, models -------------------------------------------

class Workspace:
    """Lazily builds (and caches on disk) everything the workflows share."""

    def __init__(self, cfg, out_dir, rec=None):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.rec = rec
        self._dataset = None
        self._eff = None
        self._models = {}
        self._ensemble = None

    # dataset
    @property
    def dataset(self):
        if self._dataset is None:
            with stage("dataset"):
                root = self.cfg["dataset_dir"]
                if root is None:
                    root = self.out / "dataset"
                    if not (root / "manifest.json").exists():
                        dcfg = DatasetConfig.from_dict({**self.cfg["dataset"],
                                                        "seed": self.cfg["dataset"].get("seed", self.cfg["seed"])})
                        gen_dataset(dcfg, root)
                    if self.rec:
                        self.rec.output(root)
                elif self.rec:
                    self.rec.input(root)
                self._dataset = Dataset(root)
        return self._dataset

    @property
    def shape(self):
        return tuple(self.dataset.manifest["config"]["shape"])

    def registration_region(self):
        h, w = self.shape
        return Roi(0, 0, w, max(16, math.ceil(self.cfg["registration"]["top_fraction"] * h)))

    # patch banks
    def filament_bank(self):
        with stage("patch-bank"):
            bank = PatchBank()
            pad = self.cfg["unet"]["patch_pad"]
            for src in self.dataset.sources("filament"):
                rects = []
                for fil in src["filaments"]:
                    support = filament_profile(self.shape, fil) > 0
                    rects.append(roi_from_mask(support, pad))
                part, _, _ = extract_patches(src["shot"], src["cold"], self.registration_region(), rects,
                                             self.cfg["epsilon"], source=src["entry"]["shot"])
                bank.extend(part)
            return bank

    def shock_bank(self):
        with stage("patch-bank"):
            bank = PatchBank()
            for src in self.dataset.sources("shock"):
                rect = roi_from_mask(src["mask"])
                _, _, R = extract_patches(src["shot"], src["cold"], self.registration_region(), [rect],
                                          self.cfg["epsilon"], source=src["entry"]["shot"])
                part = split_shock_patches(rect.crop(R), source=src["entry"]["shot"])
                for p in part.patches:
                    # tile rectangles are relative to the shock bounding box
                    p.rect = Roi(p.rect.x0 + rect.x0, p.rect.y0 + rect.y0, p.rect.width, p.rect.height)
                bank.extend(part)
            return bank

    # training
    def training_set(self):
        return TrainingSet(self.dataset.split("train"), self.dataset.split("val"))

    def train_kwargs(self, bank, base_channels=None):
        u = self.cfg["unet"]
        return {
            "unet_cfg": UNetConfig(base_channels=base_channels or u["base_channels"], depth=u["depth"]),
            "loss_cfg": LossConfig(alpha=u["alpha"]),
            "aug_cfg": AugmentConfig(paste_probability=u["paste_probability"], patch_bank=bank.arrays(),
                                     paste_gain=u["paste_gain"]),
            "adam_cfg": AdamConfig(learning_rate=u["learning_rate"]),
            "epochs": u["epochs"],
            "dtype": np.dtype(u["dtype"]).type,
            "percentile": u["percentile"],
            "epsilon": self.cfg["epsilon"],
        }

    def unet_seed(self):
        return member_seeds(self.cfg["seed"], 2)[0]

    def _trained(self, key, path_cfg, default_name, bank_fn, base_channels, seed):
        if key in self._models:
            return self._models[key]
        with stage(f"train-{key}"):
            given = path_cfg
            path = Path(given) if given else self.out / "models" / default_name
            if path.exists():
                model = load_model(path)
                if self.rec:
                    self.rec.input(path)
                self._models[key] = (model, None)
                return self._models[key]
            if given:
                raise ArtifactIOError(f"model file {path} does not exist")
            path.parent.mkdir(parents=True, exist_ok=True)
            log_path = path.with_suffix(".log.jsonl")
            model, history = train(self.training_set(), seed=seed, log_path=log_path,
                                   **self.train_kwargs(bank_fn(), base_channels))
            save_model(model, path)
            if self.rec:
                self.rec.output(path)
                self.rec.output(log_path, volatile=True)
            hist = [{k: v for k, v in e.items() if k != "wall_time"} for e in history]
            self._models[key] = (model, hist)
            return self._models[key]

    def unet(self):
        return self._trained("unet", self.cfg["unet"]["model_path"], "unet.bin", self.filament_bank,
                             None, self.unet_seed())[0]

    def unet_history(self):
        return self._models.get("unet", (None, None))[1]

    def shock_model(self):
        s = self.cfg["shock_model"]

        def bank():
            b = self.shock_bank()
            return self.filament_bank().extend(b) if s["include_filament_patches"] else b

        return self._trained("shock", s["model_path"], "unet_shock.bin", bank, s["base_channels"],
                             self.unet_seed())[0]

    def ensemble(self):
        if self._ensemble is None:
            with stage("ensemble-train"):
                e = self.cfg["ensemble"]
                model_dir = Path(e["model_dir"]) if e["model_dir"] else self.out / "ensemble"
                if (model_dir / "ensemble.json").exists():
                    self._ensemble = EnsembleModel.load(model_dir)
                    if self.rec:
                        self.rec.input(model_dir)
                elif e["model_dir"]:
                    raise ArtifactIOError(f"no ensemble in {model_dir}")
                else:
                    kwargs = self.train_kwargs(self.filament_bank())
                    self._ensemble, _ = train_ensemble(self.training_set(), self.cfg["seed"], e["members"],
                                                       pretrained={0: self.unet()}, **kwargs)
                    self._ensemble.save(model_dir)
                    if self.rec:
                        self.rec.output(model_dir)
        return self._ensemble

    def eff_model(self):
        if self._eff is None:
            with stage("dffn-effs"):
                d = self.cfg["dffn"]
                self._eff = build_eff_model(self.dataset.flats(), d["S"], d["percentile"], self.cfg["seed"])
        return self._eff

    # corrections
    def transmissions(self, case, methods):
        shot, flat, floor = case["shot"], case["flat"], self.cfg["floor"]
        out, extra = {}, {}
        for m in methods:
            with stage(f"method-{m}"):
                if m == "raw":
                    out[m] = reconstruct_transmission(shot, flat, floor)
                elif m == "fourier":
                    out[m] = filter_and_reconstruct(shot, flat, FourierFilterConfig(**self.cfg["fourier"]), floor)
                elif m == "dffn":
                    d = self.cfg["dffn"]
                    mask = roi_from_mask(case["mask"], self.cfg["evaluation"]["roi_pad"]).mask(shot.shape) \
                        if d["mask_roi"] and case["mask"].any() else None
                    tcfg = TvFitConfig(d["tolerance"], d["max_iterations"], mask, floor=floor)
                    model = self.eff_model()
                    fit = fit_weights(shot, model, tcfg)
                    out[m] = dffn_reconstruct(shot, model, tcfg, fit.weights)
                    extra[m] = {"K": model.K, "weights": fit.weights.tolist(), "iterations": fit.iterations,
                                "final_objective": fit.objective_trace[-1], "stop_reason": fit.reason}
                elif m == "unet":
                    out[m] = corrected_transmission(self.unet(), shot, flat, floor,
                                                    percentile=self.cfg["unet"]["percentile"],
                                                    epsilon=self.cfg["epsilon"])
                elif m == "ensemble":
                    out[m], _ = ensemble_transmission(self.ensemble(), shot, flat, floor,
                                                      percentile=self.cfg["unet"]["percentile"],
                                                      epsilon=self.cfg["epsilon"])
        return out, extra


# -- evaluation --------------------------------------------------------------------

def recovered_signal(T, mask):
    """Transmission rescaled so the unperturbed region has median 1."""
    ref = float(np.median(T[~mask])) if (~mask).any() else float(np.median(T))
    return T / ref


def evaluate_case(case, transmissions, ev):
    """Metrics for each method's transmission on one ground-truth case."""
    truth, mask = case["signal"], case["mask"]
    has_signal = bool(mask.any())
    roi = roi_from_mask(mask, ev["roi_pad"]) if has_signal else None
    true_lengths = [f.length for f in case.get("filaments", [])]
    rows = {}
    for name, T in transmissions.items():
        S = recovered_signal(T, mask)
        if has_signal:
            _, sigma = stat_outside_roi(T, mask)
        else:
            sigma = float(T.std())
        row = {"sigma_t_outside": sigma, "mean_t_outside": float(T[~mask].mean())}
        if has_signal:
            row.update({
                "mssim": mssim(S, truth, roi, data_range=ev["data_range"]),
                "psnr": psnr(S, truth, roi, peak=ev["data_range"]),
                "mse": mse(S, truth, roi),
            })
        if true_lengths:
            measured = []
            for fil in case["filaments"]:
                spec = FilamentSpec.from_filament(fil, ev["width_factor"])
                try:
                    measured.append(measure_filament_length(S, spec, 1.0, mode=ev["length_mode"],
                                                            smooth=ev["length_smooth"]))
                except NotFoundError:
                    measured.append(0.0)
            row["filament_lengths"] = [[f.id, v] for f, v in zip(case["filaments"], measured)]
            row["rmspe"] = rmspe(measured, true_lengths)
        rows[name] = row
    info = {"roi": roi.to_list() if roi else None,
            "true_lengths": [[f.id, f.length] for f in case.get("filaments", [])]}
    return rows, info


def lineout_row(case, ev):
    if ev["lineout_row"] is not None:
        return int(ev["lineout_row"])
    ys = np.nonzero(case["mask"])[0]
    h = case["mask"].shape[0]
    return int(np.median(ys)) if ys.size else h // 2


def _emit_case(name, case, transmissions, ev, out, rec):
    row = lineout_row(case, ev)
    cols = {"truth": case["signal"][row]}
    for m, T in transmissions.items():
        save_image(T, out / f"{name}_{m}_T.npy", rec)
        cols[m] = recovered_signal(T, case["mask"])[row]
    x = np.arange(case["signal"].shape[1])
    header = ["x_px"] + (["x_um"] if ev["pixel_pitch"] else []) + list(cols)
    rows = []
    for i in x:
        r = [int(i)] + ([float(i * ev["pixel_pitch"])] if ev["pixel_pitch"] else [])
        rows.append(r + [float(c[i]) for c in cols.values()])
    rec.output(write_csv(out / f"{name}_lineout.csv", header, rows))
    return row


def _table(report_cases, methods):
    header = ["case", "method", "mssim", "psnr", "mse", "sigma_t_outside", "rmspe"]
    rows = []
    for cname, c in report_cases.items():
        for m in methods:
            r = c["methods"][m]
            rows.append([cname, m] + [r.get(k) for k in header[2:]])
    return header, rows


# -- workflows ---------------------------------------------------------------------

def _run_cases(cfg, out, case_names, command, methods=None):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rec = RunRecorder(out, command, cfg)
    ws = Workspace(cfg, out, rec)
    methods = methods or cfg["methods"]
    names = case_names(ws.dataset)
    report = {"methods": list(methods), "cases": {}}
    for name in names:
        with stage(f"case-{name}"):
            case = ws.dataset.case(name)
        trans, extra = ws.transmissions(case, methods)
        with stage(f"evaluate-{name}"):
            rows, info = evaluate_case(case, trans, cfg["evaluation"])
            row = _emit_case(name, case, trans, cfg["evaluation"], out, rec)
        report["cases"][name] = {"methods": rows, "lineout_row": row, "method_details": extra, **info}
    if "unet" in methods and ws.unet_history():
        report["training"] = ws.unet_history()
    header, rows = _table(report["cases"], methods)
    rec.output(write_csv(out / "table.csv", header, rows))
    rec.output(write_json(out / "report.json", report))
    rec.write()
    return report


def run_injection_test(cfg, out):
    """Every filament injection case, every configured method."""
    return _run_cases(cfg, out, lambda ds: ds.case_names("filament"), "inject-test")


def run_compare(cfg, out, case=None):
    """Method comparison on one case (default: the first filament case)."""
    def names(ds):
        return [case] if case else ds.case_names("filament")[:1]

    return _run_cases(cfg, out, names, "compare")


def run_shock_generalization(cfg, out):
    """Filament-trained vs shock-aware network inside the shock region."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rec = RunRecorder(out, "shock-test", cfg)
    ws = Workspace(cfg, out, rec)
    ev = cfg["evaluation"]
    report = {"cases": {}}
    models = {"filament_trained": ws.unet, "shock_aware": ws.shock_model}
    for name in ws.dataset.case_names("shock"):
        case = ws.dataset.case(name)
        trans = {}
        for label, get in models.items():
            model = get()
            with stage(f"infer-{label}"):
                trans[label] = corrected_transmission(model, case["shot"], case["flat"], cfg["floor"],
                                                      percentile=cfg["unet"]["percentile"],
                                                      epsilon=cfg["epsilon"])
        with stage(f"evaluate-{name}"):
            rows, info = evaluate_case(case, trans, ev)
            _emit_case(name, case, trans, ev, out, rec)
        report["cases"][name] = {"methods": rows, **info}
    header, rows = _table(report["cases"], list(models))
    rec.output(write_csv(out / "table.csv", header, rows))
    rec.output(write_json(out / "report.json", report))
    rec.write()
    return report


def run_ensemble_ood(cfg, out, cases=None):
    """Train (or load) the ensemble and compute entropy maps and OOD reports per case."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rec = RunRecorder(out, "ensemble-ood", cfg)
    ws = Workspace(cfg, out, rec)
    ens = ws.ensemble()
    names = cases or ws.dataset.case_names()
    report = {"members": ens.size, "member_seeds": ens.member_seeds, "cases": {}}
    for name in names:
        with stage(f"entropy-{name}"):
            case = ws.dataset.case(name)
            mean_t, var_t, var_layer = ensemble_transmission(
                ens, case["shot"], case["flat"], cfg["floor"], return_layers=True,
                percentile=cfg["unet"]["percentile"], epsilon=cfg["epsilon"])
            h = entropy_map(var_t, EntropyConfig())
            save_image(mean_t, out / f"{name}_mean_T.npy", rec)
            save_image(var_t, out / f"{name}_var_T.npy", rec, log_scale=True)
            save_image(var_layer, out / f"{name}_var_layer.npy", rec, log_scale=True)
            # entropy is already logarithmic in the variance, so it is shown linearly
            save_image(h, out / f"{name}_entropy.npy", rec)
            report["cases"][name] = {"kind": case["entry"]["kind"], **ood_flag(h, case["mask"])}
    rec.output(write_json(out / "ood.json", report))
    rec.write()
    return report
