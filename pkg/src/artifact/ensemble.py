"""Deep ensembles: independent members, transmission mean/variance and entropy maps."""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from artifact.errors import ArtifactIOError, GeometryError, ParameterError, ShapeError
from artifact.imaging import DEFAULT_FLOOR, as_image, as_mask, reconstruct_transmission
from artifact.neural.serialize import load_model, save_model
from artifact.neural.train import clean_image, predict_artifact_layer, train


@dataclass
class EnsembleModel:
    members: list
    member_seeds: list

    def __post_init__(self):
        if len(self.members) < 2:
            raise ParameterError("an ensemble needs at least 2 members")
        if len(self.member_seeds) != len(self.members):
            raise ParameterError("one seed per member is required")
        cfg = self.members[0].config
        if any(m.config != cfg for m in self.members[1:]):
            raise ParameterError("ensemble members must share one network configuration")

    @property
    def size(self):
        return len(self.members)

    def save(self, out_dir):
        out = Path(out_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            files = []
            for i, m in enumerate(self.members):
                name = f"member_{i:02d}.bin"
                save_model(m, out / name)
                files.append(name)
            (out / "ensemble.json").write_text(json.dumps(
                {"members": files, "member_seeds": [int(s) for s in self.member_seeds]}, indent=2))
        except OSError as exc:
            raise ArtifactIOError(f"cannot write ensemble to {out}: {exc}") from exc

    @classmethod
    def load(cls, model_dir):
        path = Path(model_dir)
        try:
            info = json.loads((path / "ensemble.json").read_text())
        except OSError as exc:
            raise ArtifactIOError(f"cannot read ensemble {path}: {exc}") from exc
        return cls([load_model(path / f) for f in info["members"]], list(info["member_seeds"]))


def member_seeds(base_seed, M):
    """Distinct per-member seeds derived from ``base_seed``."""
    seeds = [int(ss.generate_state(1, np.uint32)[0])
             for ss in np.random.SeedSequence(base_seed).spawn(M)]
    if len(set(seeds)) != M:
        raise ParameterError(f"seed derivation collided for base seed {base_seed}")
    return seeds


def train_ensemble(dataset, base_seed, M=10, pretrained=None, **train_kwargs):
    """Train ``M`` members, each with its own seed controlling initialization and shuffling.

    ``pretrained`` maps member index to an already trained model for that
    member's seed (for reuse of a single-model run); those members are not
    retrained. Returns ``(EnsembleModel, histories)``.
    """
    if M < 2:
        raise ParameterError("M must be >= 2")
    pretrained = pretrained or {}
    seeds = member_seeds(base_seed, M)
    members, histories = [], []
    for i, seed in enumerate(seeds):
        if i in pretrained:
            members.append(pretrained[i])
            histories.append([])
            continue
        model, hist = train(dataset, seed=seed, **train_kwargs)
        members.append(model)
        histories.append(hist)
    return EnsembleModel(members, seeds), histories


def ensemble_transmission(ens, shot, flat, floor=DEFAULT_FLOOR, return_layers=False, **kwargs):
    """Per-pixel mean and population variance of the members' corrected transmission maps.

    With ``return_layers`` the population variance of the predicted
    artifact layers of the shot is returned as a third output.
    """
    shot, flat = as_image(shot), as_image(flat)
    maps, layers = [], []
    for m in ens.members:
        layer = predict_artifact_layer(m, shot, **kwargs)
        maps.append(reconstruct_transmission(clean_image(shot, m, layer=layer),
                                             clean_image(flat, m, **kwargs), floor))
        layers.append(layer)
    mean, var = aggregate(maps)
    if return_layers:
        return mean, var, aggregate(layers)[1]
    return mean, var


def aggregate(maps):
    """Mean and population variance over a stack of member outputs.

    Moments are taken about the first member, so identical members give
    exactly zero variance and a mean equal to each of them.
    """
    maps = np.stack([as_image(m) for m in maps])
    d = maps - maps[0]
    return maps[0] + d.mean(axis=0), d.var(axis=0)


@dataclass(frozen=True)
class EntropyConfig:
    variance_floor: float = 1e-12

    def __post_init__(self):
        if not self.variance_floor > 0:
            raise ParameterError("variance_floor must be positive")


def entropy_map(var, cfg=EntropyConfig()):
    """Gaussian differential entropy ``0.5 ln(2 pi e max(var, floor))`` in nats."""
    var = as_image(var)
    if np.any(var < 0):
        raise ParameterError("variance must be non-negative")
    return 0.5 * np.log(2.0 * math.pi * math.e * np.maximum(var, cfg.variance_floor))


def ood_flag(entropy, signal_mask):
    """Compare mean entropy inside and outside the signal mask.

    Differential entropy can be negative, so the ratio is reported as
    ``exp(mean_inside - mean_outside)``: the ratio of the geometric-mean
    ensemble standard deviations inside and outside. It is 1 for uniform
    entropy and exceeds 1 exactly when the inside mean is larger, which is
    when the flag is raised.
    """
    entropy = as_image(entropy)
    mask = as_mask(signal_mask)
    if mask.shape != entropy.shape:
        raise ShapeError(f"mask {mask.shape} does not match entropy map {entropy.shape}")
    if not mask.any() or mask.all():
        raise GeometryError("OOD flag undefined: mask must have pixels both inside and outside")
    inside = float(entropy[mask].mean())
    outside = float(entropy[~mask].mean())
    return {
        "mean_inside": inside,
        "mean_outside": outside,
        "difference": inside - outside,
        "ratio": math.exp(inside - outside),
        "flag": inside > outside,
        "n_inside": int(mask.sum()),
        "n_outside": int((~mask).sum()),
    }
