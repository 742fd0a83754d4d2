"""Training loop and artifact-layer inference."""

import json
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from artifact.errors import NumericalError, ShapeError
from artifact.imaging import (
    DEFAULT_EPSILON,
    DEFAULT_FLOOR,
    as_image,
    percentile_normalize,
    reconstruct_transmission,
)
from artifact.neural.adam import AdamConfig, AdamState
from artifact.neural.augment import AugmentConfig, copy_paste_augment
from artifact.neural.loss import LossConfig, weighted_l1_loss
from artifact.neural.unet import UNetConfig, UNetModel, unet_backward, unet_forward

log = logging.getLogger(__name__)


@dataclass
class TrainingSet:
    """Cold-shot intensity images (raw scale) for training and validation."""

    train: list
    val: list = field(default_factory=list)


def log_domain(img, percentile=90.0, epsilon=DEFAULT_EPSILON):
    """Network input representation: ``log(img / P_p(img) + epsilon)``.

    ``percentile=None`` skips the normalization.
    """
    img = as_image(img)
    if percentile is not None:
        img = percentile_normalize(img, percentile)
    return np.log(np.maximum(img, 0.0) + epsilon)


def _as_batch(x, dtype):
    return np.asarray(x, dtype=dtype)[None, None]


def train(dataset, unet_cfg=UNetConfig(), loss_cfg=LossConfig(), aug_cfg=None,
          adam_cfg=AdamConfig(), epochs=20, seed=0, dtype=np.float32,
          percentile=90.0, epsilon=DEFAULT_EPSILON, log_path=None, init_model=None):
    """Train the network to map an augmented log image back to the clean log cold shot.

    Each sample is ``log(cold)`` plus (with the configured probability) one
    pasted patch; the target is ``log(cold)`` and the loss mask is the pasted
    rectangle. Batch size is one. All randomness (initialization, shuffle
    order, paste draws) derives from ``seed``.

    Returns
    -------
    model : UNetModel
    history : list of dict
        One entry per epoch with ``epoch``, ``train_loss``, ``val_loss`` and
        ``wall_time`` (seconds since the start of training).
    """
    aug_cfg = aug_cfg if aug_cfg is not None else AugmentConfig(paste_probability=0.0)
    init_ss, shuffle_ss, val_ss = np.random.SeedSequence(seed).spawn(3)
    if init_model is None:
        model = UNetModel.initialize(unet_cfg, init_ss, dtype=np.float64).astype(dtype)
    else:
        model = init_model.astype(dtype)
    if epochs <= 0:
        return model, []

    train_x = [log_domain(img, percentile, epsilon) for img in dataset.train]
    val_x = [log_domain(img, percentile, epsilon) for img in dataset.val]
    factor = 2 ** unet_cfg.depth
    for x in train_x + val_x:
        if x.shape[0] % factor or x.shape[1] % factor:
            raise ShapeError(f"training images must have sides divisible by {factor}, got {x.shape}")

    adam = AdamState(model.params, adam_cfg)
    rng = np.random.default_rng(shuffle_ss)
    history = []
    start = time.perf_counter()
    log_file = open(log_path, "w") if log_path else None
    try:
        for epoch in range(1, epochs + 1):
            losses = []
            for idx in rng.permutation(len(train_x)):
                inp, mask = copy_paste_augment(train_x[idx], aug_cfg, rng)
                out, cache = unet_forward(model, _as_batch(inp, dtype), keep_cache=True)
                loss, grad = weighted_l1_loss(out, _as_batch(train_x[idx], dtype),
                                              mask[None, None], loss_cfg.alpha)
                if not math.isfinite(loss):
                    raise NumericalError("non-finite training loss", {
                        "epoch": epoch, "sample": int(idx), "step": adam.step, "loss": loss})
                adam.update(model.params, unet_backward(model, grad, cache))
                losses.append(loss)
            val_loss = evaluate_loss(model, val_x, aug_cfg, loss_cfg, val_ss, dtype) if val_x else None
            entry = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "val_loss": val_loss,
                "wall_time": round(time.perf_counter() - start, 3),
            }
            history.append(entry)
            log.info("epoch %d train %.5f val %s", epoch, entry["train_loss"], val_loss)
            if log_file:
                log_file.write(json.dumps(entry) + "\n")
                log_file.flush()
    finally:
        if log_file:
            log_file.close()
    return model, history


def evaluate_loss(model, val_x, aug_cfg, loss_cfg, seed, dtype):
    """Mean loss over validation images with a fixed (seeded) augmentation draw."""
    rng = np.random.default_rng(seed)
    losses = []
    for x in val_x:
        inp, mask = copy_paste_augment(x, aug_cfg, rng)
        out = unet_forward(model, _as_batch(inp, dtype))
        loss, _ = weighted_l1_loss(out, _as_batch(x, dtype), mask[None, None], loss_cfg.alpha)
        losses.append(loss)
    return float(np.mean(losses))


def predict_artifact_layer(model, img, percentile=90.0, epsilon=DEFAULT_EPSILON):
    """Multiplicative artifact layer ``exp(net(log image))``.

    Sides that are not multiples of ``2**depth`` are reflect-padded for the
    forward pass and cropped back afterwards.
    """
    x = log_domain(img, percentile, epsilon)
    h, w = x.shape
    factor = 2 ** model.config.depth
    ph, pw = (-h) % factor, (-w) % factor
    if ph or pw:
        x = np.pad(x, ((0, ph), (0, pw)), mode="reflect")
    out = unet_forward(model, _as_batch(x, model.dtype))[0, 0, :h, :w]
    return np.exp(out.astype(np.float64))


def clean_image(img, model, layer=None, **kwargs):
    """Divide out the predicted layer, then rescale so the mean matches the raw image."""
    img = as_image(img)
    if layer is None:
        layer = predict_artifact_layer(model, img, **kwargs)
    cleaned = img / layer
    return cleaned * (img.mean() / cleaned.mean())


def corrected_transmission(model, shot, flat, floor=DEFAULT_FLOOR, **kwargs):
    """Transmission from the cleaned shot and the cleaned flat."""
    return reconstruct_transmission(clean_image(shot, model, **kwargs),
                                    clean_image(flat, model, **kwargs), floor)
