from dataclasses import dataclass

import numpy as np

from artifact.errors import ParameterError, ShapeError


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 10.0

    def __post_init__(self):
        if self.alpha < 0:
            raise ParameterError("alpha must be non-negative")


def weighted_l1_loss(pred, target, mask, alpha=10.0):
    """Mask-weighted mean absolute error and its gradient w.r.t. ``pred``.

    Every pixel carries weight ``1 + alpha * mask``; the subgradient uses
    ``sign(0) = 0``. ``mask`` must broadcast against ``pred``.

    Returns
    -------
    loss : float
    grad : ndarray, same shape and dtype as ``pred``
    """
    pred = np.asarray(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} and target {target.shape} differ")
    weight = 1.0 + alpha * np.asarray(mask, dtype=pred.dtype)
    try:
        weight = np.broadcast_to(weight, pred.shape)
    except ValueError as exc:
        raise ShapeError(f"mask {np.shape(mask)} does not broadcast to {pred.shape}") from exc
    diff = pred - target
    n = diff.size
    loss = float(np.sum(weight * np.abs(diff), dtype=np.float64) / n)
    grad = (weight * np.sign(diff) / n).astype(pred.dtype, copy=False)
    return loss, grad
