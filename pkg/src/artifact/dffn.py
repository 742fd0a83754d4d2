"""Dynamic flat-field normalization.

Eigen flat fields (EFFs) are the principal components of a stack of flat
fields. Each shot gets its own flat, ``mean_flat + sum_k w_k u_k``, with the
weights chosen to minimize the total variation of the resulting transmission
map times the mean of the estimated flat.
"""

from dataclasses import dataclass, field

import numpy as np

from artifact.errors import DataError, NumericalError, ParameterError, ShapeError
from artifact.imaging import DEFAULT_FLOOR, as_image, as_mask, reconstruct_transmission


@dataclass
class EffModel:
    mean_flat: np.ndarray
    effs: np.ndarray            # (n_components, h, w), unit L2 norm each
    eigenvalues: np.ndarray     # descending, same length as effs
    K: int = 0

    @property
    def shape(self):
        return self.mean_flat.shape

    def retained(self):
        return self.effs[:self.K]

    def to_dict(self):
        return {"K": int(self.K), "eigenvalues": [float(v) for v in self.eigenvalues]}


@dataclass(frozen=True)
class TvFitConfig:
    tolerance: float = 1e-6
    max_iterations: int = 400
    mask: np.ndarray = None
    fd_step: float = 1e-5
    floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ParameterError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ParameterError("max_iterations must be >= 1")


@dataclass
class TvFit:
    weights: np.ndarray
    objective_trace: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = True
    reason: str = ""

    def to_dict(self):
        return {
            "weights": [float(v) for v in self.weights],
            "objective_trace": [float(v) for v in self.objective_trace],
            "iterations": self.iterations,
            "converged": self.converged,
            "reason": self.reason,
        }


def _stack(flats):
    arrs = [as_image(f) for f in flats]
    if len(arrs) < 2:
        raise DataError(f"need at least 2 flats, got {len(arrs)}")
    shape = arrs[0].shape
    for a in arrs[1:]:
        if a.shape != shape:
            raise ShapeError(f"flat shapes differ: {shape} vs {a.shape}")
    return np.stack(arrs)


def _snapshot_pca(centered):
    """Eigen-decomposition of the population covariance via the m x m Gram matrix.

    ``centered`` is (m, n). Returns eigenvalues (descending, clipped at 0)
    and the Gram eigenvectors as columns.
    """
    m = centered.shape[0]
    gram = centered @ centered.T / m
    vals, vecs = np.linalg.eigh(gram)
    order = np.argsort(vals)[::-1]
    return np.clip(vals[order], 0.0, None), vecs[:, order]


def compute_effs(flats):
    """Mean flat and eigen flat fields of a flat-field stack.

    Eigenvalues are population variances along each component. Components
    with numerically zero variance are dropped, so at most ``m - 1`` remain.
    """
    stack = _stack(flats)
    m, h, w = stack.shape
    mean_flat = stack.mean(axis=0)
    centered = (stack - mean_flat).reshape(m, -1)
    vals, vecs = _snapshot_pca(centered)
    scale = max(float(vals[0]) if vals.size else 0.0, 0.0)
    keep = vals > max(scale * 1e-10, 1e-300)
    keep[m - 1:] = False
    effs = []
    for k in np.flatnonzero(keep):
        u = centered.T @ vecs[:, k]
        u /= np.linalg.norm(u)
        # fix the sign so the largest-magnitude pixel is positive
        if u[np.argmax(np.abs(u))] < 0:
            u = -u
        effs.append(u.reshape(h, w))
    effs = np.array(effs).reshape(len(effs), h, w)
    return EffModel(mean_flat, effs, vals[keep].copy(), 0)


def synthetic_eigenvalues(pixel_std, m, S, seed):
    """Sorted eigenvalue spectra of ``S`` Gaussian stacks with the given per-pixel std."""
    rng = np.random.default_rng(seed)
    n = pixel_std.size
    out = np.empty((S, m))
    std = pixel_std.reshape(1, n)
    for s in range(S):
        x = rng.standard_normal((m, n)) * std
        out[s], _ = _snapshot_pca(x - x.mean(axis=0))
    return out


def parallel_analysis(flats, eigenvalues, S=100, percentile=95.0, seed=0):
    """Number of leading components whose eigenvalue beats the matched-noise percentile.

    Each synthetic stack has independent Gaussian pixels with the per-pixel
    variance of the flat stack. Retention stops at the first component that
    fails.
    """
    stack = _stack(flats)
    m = stack.shape[0]
    if S < 1:
        raise ParameterError("S must be >= 1")
    pixel_std = stack.reshape(m, -1).std(axis=0)
    null = synthetic_eigenvalues(pixel_std, m, S, seed)
    thresholds = np.percentile(null, percentile, axis=0)
    K = 0
    for k, val in enumerate(np.asarray(eigenvalues, dtype=np.float64)):
        if k >= thresholds.size or not val > thresholds[k]:
            break
        K += 1
    return K


def build_eff_model(flats, S=100, percentile=95.0, seed=0):
    model = compute_effs(flats)
    model.K = min(parallel_analysis(flats, model.eigenvalues, S, percentile, seed), len(model.effs))
    return model


def tv(img, mask=None):
    """Anisotropic total variation over forward-difference pairs with both pixels unmasked.

    ``mask`` marks excluded pixels.
    """
    img = np.asarray(img, dtype=np.float64)
    dx = np.abs(np.diff(img, axis=1))
    dy = np.abs(np.diff(img, axis=0))
    if mask is None:
        return float(dx.sum() + dy.sum())
    keep = ~as_mask(mask, img.shape)
    return float(dx[keep[:, 1:] & keep[:, :-1]].sum() + dy[keep[1:] & keep[:-1]].sum())


def estimate_flat(model, weights):
    weights = np.asarray(weights, dtype=np.float64)
    if weights.size == 0:
        return model.mean_flat.copy()
    return model.mean_flat + np.tensordot(weights, model.effs[:weights.size], axes=1)


def tv_objective(weights, shot, model, mask=None, floor=DEFAULT_FLOOR):
    """TV of the transmission map times the mean of the estimated flat."""
    flat = estimate_flat(model, weights)
    return tv(shot / np.maximum(flat, floor), mask) * float(flat.mean())


def _central_gradient(fun, x, step):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (fun(x + e) - fun(x - e)) / (2 * step)
    return g


def bfgs_minimize(fun, x0, tolerance=1e-6, max_iterations=400, fd_step=1e-5):
    """Quasi-Newton minimization with finite-difference gradients and Armijo backtracking.

    Returns ``(x, trace, iterations, converged, reason)``; ``trace`` holds the
    objective value at the start and after every accepted step, and is
    non-increasing.
    """
    def checked(x):
        val = fun(x)
        if not np.isfinite(val):
            raise NumericalError("non-finite objective during quasi-Newton search",
                                 {"point": [float(v) for v in x], "value": float(val)})
        return float(val)

    x = np.array(x0, dtype=np.float64)
    n = x.size
    f = checked(x)
    g = _central_gradient(checked, x, fd_step)
    H = np.eye(n)
    trace = [f]
    first = True
    for it in range(1, max_iterations + 1):
        if np.linalg.norm(g) < tolerance:
            return x, trace, it - 1, True, "gradient norm below tolerance"
        p = -H @ g
        slope = float(g @ p)
        if slope >= 0:
            H = np.eye(n)
            p = -g
            slope = -float(g @ g)
        if first:
            # first step: unit length in parameter space at most
            p = p / max(1.0, np.linalg.norm(p))
            slope = float(g @ p)
        alpha = 1.0
        accepted = False
        for _ in range(60):
            x_new = x + alpha * p
            f_new = checked(x_new)
            if f_new <= f + 1e-4 * alpha * slope:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            return x, trace, it - 1, False, "line search found no decrease"
        g_new = _central_gradient(checked, x_new, fd_step)
        s, y = x_new - x, g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if first:
                H = np.eye(n) * (sy / float(y @ y))
            rho = 1.0 / sy
            I = np.eye(n)
            H = (I - rho * np.outer(s, y)) @ H @ (I - rho * np.outer(y, s)) + rho * np.outer(s, s)
        first = False
        step_small = np.linalg.norm(s) <= tolerance * (1.0 + np.linalg.norm(x))
        decrease_small = f - f_new <= tolerance * max(1.0, abs(f))
        x, f, g = x_new, f_new, g_new
        trace.append(f)
        if step_small and decrease_small:
            return x, trace, it, True, "step and decrease below tolerance"
    return x, trace, max_iterations, False, "iteration limit reached"


def fit_weights(shot, model, cfg=TvFitConfig()):
    """Per-shot EFF weights minimizing the TV objective, starting from zero."""
    shot = as_image(shot)
    if shot.shape != model.shape:
        raise ShapeError(f"shot shape {shot.shape} does not match the model {model.shape}")
    mask = None if cfg.mask is None else as_mask(cfg.mask, shot.shape)
    if model.K == 0:
        return TvFit(np.zeros(0), [tv_objective([], shot, model, mask, cfg.floor)], 0, True, "K == 0")
    x, trace, iters, converged, reason = bfgs_minimize(
        lambda w: tv_objective(w, shot, model, mask, cfg.floor),
        np.zeros(model.K), cfg.tolerance, cfg.max_iterations, cfg.fd_step)
    return TvFit(x, trace, iters, converged, reason)


def dffn_reconstruct(shot, model, cfg=TvFitConfig(), weights=None):
    """Transmission with the dynamically estimated flat; ``K == 0`` gives static division."""
    if weights is None:
        weights = fit_weights(shot, model, cfg).weights
    return reconstruct_transmission(shot, estimate_flat(model, weights), cfg.floor)
