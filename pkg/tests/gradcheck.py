"""Central finite-difference gradient checks shared by the layer tests and the acceptance suite."""

import numpy as np

from artifact.neural import layers as L
from artifact.neural.loss import weighted_l1_loss
from artifact.neural.unet import UNetConfig, UNetModel, unet_backward, unet_forward

STEP = 1e-5
TOLERANCE = 1e-5


def numeric_grad(f, x, step=STEP):
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        fp = f()
        x[i] = old - step
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * step)
    return g


def rel_error(analytic, numeric):
    """Max absolute difference relative to the larger of the two max magnitudes."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _projection(out, rng):
    return rng.standard_normal(out.shape)


def check_conv3x3(rng, narrowing=False):
    n, c, o = rng.integers(1, 3), rng.integers(1, 5), rng.integers(1, 5)
    if narrowing:
        # fewer output than input channels takes the other kernel path
        o, c = rng.integers(1, 4), rng.integers(4, 7)
    h, w = rng.integers(3, 9), rng.integers(3, 9)
    x = rng.standard_normal((n, h, w, c))
    wt = rng.standard_normal((o, c, 3, 3))
    b = rng.standard_normal(o)
    out, cache = L.conv2d_forward(x, wt, b, pad=1)
    r = _projection(out, rng)
    dx, dw, db = L.conv2d_backward(r, cache)
    f = lambda: float(np.sum(L.conv2d_forward(x, wt, b, pad=1)[0] * r))
    return max(rel_error(dx, numeric_grad(f, x)), rel_error(dw, numeric_grad(f, wt)),
               rel_error(db, numeric_grad(f, b)))


def check_conv1x1(rng):
    x = rng.standard_normal((2, 4, 4, 3))
    wt = rng.standard_normal((2, 3, 1, 1))
    b = rng.standard_normal(2)
    out, cache = L.conv1x1_forward(x, wt, b)
    r = _projection(out, rng)
    dx, dw, db = L.conv1x1_backward(r, cache)
    f = lambda: float(np.sum(L.conv1x1_forward(x, wt, b)[0] * r))
    return max(rel_error(dx, numeric_grad(f, x)), rel_error(dw, numeric_grad(f, wt)),
               rel_error(db, numeric_grad(f, b)))


def check_gelu(rng):
    x = rng.standard_normal((2, 4, 4, 3)) * 2
    out, cache = L.gelu_forward(x)
    r = _projection(out, rng)
    dx = L.gelu_backward(r, cache)
    f = lambda: float(np.sum(L.gelu_forward(x)[0] * r))
    return rel_error(dx, numeric_grad(f, x))


def check_maxpool(rng):
    x = rng.standard_normal((2, 8, 8, 4))
    out, cache = L.maxpool2x2_forward(x)
    r = _projection(out, rng)
    dx = L.maxpool2x2_backward(r, cache)
    f = lambda: float(np.sum(L.maxpool2x2_forward(x)[0] * r))
    return rel_error(dx, numeric_grad(f, x))


def check_convtranspose(rng):
    x = rng.standard_normal((2, 4, 4, 3))
    wt = rng.standard_normal((3, 2, 2, 2))
    b = rng.standard_normal(2)
    out, cache = L.convtranspose2x2_forward(x, wt, b)
    r = _projection(out, rng)
    dx, dw, db = L.convtranspose2x2_backward(r, cache)
    f = lambda: float(np.sum(L.convtranspose2x2_forward(x, wt, b)[0] * r))
    return max(rel_error(dx, numeric_grad(f, x)), rel_error(dw, numeric_grad(f, wt)),
               rel_error(db, numeric_grad(f, b)))


def check_concat(rng):
    a = rng.standard_normal((2, 4, 4, 2))
    b = rng.standard_normal((2, 4, 4, 3))
    out, split_at = L.concat_channels(a, b)
    r = _projection(out, rng)
    da, db = L.split_backward(r, split_at)
    f = lambda: float(np.sum(L.concat_channels(a, b)[0] * r))
    return max(rel_error(da, numeric_grad(f, a)), rel_error(db, numeric_grad(f, b)))


def check_loss(rng):
    pred = rng.standard_normal((1, 1, 6, 6))
    target = rng.standard_normal((1, 1, 6, 6))
    mask = rng.random((6, 6)) < 0.3
    _, grad = weighted_l1_loss(pred, target, mask[None, None], 10.0)
    f = lambda: weighted_l1_loss(pred, target, mask[None, None], 10.0)[0]
    return rel_error(grad, numeric_grad(f, pred))


def check_unet(rng, n_params=6):
    """Whole network (tiny width): input gradient plus a sample of parameter entries."""
    cfg = UNetConfig(base_channels=2, depth=3)
    model = UNetModel.initialize(cfg, int(rng.integers(1 << 30)))
    for k, v in model.params.items():
        if k.endswith(".bias"):
            v[...] = rng.standard_normal(v.shape) * 0.1
    x = rng.standard_normal((1, 1, 8, 8))
    out, cache = unet_forward(model, x, keep_cache=True)
    r = _projection(out, rng)
    grads, dx = unet_backward(model, r, cache, input_grad=True)
    f = lambda: float(np.sum(unet_forward(model, x) * r))
    errs = [rel_error(dx, numeric_grad(f, x))]
    names = list(model.params)
    for name in rng.choice(names, size=n_params, replace=False):
        p = model.params[name]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        old = p[idx]
        p[idx] = old + STEP
        fp = f()
        p[idx] = old - STEP
        fm = f()
        p[idx] = old
        num = (fp - fm) / (2 * STEP)
        ana = grads[name][idx]
        errs.append(abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return max(errs)


CHECKS = {
    "conv3x3": check_conv3x3,
    "conv3x3-narrowing": lambda rng: check_conv3x3(rng, narrowing=True),
    "conv1x1": check_conv1x1,
    "gelu": check_gelu,
    "maxpool2x2": check_maxpool,
    "convtranspose2x2": check_convtranspose,
    "concat/split": check_concat,
    "weighted_l1": check_loss,
    "unet": check_unet,
}


def run_suite(seeds_per_layer=3):
    """Run every check; returns {(layer, seed): relative error}."""
    results = {}
    for name, check in CHECKS.items():
        for seed in range(seeds_per_layer):
            results[(name, seed)] = check(np.random.default_rng(1000 * seed + len(name)))
    return results
