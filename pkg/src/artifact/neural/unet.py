"""Encoder/decoder network with skip connections.

Stage ``s`` of the encoder (1-based) runs two 3x3 convolutions with
``base * 2**(s-1)`` channels, each followed by GELU, then a 2x2 max pool.
The bottleneck has ``base * 2**depth`` channels. The decoder mirrors the
encoder with 2x2 stride-2 transposed convolutions, concatenates the matching
encoder output (skip first, upsampled second) and finishes with a 1x1
convolution to a single channel.
"""

from dataclasses import dataclass, asdict

import numpy as np

from artifact.errors import ParameterError, ShapeError
from artifact.neural import layers as L


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 32
    depth: int = 3
    in_channels: int = 1
    out_channels: int = 1

    def __post_init__(self):
        if self.base_channels < 1 or self.depth < 1:
            raise ParameterError("base_channels and depth must be >= 1")

    @property
    def bottleneck_channels(self):
        return self.base_channels * 2 ** self.depth

    def stage_channels(self, stage):
        return self.base_channels * 2 ** (stage - 1)

    def to_dict(self):
        return asdict(self)


def parameter_shapes(config):
    """Ordered ``(name, shape)`` pairs of every weight and bias."""
    shapes = []

    def conv(name, cin, cout, k=3):
        shapes.append((f"{name}.weight", (cout, cin, k, k)))
        shapes.append((f"{name}.bias", (cout,)))

    cin = config.in_channels
    for s in range(1, config.depth + 1):
        ch = config.stage_channels(s)
        conv(f"enc{s}.conv1", cin, ch)
        conv(f"enc{s}.conv2", ch, ch)
        cin = ch
    bott = config.bottleneck_channels
    conv("bott.conv1", cin, bott)
    conv("bott.conv2", bott, bott)
    cin = bott
    for s in range(config.depth, 0, -1):
        ch = config.stage_channels(s)
        shapes.append((f"up{s}.weight", (cin, ch, 2, 2)))
        shapes.append((f"up{s}.bias", (ch,)))
        conv(f"dec{s}.conv1", 2 * ch, ch)
        conv(f"dec{s}.conv2", ch, ch)
        cin = ch
    conv("head", cin, config.out_channels, k=1)
    return shapes


def conv_parameter_count(cin, cout, kernel):
    """Weights plus biases of one ``kernel`` x ``kernel`` convolution."""
    return kernel * kernel * cin * cout + cout


def count_parameters(config):
    """Total number of weights and biases, from the closed-form layer sizes."""
    b = config.base_channels
    total = 0
    cin = config.in_channels
    for s in range(1, config.depth + 1):
        ch = b * 2 ** (s - 1)
        total += conv_parameter_count(cin, ch, 3) + conv_parameter_count(ch, ch, 3)
        cin = ch
    bott = b * 2 ** config.depth
    total += conv_parameter_count(cin, bott, 3) + conv_parameter_count(bott, bott, 3)
    cin = bott
    for s in range(config.depth, 0, -1):
        ch = b * 2 ** (s - 1)
        total += conv_parameter_count(cin, ch, 2)  # transposed conv
        total += conv_parameter_count(2 * ch, ch, 3) + conv_parameter_count(ch, ch, 3)
        cin = ch
    return total + conv_parameter_count(cin, config.out_channels, 1)


class UNetModel:
    """Weights of the network plus its configuration.

    ``params`` maps layer names (see :func:`parameter_shapes`) to arrays.
    """

    def __init__(self, config, params):
        self.config = config
        expected = parameter_shapes(config)
        missing = [n for n, _ in expected if n not in params]
        if missing:
            raise ShapeError(f"missing parameters: {missing[:3]}...")
        for name, shape in expected:
            if tuple(params[name].shape) != shape:
                raise ShapeError(f"{name}: expected {shape}, got {params[name].shape}")
        self.params = {name: params[name] for name, _ in expected}

    @classmethod
    def initialize(cls, config, seed, dtype=np.float64):
        """He-normal weights (std sqrt(2 / fan_in)), zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in parameter_shapes(config):
            if name.endswith(".bias"):
                params[name] = np.zeros(shape, dtype=dtype)
                continue
            if name.startswith("up"):
                fan_in = shape[0]  # each output pixel sees one input pixel per channel
            else:
                fan_in = shape[1] * shape[2] * shape[3]
            params[name] = (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)
        return cls(config, params)

    @classmethod
    def zeros(cls, config, dtype=np.float64):
        return cls(config, {n: np.zeros(s, dtype=dtype) for n, s in parameter_shapes(config)})

    def copy(self):
        return UNetModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype):
        return UNetModel(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    @property
    def dtype(self):
        return self.params["head.weight"].dtype

    def num_parameters(self):
        return int(sum(v.size for v in self.params.values()))


def _double_conv_forward(p, prefix, x, need_dx=True):
    h1, c1 = L.conv2d_forward(x, p[f"{prefix}.conv1.weight"], p[f"{prefix}.conv1.bias"], pad=1)
    a1, g1 = L.gelu_forward(h1)
    del h1
    h2, c2 = L.conv2d_forward(a1, p[f"{prefix}.conv2.weight"], p[f"{prefix}.conv2.bias"], pad=1)
    a2, g2 = L.gelu_forward(h2)
    return a2, (c1, g1, c2, g2, need_dx)


def _double_conv_backward(prefix, dout, cache, grads, need_dx=None):
    c1, g1, c2, g2, cached_need_dx = cache
    d = L.gelu_backward(dout, g2)
    d, grads[f"{prefix}.conv2.weight"], grads[f"{prefix}.conv2.bias"] = L.conv2d_backward(d, c2)
    d = L.gelu_backward(d, g1)
    d, grads[f"{prefix}.conv1.weight"], grads[f"{prefix}.conv1.bias"] = L.conv2d_backward(
        d, c1, need_dx=cached_need_dx if need_dx is None else need_dx)
    return d


def unet_forward(model, x, keep_cache=False):
    """Run the network on an (N, C_in, H, W) batch; H and W must divide by 2**depth.

    Returns the (N, C_out, H, W) output, or ``(output, cache)`` when
    ``keep_cache`` is set (needed by :func:`unet_backward`).
    """
    cfg = model.config
    p = model.params
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected (N, {cfg.in_channels}, H, W) input, got {x.shape}")
    factor = 2 ** cfg.depth
    if x.shape[2] % factor or x.shape[3] % factor:
        raise ShapeError(f"height and width must be divisible by {factor}, got {x.shape[2:]}")
    h = np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=model.dtype)

    caches = []
    skips = []
    for s in range(1, cfg.depth + 1):
        h, c = _double_conv_forward(p, f"enc{s}", h, need_dx=s > 1)
        skips.append(h)
        h, pc = L.maxpool2x2_forward(h)
        caches.append((c, pc))
    h, bott_cache = _double_conv_forward(p, "bott", h)
    up_caches = []
    for s in range(cfg.depth, 0, -1):
        h, tc = L.convtranspose2x2_forward(h, p[f"up{s}.weight"], p[f"up{s}.bias"])
        h, split_at = L.concat_channels(skips[s - 1], h)
        h, dc = _double_conv_forward(p, f"dec{s}", h)
        up_caches.append((tc, split_at, dc))
    out, head_cache = L.conv1x1_forward(h, p["head.weight"], p["head.bias"])
    out = out.transpose(0, 3, 1, 2)
    if not keep_cache:
        return out
    return out, (caches, bott_cache, up_caches, head_cache)


def unet_backward(model, dout, cache, input_grad=False):
    """Parameter gradients for the output gradient ``dout``.

    Returns a dict keyed like ``model.params``; with ``input_grad`` the
    gradient w.r.t. the network input is returned as a second value.
    """
    cfg = model.config
    caches, bott_cache, up_caches, head_cache = cache
    grads = {}
    dout = np.ascontiguousarray(dout.transpose(0, 2, 3, 1), dtype=model.dtype)
    d, grads["head.weight"], grads["head.bias"] = L.conv1x1_backward(dout, head_cache)
    skip_grads = {}
    for (tc, split_at, dc), s in zip(up_caches[::-1], range(1, cfg.depth + 1)):
        d = _double_conv_backward(f"dec{s}", d, dc, grads)
        d_skip, d = L.split_backward(d, split_at)
        skip_grads[s] = d_skip
        d, grads[f"up{s}.weight"], grads[f"up{s}.bias"] = L.convtranspose2x2_backward(d, tc)
    d = _double_conv_backward("bott", d, bott_cache, grads)
    for s in range(cfg.depth, 0, -1):
        c, pc = caches[s - 1]
        d = L.maxpool2x2_backward(d, pc) + skip_grads[s]
        d = _double_conv_backward(f"enc{s}", d, c, grads, need_dx=True if s == 1 and input_grad else None)
    if input_grad:
        return grads, d.transpose(0, 3, 1, 2)
    return grads
