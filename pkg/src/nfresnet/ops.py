"""Forward operators on NHWC arrays and their vector-Jacobian products.

Every ``op`` here is a pure numpy function. Where an op is differentiable the
matching ``op_vjp`` takes the upstream gradient plus the forward inputs and
returns gradients for each input. :mod:`nfresnet.autodiff` wires these into a
tape; forward-only callers (SPP generation) use them directly.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .tensor import as_rng, resolve_dtype


class ShapeError(ValueError):
    pass


# -- activations -------------------------------------------------------------


class ActivationKind(str, Enum):
    RELU = "relu"
    SILU = "silu"
    TANH = "tanh"
    IDENTITY = "identity"


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _relu(x):
    return np.maximum(x, 0)


def _relu_grad(x):
    return (x > 0).astype(x.dtype)


def _silu(x):
    return x * _sigmoid(x)


def _silu_grad(x):
    s = _sigmoid(x)
    return s * (1 + x * (1 - s))


def _tanh_grad(x):
    return 1 - np.tanh(x) ** 2


_FUNCS = {
    ActivationKind.RELU: (_relu, _relu_grad),
    ActivationKind.SILU: (_silu, _silu_grad),
    ActivationKind.TANH: (np.tanh, _tanh_grad),
    ActivationKind.IDENTITY: (lambda x: x, np.ones_like),
}

# Std of g(x) for x ~ N(0, 1). relu is the closed form sqrt((1 - 1/pi) / 2);
# silu is the reference constant 0.5595; tanh was produced by
# scaled_ws.estimate_activation_std("tanh", dim=256, n_vectors=1024, rng=0)
# and frozen here.
SIGMA_G = {
    ActivationKind.RELU: float(np.sqrt(0.5 * (1.0 - 1.0 / np.pi))),
    ActivationKind.SILU: 0.5595,
    ActivationKind.TANH: 0.6270871282160602,
    ActivationKind.IDENTITY: 1.0,
}
SIGMA_G_PROVENANCE = {
    "relu": {"method": "analytic"},
    "identity": {"method": "analytic"},
    "silu": {"method": "reference", "n_vectors": 1024, "dim": 256},
    "tanh": {"method": "estimated", "seed": 0, "n_vectors": 1024, "dim": 256},
}


def activation_kind(kind) -> ActivationKind:
    try:
        return ActivationKind(kind.value if isinstance(kind, ActivationKind) else str(kind).lower())
    except ValueError:
        raise ValueError(
            f"unknown activation {kind!r}; expected one of {[k.value for k in ActivationKind]}"
        ) from None


def sigma_g(kind) -> float:
    return SIGMA_G[activation_kind(kind)]


def activation(x, kind, scaled: bool = False):
    """Elementwise ``g(x)``, divided by ``sigma_g`` when ``scaled``."""
    kind = activation_kind(kind)
    fn, _ = _FUNCS[kind]
    y = fn(np.asarray(x))
    if scaled and kind is not ActivationKind.IDENTITY:
        y = y * y.dtype.type(1.0 / SIGMA_G[kind])
    return y


def activation_vjp(g, x, kind, scaled: bool = False):
    kind = activation_kind(kind)
    _, dfn = _FUNCS[kind]
    d = dfn(x)
    if scaled and kind is not ActivationKind.IDENTITY:
        d = d * d.dtype.type(1.0 / SIGMA_G[kind])
    return g * d


def sigmoid(x):
    return _sigmoid(np.asarray(x))


def sigmoid_vjp(g, y):
    """Gradient of sigmoid given its *output* ``y``."""
    return g * y * (1 - y)


# -- convolution ---------------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    groups: int = 1

    def __post_init__(self):
        if min(self.in_ch, self.out_ch, self.kernel, self.stride, self.groups) < 1:
            raise ValueError(f"invalid conv spec {self}")
        if self.padding < 0:
            raise ValueError("padding must be >= 0")
        if self.in_ch % self.groups or self.out_ch % self.groups:
            raise ValueError(
                f"groups={self.groups} must divide in_ch={self.in_ch} and out_ch={self.out_ch}"
            )

    @property
    def fan_in(self) -> int:
        return (self.in_ch // self.groups) * self.kernel**2

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_ch, self.kernel, self.kernel, self.in_ch // self.groups)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        ho = (h + 2 * self.padding - self.kernel) // self.stride + 1
        wo = (w + 2 * self.padding - self.kernel) // self.stride + 1
        return ho, wo


def he_gain(kind="relu") -> float:
    """``1 / sqrt(E[g(x)^2])`` for x ~ N(0, 1): sqrt(2) for relu, 1 for identity."""
    kind = activation_kind(kind)
    if kind is ActivationKind.RELU:
        return float(np.sqrt(2.0))
    if kind is ActivationKind.IDENTITY:
        return 1.0
    from .scaled_ws import activation_moments

    mu, sd = activation_moments(kind)
    return float(1.0 / np.sqrt(mu**2 + sd**2))


def he_init(spec: ConvSpec, rng=None, gain: float = np.sqrt(2.0), dtype="double") -> np.ndarray:
    """Gaussian weights with variance ``gain**2 / fan_in`` (He init for gain sqrt(2))."""
    if spec.fan_in <= 0:
        raise ValueError("fan_in must be positive")
    std = gain / np.sqrt(spec.fan_in)
    return as_rng(rng).normal(spec.weight_shape, 0.0, std, resolve_dtype(dtype))


def infer_spec(x_shape, weight_shape, stride=1, padding=0, groups=1) -> ConvSpec:
    if len(x_shape) != 4 or len(weight_shape) != 4:
        raise ShapeError(f"conv2d expects NHWC input and OKKI weight, got {x_shape}, {weight_shape}")
    out_ch, k, k2, cin_g = weight_shape
    if k != k2:
        raise ShapeError("only square kernels are supported")
    spec = ConvSpec(x_shape[3], out_ch, k, stride, padding, groups)
    if cin_g * groups != x_shape[3]:
        raise ShapeError(
            f"weight expects {cin_g * groups} input channels (groups={groups}), input has {x_shape[3]}"
        )
    ho, wo = spec.output_hw(x_shape[1], x_shape[2])
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {x_shape[1]}x{x_shape[2]} too small for kernel {k}")
    return spec


def _taps(spec: ConvSpec, ho: int, wo: int):
    s = spec.stride
    for i in range(spec.kernel):
        for j in range(spec.kernel):
            yield i, j, np.s_[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :]


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """Direct zero-padded strided grouped convolution.

    ``x`` is ``(n, h, w, in_ch)``; ``weight`` is ``(out_ch, k, k, in_ch // groups)``.
    The kernel is visited tap by tap; each tap is one (batched) matmul over all
    output pixels, and groups partition channels contiguously.
    """
    x = np.asarray(x)
    weight = np.asarray(weight)
    spec = infer_spec(x.shape, weight.shape, stride, padding, groups)
    n = x.shape[0]
    ho, wo = spec.output_hw(x.shape[1], x.shape[2])
    G = spec.groups
    cin_g = spec.in_ch // G
    cout_g = spec.out_ch // G
    P = n * ho * wo
    dtype = np.result_type(x, weight)
    xp = _pad(x, spec.padding)
    if G == 1:
        out = np.zeros((P, spec.out_ch), dtype=dtype)
        for i, j, sl in _taps(spec, ho, wo):
            patch = np.ascontiguousarray(xp[sl]).reshape(P, cin_g)
            out += patch @ weight[:, i, j, :].T
    else:
        out = np.zeros((G, P, cout_g), dtype=dtype)
        wg = weight.reshape(G, cout_g, spec.kernel, spec.kernel, cin_g)
        for i, j, sl in _taps(spec, ho, wo):
            patch = np.ascontiguousarray(xp[sl]).reshape(P, G, cin_g).transpose(1, 0, 2)
            out += patch @ wg[:, :, i, j, :].transpose(0, 2, 1)
        out = out.transpose(1, 0, 2).reshape(P, spec.out_ch)
    out = out.reshape(n, ho, wo, spec.out_ch)
    if bias is not None:
        bias = np.asarray(bias)
        if bias.shape != (spec.out_ch,):
            raise ShapeError(f"bias shape {bias.shape} != ({spec.out_ch},)")
        out += bias
    return out


def conv2d_vjp(g, x, weight, stride=1, padding=0, groups=1):
    """Return ``(dx, dweight, dbias)`` for upstream gradient ``g``."""
    spec = infer_spec(x.shape, weight.shape, stride, padding, groups)
    n = x.shape[0]
    ho, wo = spec.output_hw(x.shape[1], x.shape[2])
    G = spec.groups
    cin_g = spec.in_ch // G
    cout_g = spec.out_ch // G
    P = n * ho * wo
    xp = _pad(x, spec.padding)
    dxp = np.zeros_like(xp, dtype=np.result_type(g, weight))
    dw = np.zeros(weight.shape, dtype=np.result_type(g, x))
    g2 = np.ascontiguousarray(g).reshape(P, spec.out_ch)
    if G == 1:
        for i, j, sl in _taps(spec, ho, wo):
            patch = np.ascontiguousarray(xp[sl]).reshape(P, cin_g)
            dw[:, i, j, :] = g2.T @ patch
            dxp[sl] += (g2 @ weight[:, i, j, :]).reshape(n, ho, wo, cin_g)
    else:
        gg = g2.reshape(P, G, cout_g).transpose(1, 0, 2)  # (G, P, cout_g)
        wg = weight.reshape(G, cout_g, spec.kernel, spec.kernel, cin_g)
        dwg = dw.reshape(G, cout_g, spec.kernel, spec.kernel, cin_g)
        for i, j, sl in _taps(spec, ho, wo):
            patch = np.ascontiguousarray(xp[sl]).reshape(P, G, cin_g).transpose(1, 0, 2)
            dwg[:, :, i, j, :] = gg.transpose(0, 2, 1) @ patch
            dpatch = gg @ wg[:, :, i, j, :]  # (G, P, cin_g)
            dxp[sl] += dpatch.transpose(1, 0, 2).reshape(n, ho, wo, spec.in_ch)
    p = spec.padding
    dx = dxp[:, p : p + x.shape[1], p : p + x.shape[2], :] if p else dxp
    db = g2.sum(axis=0)
    return np.ascontiguousarray(dx), dw, db


# -- pooling, normalization, linear --------------------------------------------


def avg_pool2d(x, k: int):
    """Non-overlapping ``k x k`` mean pooling."""
    x = np.asarray(x)
    n, h, w, c = x.shape
    if k < 1 or h % k or w % k:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by pool size {k}")
    return x.reshape(n, h // k, k, w // k, k, c).mean(axis=(2, 4))


def avg_pool2d_vjp(g, k: int):
    g = g / (k * k)
    return np.repeat(np.repeat(g, k, axis=1), k, axis=2)


def global_avg_pool(x):
    return np.asarray(x).mean(axis=(1, 2), keepdims=True)


def global_avg_pool_vjp(g, x_shape):
    return np.broadcast_to(g / (x_shape[1] * x_shape[2]), x_shape).copy()


def batch_norm_stats(x, eps: float = 1e-5):
    """Normalize each channel with its batch mean and population variance.

    Affine parameters sit at their initial values (scale 1, shift 0). A constant
    channel maps to zeros.
    """
    x = np.asarray(x)
    if x.shape[0] * x.shape[1] * x.shape[2] < 2:
        raise ShapeError("batch_norm_stats needs at least 2 values per channel")
    mu = x.mean(axis=(0, 1, 2), keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=(0, 1, 2), keepdims=True)
    return xc / np.sqrt(var + eps)


def batch_norm_vjp(g, x, eps: float = 1e-5):
    mu = x.mean(axis=(0, 1, 2), keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=(0, 1, 2), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gm = g.mean(axis=(0, 1, 2), keepdims=True)
    gx = (g * xhat).mean(axis=(0, 1, 2), keepdims=True)
    return inv * (g - gm - xhat * gx)


def linear(x, weight, bias=None):
    """Affine map on ``(n, c)`` or ``(n, 1, 1, c)`` features; ``weight`` is ``(out, in)``."""
    x = np.asarray(x)
    if x.ndim == 4:
        if x.shape[1:3] != (1, 1):
            raise ShapeError(f"linear expects pooled (n,1,1,c) input, got {x.shape}")
        x = x.reshape(x.shape[0], x.shape[3])
    weight = np.asarray(weight)
    if x.ndim != 2 or weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ShapeError(f"linear: features {x.shape} incompatible with weight {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        out = out + bias
    return out


# -- squeeze-excite ------------------------------------------------------------


def squeeze_excite(x, w0, b0, w1, b1, act="relu", corrected: bool = True, scaled_act: bool = True):
    """``s * sigmoid(conv1(act(conv0(pool(x))))) * x`` with ``s = 2`` when corrected.

    ``w0`` is ``(hidden, 1, 1, c)`` and ``w1`` is ``(c, 1, 1, hidden)``.
    """
    x = np.asarray(x)
    w0 = np.asarray(w0)
    w1 = np.asarray(w1)
    c = x.shape[3]
    if w0.shape[0] < 1 or w0.shape[1:] != (1, 1, c) or w1.shape != (c, 1, 1, w0.shape[0]):
        raise ShapeError(f"squeeze_excite weights {w0.shape}, {w1.shape} do not fit {c} channels")
    h = conv2d(global_avg_pool(x), w0, b0)
    h = conv2d(activation(h, act, scaled_act), w1, b1)
    gate = sigmoid(h)
    if corrected:
        gate = gate * 2
    return gate * x
