"""Parameter containers built on :mod:`nfresnet.autodiff`."""

from __future__ import annotations

import numpy as np

from . import autodiff as F
from .autodiff import Var
from .ops import ConvSpec, he_init
from .scaled_ws import DEFAULT_EPS
from .tensor import as_rng, resolve_dtype


class Module:
    """Minimal parameter tree: Var attributes, child modules and lists of them."""

    def named_parameters(self, prefix: str = "") -> dict[str, Var]:
        out = {}
        for key, val in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(val, Var):
                if val.requires_grad:
                    out[name] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{name}.{i}."))
        return out

    def modules(self):
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def name_parameters(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix).items():
            p.name = name


def _param(value) -> Var:
    return Var(value, requires_grad=True)


class Conv2d(Module):
    """Convolution with optional bias. Plain (non-standardized) weights.

    ``exempt`` records why a plain conv is allowed inside a model that otherwise
    standardizes every convolution.
    """

    standardized = False

    def __init__(self, spec: ConvSpec, rng=None, *, bias: bool = True,
                 init_gain: float = float(np.sqrt(2.0)), dtype="single",
                 exempt: str | None = None):
        dt = resolve_dtype(dtype)
        self.spec = spec
        self.weight = _param(he_init(spec, as_rng(rng), init_gain, dt))
        self.bias = _param(np.zeros(spec.out_ch, dtype=dt)) if bias else None
        self.exempt = exempt

    def effective_weight(self):
        return self.weight

    def __call__(self, x):
        s = self.spec
        return F.conv2d(x, self.effective_weight(), self.bias, s.stride, s.padding, s.groups)


class StandardizedConv(Conv2d):
    """Scaled-WS convolution: learnable per-channel gain (init 1) and bias (init 0).

    The underlying weight is drawn Gaussian; its scale is irrelevant because the
    weight is re-standardized on every call.
    """

    standardized = True

    def __init__(self, spec: ConvSpec, rng=None, *, bias: bool = True, gain: bool = True,
                 eps: float = DEFAULT_EPS, dtype="single"):
        super().__init__(spec, rng, bias=bias, dtype=dtype)
        dt = resolve_dtype(dtype)
        if spec.fan_in < 2:
            raise ValueError("Scaled WS needs fan_in >= 2")
        self.gain = _param(np.ones(spec.out_ch, dtype=dt)) if gain else None
        self.eps = eps

    def effective_weight(self):
        return F.standardize_weight(self.weight, self.gain, self.eps)


class Linear(Module):
    """Classifier head, zero-initialized weight and bias."""

    def __init__(self, in_features: int, out_features: int, dtype="single"):
        dt = resolve_dtype(dtype)
        self.weight = _param(np.zeros((out_features, in_features), dtype=dt))
        self.bias = _param(np.zeros(out_features, dtype=dt))

    def __call__(self, x):
        return F.linear(x, self.weight, self.bias)


class SqueezeExcite(Module):
    """Pool -> 1x1 conv -> act -> 1x1 conv -> sigmoid gate, times 2 when corrected."""

    def __init__(self, channels: int, hidden: int, activation: str, rng=None, *,
                 scaled: bool = True, corrected: bool = True, dtype="single"):
        if hidden < 1:
            raise ValueError("squeeze-excite hidden width must be >= 1")
        rng = as_rng(rng)
        reason = "squeeze-excite MLP"
        self.conv0 = Conv2d(ConvSpec(channels, hidden), rng, dtype=dtype, exempt=reason)
        self.conv1 = Conv2d(ConvSpec(hidden, channels), rng, dtype=dtype, exempt=reason)
        self.activation = activation
        self.scaled = scaled
        self.corrected = corrected

    def __call__(self, x):
        h = self.conv0(F.global_avg_pool(x))
        h = self.conv1(F.activation(h, self.activation, self.scaled))
        gate = F.sigmoid(h)
        if self.corrected:
            gate = F.scale(gate, 2.0)
        return F.mul(gate, x)
