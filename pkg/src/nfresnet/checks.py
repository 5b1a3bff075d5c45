"""Gradient-check cases shared by the test suite and the ``gradcheck`` subcommand.

Every case builds double-precision leaves. Non-scalar outputs are reduced to
``sum(op(...) * r)`` with a fixed random projection ``r``, so no gradient entry
is trivially zero.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as F
from .autodiff import GradReport, Var, grad_check
from .models import ModelConfig, build_model, force_skipinit_gains, model_forward

TOLERANCE = 1e-5


def _leaf(rng, shape, name, scale=1.0, offset=0.0):
    return Var(offset + scale * rng.standard_normal(shape), requires_grad=True, name=name)


def _conv_case(rng, n, hw, cin, cout, k, stride, padding, groups):
    x = _leaf(rng, (n, hw, hw, cin), "x")
    w = _leaf(rng, (cout, k, k, cin // groups), "w", 0.5)
    b = _leaf(rng, (cout,), "b")
    return lambda: F.conv2d(x, w, b, stride, padding, groups), [x, w, b]


def _ws_case(rng, cout, k, cin, act):
    x = _leaf(rng, (2, 5, 5, cin), "x")
    w = _leaf(rng, (cout, k, k, cin), "w", 1.0, 0.3)
    g = _leaf(rng, (cout,), "gain", 0.2, 1.0)

    def fn():
        out = F.conv2d(x, F.standardize_weight(w, g), None, 1, k // 2)
        return F.activation(out, act, scaled=True)
    return fn, [x, w, g]


def _unary(rng, shape, op):
    x = _leaf(rng, shape, "x")
    return lambda: op(x), [x]


def _binary(rng, shape_a, shape_b, op):
    a, b = _leaf(rng, shape_a, "a"), _leaf(rng, shape_b, "b")
    return lambda: op(a, b), [a, b]


def _linear_case(rng, n, cin, cout):
    x = _leaf(rng, (n, 1, 1, cin), "x")
    w, b = _leaf(rng, (cout, cin), "w"), _leaf(rng, (cout,), "b")
    return lambda: F.linear(x, w, b), [x, w, b]


def _xent_case(rng, n, c):
    logits = _leaf(rng, (n, c), "logits", 2.0)
    labels = rng.integers(0, c, n)
    return lambda: F.softmax_cross_entropy(logits, labels), [logits]


def _se_case(rng, c, hidden):
    from .layers import SqueezeExcite
    se = SqueezeExcite(c, hidden, "silu", int(rng.integers(1 << 30)), dtype="double")
    x = _leaf(rng, (2, 4, 4, c), "x")
    params = [x, se.conv0.weight, se.conv0.bias, se.conv1.weight, se.conv1.bias]
    for i, p in enumerate(params[1:]):
        p.name = f"se{i}"
    return lambda: se(x), params


def op_cases(seed: int = 0) -> dict:
    """``name -> (fn, params)`` covering every differentiable op on three shapes each."""
    rng = np.random.default_rng(seed)
    cases = {}
    shapes = [(3,), (2, 3, 4), (2, 4, 4, 3)]
    for i, s in enumerate(shapes):
        cases[f"add[{i}]"] = _binary(rng, s, s[-1:], F.add)
        cases[f"mul[{i}]"] = _binary(rng, s, s, F.mul)
        cases[f"scale[{i}]"] = _unary(rng, s, lambda x: F.scale(x, -1.7))
        cases[f"sum[{i}]"] = _unary(rng, s, lambda x: F.scale(F.sum(x), 0.5))
        cases[f"mean[{i}]"] = _unary(rng, s, F.mean)
        cases[f"sigmoid[{i}]"] = _unary(rng, s, F.sigmoid)
        for act in ("relu", "silu", "tanh", "identity"):
            cases[f"activation_{act}[{i}]"] = _unary(
                rng, s, lambda x, a=act: F.activation(x, a, scaled=True))
    conv_shapes = [
        (2, 5, 3, 4, 3, 1, 1, 1),
        (1, 6, 4, 6, 3, 2, 1, 2),
        (2, 4, 6, 6, 1, 1, 0, 3),
    ]
    for i, args in enumerate(conv_shapes):
        cases[f"conv2d[{i}]"] = _conv_case(rng, *args)
    for i, (cout, k, cin, act) in enumerate([(3, 3, 2, "relu"), (4, 1, 5, "silu"), (2, 3, 3, "tanh")]):
        cases[f"scaled_ws_conv[{i}]"] = _ws_case(rng, cout, k, cin, act)
    for i, s in enumerate([(4, 3, 3, 2), (2, 4, 4, 3), (8, 2, 2, 1)]):
        cases[f"batch_norm[{i}]"] = _unary(rng, s, F.batch_norm)
    for i, (s, k) in enumerate([((1, 4, 4, 2), 2), ((2, 6, 6, 1), 3), ((2, 4, 8, 3), 2)]):
        cases[f"avg_pool2d[{i}]"] = _unary(rng, s, lambda x, k=k: F.avg_pool2d(x, k))
    for i, s in enumerate([(1, 3, 3, 2), (2, 4, 4, 3), (3, 2, 5, 1)]):
        cases[f"global_avg_pool[{i}]"] = _unary(rng, s, F.global_avg_pool)
    for i, args in enumerate([(2, 3, 4), (4, 5, 2), (1, 6, 3)]):
        cases[f"linear[{i}]"] = _linear_case(rng, *args)
    for i, args in enumerate([(2, 3), (5, 4), (3, 10)]):
        cases[f"softmax_cross_entropy[{i}]"] = _xent_case(rng, *args)
    for i, (c, h) in enumerate([(4, 2), (6, 3), (3, 1)]):
        cases[f"squeeze_excite[{i}]"] = _se_case(rng, c, h)
    return cases


def check_op(name: str, fn, params, seed: int = 0, **kwargs) -> GradReport:
    rng = np.random.default_rng(seed + 1)
    probe = fn()
    if probe.value.size == 1:
        loss = fn
    else:
        r = rng.standard_normal(probe.shape)
        loss = lambda: F.sum(F.mul(fn(), r))  # noqa: E731
    kwargs.setdefault("tolerance", TOLERANCE)
    return grad_check(loss, params, **kwargs)


def run_op_suite(seed: int = 0, **kwargs) -> dict[str, GradReport]:
    return {name: check_op(name, fn, params, seed, **kwargs)
            for name, (fn, params) in op_cases(seed).items()}


def gradcheck_model_config(seed: int = 0) -> ModelConfig:
    """4-block NF-ResNet in double precision; smooth activation so no kinks sit near a probe."""
    return ModelConfig(model="nf-resnet", stage_widths=[8, 16], stage_depths=[2, 2], alpha=0.2,
                       activation="silu", seed=seed, num_classes=3, stem_width=4,
                       dtype="double")


def model_case(cfg: ModelConfig | None = None, seed: int = 0, resolution: int = 8):
    """Model with randomized gains, biases and classifier so every path carries gradient."""
    cfg = cfg or gradcheck_model_config(seed)
    model = build_model(cfg)
    force_skipinit_gains(model, 0.5)
    rng = np.random.default_rng(seed + 7)
    for name, p in model.parameters().items():
        if name.startswith("classifier"):
            p.value[...] = 0.5 * rng.standard_normal(p.shape)
        elif name.endswith("skipinit_gain"):
            p.value[...] = 0.5 + 0.2 * rng.standard_normal()
        elif name.endswith(".gain"):
            p.value[...] = 1.0 + 0.2 * rng.standard_normal(p.shape)
        elif name.endswith(".bias"):
            p.value[...] = 0.1 * rng.standard_normal(p.shape)
    x = rng.standard_normal((2, resolution, resolution, cfg.in_channels))
    labels = rng.integers(0, cfg.num_classes, 2)

    def fn():
        logits, _ = model_forward(model, x, collect_taps=False)
        return F.softmax_cross_entropy(logits, labels)
    return model, fn


def run_model_check(seed: int = 0, max_coords: int | None = None, **kwargs) -> GradReport:
    model, fn = model_case(seed=seed)
    kwargs.setdefault("tolerance", TOLERANCE)
    kwargs.setdefault("floor", "auto")
    return grad_check(fn, model.parameters(), max_coords=max_coords, rng=seed, **kwargs)
