"""Define-by-run reverse-mode differentiation over the ops in :mod:`nfresnet.ops`.

A :class:`Var` wraps a numpy array. Ops on Vars record a node holding the
parents and a closure mapping the upstream gradient to one gradient per parent.
Recording is skipped under :func:`no_grad` or when no parent requires a
gradient, so the same model code runs cheaply for SPP generation.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field

import numpy as np

from . import ops
from . import scaled_ws as ws

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class NonFiniteGradientError(FloatingPointError):
    pass


class Var:
    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Var(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_wrap(other))

    def __truediv__(self, other):
        if isinstance(other, Var):
            raise TypeError("division by a Var is not supported")
        return scale(self, 1.0 / other)


def _wrap(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def _node(value, parents, backward) -> Var:
    out = Var(value)
    if grad_enabled() and any(p is not None and p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- primitives ------------------------------------------------------------------


def add(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    return _node(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a, b) -> Var:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(a, c: float) -> Var:
    a = _wrap(a)
    c = a.dtype.type(c)
    return _node(a.value * c, (a,), lambda g: (g * c,))


def sum(a) -> Var:  # noqa: A001 - mirrors numpy
    a = _wrap(a)
    return _node(np.asarray(a.value.sum()), (a,),
                 lambda g: (np.broadcast_to(g, a.shape).astype(a.dtype),))


def mean(a) -> Var:
    a = _wrap(a)
    n = a.value.size
    return _node(np.asarray(a.value.mean()), (a,),
                 lambda g: (np.broadcast_to(g / n, a.shape).astype(a.dtype),))


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1) -> Var:
    x, weight = _wrap(x), _wrap(weight)
    bias = None if bias is None else _wrap(bias)
    out = ops.conv2d(x.value, weight.value, None if bias is None else bias.value,
                     stride, padding, groups)
    _FlopCounter.record(x.shape, weight.shape, out.shape)

    def backward(g):
        dx, dw, db = ops.conv2d_vjp(g, x.value, weight.value, stride, padding, groups)
        return dx, dw, db

    return _node(out, (x, weight, bias), backward)


def standardize_weight(weight, gain=None, eps: float = ws.DEFAULT_EPS) -> Var:
    weight = _wrap(weight)
    gain = None if gain is None else _wrap(gain)
    gv = None if gain is None else gain.value
    out = ws.standardize_weight(weight.value, gv, eps)

    def backward(g):
        dw, dgain = ws.standardize_weight_vjp(g, weight.value, gv, eps)
        if dgain is not None:
            dgain = dgain.reshape(gain.shape)
        return dw, dgain

    return _node(out, (weight, gain), backward)


def activation(x, kind, scaled: bool = False) -> Var:
    x = _wrap(x)
    return _node(ops.activation(x.value, kind, scaled), (x,),
                 lambda g: (ops.activation_vjp(g, x.value, kind, scaled),))


def sigmoid(x) -> Var:
    x = _wrap(x)
    y = ops.sigmoid(x.value)
    return _node(y, (x,), lambda g: (ops.sigmoid_vjp(g, y),))


def batch_norm(x, eps: float = 1e-5) -> Var:
    x = _wrap(x)
    return _node(ops.batch_norm_stats(x.value, eps), (x,),
                 lambda g: (ops.batch_norm_vjp(g, x.value, eps),))


def avg_pool2d(x, k: int) -> Var:
    x = _wrap(x)
    return _node(ops.avg_pool2d(x.value, k), (x,), lambda g: (ops.avg_pool2d_vjp(g, k),))


def global_avg_pool(x) -> Var:
    x = _wrap(x)
    return _node(ops.global_avg_pool(x.value), (x,),
                 lambda g: (ops.global_avg_pool_vjp(g, x.shape),))


def linear(x, weight, bias=None) -> Var:
    x, weight = _wrap(x), _wrap(weight)
    bias = None if bias is None else _wrap(bias)
    out = ops.linear(x.value, weight.value, None if bias is None else bias.value)
    xf = x.value.reshape(x.shape[0], -1)

    def backward(g):
        dx = (g @ weight.value).reshape(x.shape)
        return dx, g.T @ xf, g.sum(axis=0)

    return _node(out, (x, weight, bias), backward)


def softmax_cross_entropy(logits, labels) -> Var:
    """Mean cross-entropy of integer ``labels`` under ``softmax(logits)``."""
    logits = _wrap(logits)
    labels = np.asarray(labels)
    z = logits.value - logits.value.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = labels.shape[0]
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1
        return (g * p / n,)

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), backward)


# -- reverse pass ----------------------------------------------------------------


def _toposort(root: Var) -> list[Var]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p is not None and p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Var, check_finite: bool = True) -> dict[str, np.ndarray]:
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every leaf requiring grad.

    Returns gradients of named leaves keyed by name.
    """
    if loss.value.size != 1:
        raise ValueError("backward needs a scalar loss")
    if not np.isfinite(loss.value).all():
        raise NonFiniteGradientError("loss is not finite")
    grads = {id(loss): np.ones_like(loss.value)}
    named = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if check_finite and not np.isfinite(g).all():
                raise NonFiniteGradientError(f"non-finite gradient for parameter {node.name!r}")
            node.grad = g if node.grad is None else node.grad + g
            if node.name is not None:
                named[node.name] = node.grad
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if parent is None or not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    return named


def zero_grad(params) -> None:
    for p in _iter_params(params):
        p.grad = None


def _iter_params(params):
    if isinstance(params, dict):
        return list(params.values())
    return list(params)


# -- gradient checking ------------------------------------------------------------


@dataclass
class GradReport:
    """Max elementwise relative error of analytic vs central-difference gradients."""

    errors: dict[str, float]
    fd_step: float
    dtype: str
    tolerance: float
    checked: dict[str, int] = field(default_factory=dict)
    floor: float = 1e-6

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    @property
    def failures(self) -> dict[str, float]:
        return {k: v for k, v in self.errors.items() if v > self.tolerance}


def grad_check(fn, params, fd_step: float = 1e-5, tolerance: float = 1e-5,
               max_coords: int | None = None, floor: float | str = 1e-6, rng=None) -> GradReport:
    """Compare reverse-mode gradients of ``fn()`` against central differences.

    ``fn`` takes no arguments and returns a scalar :class:`Var` computed from the
    current values of ``params`` (a dict name -> Var, or a list). Each entry's
    relative error is ``|a - n| / max(|a|, |n|, floor)``; ``max_coords`` caps the
    number of randomly chosen coordinates checked per parameter.

    ``floor="auto"`` raises the floor to the smallest gradient a central
    difference can resolve to ``tolerance``: round-off in the two loss
    evaluations is about ``eps * |loss| / fd_step``.
    """
    if isinstance(params, dict):
        named = dict(params)
    else:
        named = {(p.name or f"param{i}"): p for i, p in enumerate(params)}
    for p in named.values():
        p.grad = None
        p.requires_grad = True
    loss = fn()
    backward(loss)
    if floor == "auto":
        eps = float(np.finfo(loss.dtype).eps)
        floor = max(1e-6, eps * max(1.0, abs(float(loss.value))) / (fd_step * tolerance))
    gen = np.random.default_rng(0 if rng is None else rng)
    errors, checked = {}, {}
    dtype = None
    for name, p in named.items():
        dtype = p.dtype
        analytic = np.zeros_like(p.value) if p.grad is None else np.asarray(p.grad).reshape(p.shape)
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = np.sort(gen.choice(flat.size, max_coords, replace=False))
        worst = 0.0
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + fd_step
                up = float(fn().value)
                flat[i] = orig - fd_step
                down = float(fn().value)
                flat[i] = orig
                num = (up - down) / (2 * fd_step)
                a = float(analytic.reshape(-1)[i])
                err = abs(a - num) / max(abs(a), abs(num), floor)
                worst = max(worst, err)
        errors[name] = worst
        checked[name] = int(idx.size)
    return GradReport(errors, fd_step, str(dtype), tolerance, checked, floor)


# -- FLOP accounting -----------------------------------------------------------------


class _FlopCounter:
    active: list = []

    @classmethod
    def record(cls, x_shape, w_shape, out_shape):
        if cls.active:
            macs = int(np.prod(out_shape)) * int(np.prod(w_shape[1:]))
            for counter in cls.active:
                counter[0] += macs


@contextlib.contextmanager
def count_conv_macs():
    """Context yielding a one-element list that accumulates conv multiply-adds."""
    counter = [0]
    _FlopCounter.active.append(counter)
    try:
        yield counter
    finally:
        _FlopCounter.active.remove(counter)
