"""Scaled Weight Standardization and nonlinearity gains.

The reparameterized weight is computed per output channel over its fan-in::

    W_hat = gain * (W - mean(W)) / sqrt(var(W) * fan_in + eps)

with the population variance. The nonlinearity gain ``gamma = 1 / sigma_g`` is
not folded into the weight; it lives in the scaled activations of
:mod:`nfresnet.ops`, so one convolution serves every activation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .ops import SIGMA_G, SIGMA_G_PROVENANCE, ActivationKind, activation, activation_kind
from .tensor import as_rng

DEFAULT_EPS = 1e-4


def _rows(w):
    w = np.asarray(w)
    return w.reshape(w.shape[0], -1)


def standardize_weight(weight, gain=None, eps: float = DEFAULT_EPS):
    """Scaled-WS weight for an ``(out_ch, ...)`` weight tensor.

    Rows with zero variance come out as zeros when ``eps > 0``; with ``eps == 0``
    such rows are also mapped to zero instead of dividing by zero.
    """
    weight = np.asarray(weight)
    rows = _rows(weight)
    fan_in = rows.shape[1]
    if fan_in < 2:
        raise ValueError("standardization needs fan_in >= 2")
    centered = rows - rows.mean(axis=1, keepdims=True)
    var = np.mean(centered * centered, axis=1, keepdims=True)
    denom = np.sqrt(var * fan_in + eps)
    # only exactly-zero rows are special; non-finite weights must stay non-finite
    zero = denom == 0
    with np.errstate(invalid="ignore"):
        out = np.where(zero, 0.0, centered / np.where(zero, 1.0, denom))
    if gain is not None:
        out = out * np.asarray(gain).reshape(-1, 1)
    return out.reshape(weight.shape).astype(weight.dtype, copy=False)


def standardize_weight_vjp(g, weight, gain=None, eps: float = DEFAULT_EPS):
    """Return ``(dweight, dgain)``; accounts for the dependence of mean and var on W."""
    weight = np.asarray(weight)
    rows = _rows(weight)
    fan_in = rows.shape[1]
    c = rows - rows.mean(axis=1, keepdims=True)
    var = np.mean(c * c, axis=1, keepdims=True)
    s = np.sqrt(var * fan_in + eps)
    u = c / s
    g = _rows(g)
    dgain = None
    if gain is not None:
        gain = np.asarray(gain).reshape(-1, 1)
        dgain = np.sum(g * u, axis=1)
        a = g * gain
    else:
        a = g
    dc = a / s - np.sum(a * c, axis=1, keepdims=True) * c / s**3
    dw = dc - dc.mean(axis=1, keepdims=True)
    return dw.reshape(weight.shape), dgain


@dataclass
class MomentPrediction:
    """Per-unit mean and variance of ``z = W g(x)`` for iid inputs."""

    mean: np.ndarray
    var: np.ndarray


def fixed_w_moments(W, mu_g: float, sigma_g: float) -> MomentPrediction:
    """``E(z_i) = N mu_g mean_i`` and ``Var(z_i) = N sigma_g^2 (var_i + mean_i^2)``.

    Row statistics use the population variance.
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    n = W.shape[1]
    if n < 1:
        raise ValueError("W needs at least one column")
    mu_w = W.mean(axis=1)
    var_w = np.mean(W**2, axis=1) - mu_w**2
    return MomentPrediction(n * mu_g * mu_w, n * sigma_g**2 * (var_w + mu_w**2))


def activation_moments(kind, order: int = 200) -> tuple[float, float]:
    """Mean and std of ``g(x)`` for x ~ N(0, 1) by Gauss-Hermite quadrature.

    relu uses its closed form; the kink defeats polynomial quadrature.
    """
    kind = activation_kind(kind)
    if kind is ActivationKind.RELU:
        return float(1 / np.sqrt(2 * np.pi)), float(np.sqrt(0.5 * (1 - 1 / np.pi)))
    nodes, weights = np.polynomial.hermite_e.hermegauss(order)
    weights = weights / np.sqrt(2 * np.pi)
    y = activation(nodes, kind)
    mean = float(np.sum(weights * y))
    second = float(np.sum(weights * y * y))
    return mean, float(np.sqrt(second - mean**2))


def estimate_activation_std(kind, dim: int = 256, n_vectors: int = 1024, rng=None) -> float:
    """Square root of the mean per-vector variance of ``g(x)`` over unit-Gaussian vectors."""
    if dim < 2 or n_vectors < 1:
        raise ValueError("need dim >= 2 and n_vectors >= 1")
    x = as_rng(rng).normal((n_vectors, dim))
    y = activation(x, kind)
    return float(np.sqrt(np.mean(np.var(y, axis=1))))


def analytic_gamma(kind) -> float:
    kind = activation_kind(kind)
    if kind is ActivationKind.RELU:
        return float(np.sqrt(2.0) / np.sqrt(1.0 - 1.0 / np.pi))
    if kind is ActivationKind.IDENTITY:
        return 1.0
    raise ValueError(
        f"no closed-form gain registered for {kind.value}; use estimate_activation_std"
    )


def gain_registry(seed: int | None = None, n_vectors: int = 1024, dim: int = 256) -> dict:
    """Gain table as a JSON-ready dict. With ``seed`` every sigma is re-estimated."""
    table = {}
    for kind in ActivationKind:
        if seed is None:
            entry = {"sigma_g": SIGMA_G[kind], **SIGMA_G_PROVENANCE[kind.value]}
        else:
            entry = {"sigma_g": estimate_activation_std(kind, dim, n_vectors, seed),
                     "method": "estimated", "seed": seed, "n_vectors": n_vectors, "dim": dim}
        entry["gamma"] = 1.0 / entry["sigma_g"]
        table[kind.value] = entry
    return table


def dump_gain_registry(table: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_gain_registry(path) -> dict[str, float]:
    with open(path) as fh:
        table = json.load(fh)
    return {name: float(entry["sigma_g"]) for name, entry in table.items()}


@dataclass
class MomentCheck:
    """Monte Carlo moments of ``z = W g(x)`` against :func:`fixed_w_moments`."""

    predicted: MomentPrediction
    mc_mean: np.ndarray
    mc_var: np.ndarray
    z_mean: np.ndarray
    z_var: np.ndarray

    @property
    def max_z(self) -> float:
        return float(max(np.abs(self.z_mean).max(), np.abs(self.z_var).max()))


def check_moments(W, kind, n_samples: int = 100_000, rng=None) -> MomentCheck:
    """Z-scores of the sample mean and variance of each unit of ``W g(x)``.

    Standard errors come from the predicted variance (for the mean) and the
    sample fourth central moment (for the variance).
    """
    W = np.atleast_2d(np.asarray(W, dtype=np.float64))
    if n_samples < 2:
        raise ValueError("need n_samples >= 2")
    mu, sigma = activation_moments(kind)
    pred = fixed_w_moments(W, mu, sigma)
    x = as_rng(rng).normal((n_samples, W.shape[1]))
    z = activation(x, kind) @ W.T
    mc_mean = z.mean(axis=0)
    centered = z - mc_mean
    mc_var = np.mean(centered**2, axis=0)
    m4 = np.mean(centered**4, axis=0)
    se_mean = np.sqrt(pred.var / n_samples)
    se_var = np.sqrt(np.maximum(m4 - mc_var**2, 1e-300) / n_samples)
    return MomentCheck(pred, mc_mean, mc_var, (mc_mean - pred.mean) / se_mean,
                       (mc_var - pred.var) / se_var)
