"""NHWC tensors, seeded Gaussian streams and the channel statistics behind SPPs.

Tensors are plain ``numpy.ndarray`` objects laid out as ``(n, h, w, c)`` in
row-major order, with dtype ``float32`` ("single") or ``float64`` ("double").
"""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array

DTYPES = {"single": np.float32, "double": np.float64}


def resolve_dtype(dtype) -> np.dtype:
    if isinstance(dtype, str) and dtype in DTYPES:
        return np.dtype(DTYPES[dtype])
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dt}; expected float32 or float64")
    return dt


def check_nhwc(x, *, dtype=None, name: str = "x", allow_empty: bool = False) -> np.ndarray:
    """Validate a 4-d NHWC array and return it as a contiguous float array.

    Non-finite values are rejected, since every statistic downstream assumes
    finite data.
    """
    x = check_array(
        x,
        allow_nd=True,
        ensure_2d=False,
        dtype=[np.float64, np.float32] if dtype is None else resolve_dtype(dtype),
        ensure_min_samples=0 if allow_empty else 1,
        ensure_all_finite=True,
        input_name=name,
    )
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-d NHWC, got shape {x.shape}")
    if not allow_empty and x.size == 0:
        raise ValueError(f"{name} is empty (shape {x.shape})")
    return np.ascontiguousarray(x)


class RngStream:
    """Single-owner random stream.

    Backed by numpy's PCG64 bit generator; normal deviates come from numpy's
    ziggurat sampler, so a given seed reproduces the same sequence bit for bit
    on any platform running the same numpy major version.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self._seq = np.random.SeedSequence(self.seed)
        self.generator = np.random.Generator(np.random.PCG64(self._seq))

    def fork(self, key: int) -> "RngStream":
        """Child stream derived from ``(seed, key)``; independent of parent usage."""
        child = RngStream.__new__(RngStream)
        child.seed = self.seed
        child._seq = np.random.SeedSequence(self.seed, spawn_key=(int(key),))
        child.generator = np.random.Generator(np.random.PCG64(child._seq))
        return child

    def normal(self, shape, mean=0.0, std=1.0, dtype=np.float64) -> np.ndarray:
        dt = resolve_dtype(dtype)
        out = self.generator.standard_normal(size=tuple(shape), dtype=dt)
        if std != 1.0:
            out *= dt.type(std)
        if mean != 0.0:
            out += dt.type(mean)
        return out

    def uniform(self, size=None) -> np.ndarray | float:
        return self.generator.random(size)

    def __repr__(self):
        return f"RngStream(seed={self.seed})"


def as_rng(rng) -> RngStream:
    if isinstance(rng, RngStream):
        return rng
    if rng is None:
        return RngStream(0)
    return RngStream(int(rng))


def gaussian(shape, mean: float = 0.0, std: float = 1.0, rng=None, dtype="double") -> np.ndarray:
    """iid ``N(mean, std**2)`` tensor drawn from ``rng``."""
    shape = tuple(int(s) for s in shape)
    if std < 0:
        raise ValueError("std must be non-negative")
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise ValueError(f"shape dims must be >= 1, got {shape}")
    return as_rng(rng).normal(shape, mean, std, dtype)


def _channel_view(t) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim < 2:
        raise ValueError("expected at least a (samples, channels) array")
    if t.size == 0:
        raise ValueError("statistics of an empty tensor are undefined")
    return t.reshape(-1, t.shape[-1])


def channel_means(t) -> np.ndarray:
    return _channel_view(t).mean(axis=0, dtype=np.float64)


def avg_channel_sq_mean(t) -> float:
    """Mean over channels of the squared per-channel mean across N, H, W."""
    return float(np.mean(channel_means(t) ** 2))


def avg_channel_variance(t) -> float:
    """Mean over channels of the per-channel population variance across N, H, W."""
    flat = _channel_view(t)
    # two-pass in float64; ddof=0
    mu = flat.mean(axis=0, dtype=np.float64)
    var = np.mean((flat - mu) ** 2, axis=0, dtype=np.float64)
    return float(np.mean(var))
