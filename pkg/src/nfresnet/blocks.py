"""Residual blocks: normalizer-free bottlenecks and BatchNorm references.

NF blocks compute ``x + alpha * skipinit_gain * f(x / beta)`` where ``beta`` comes
from a :class:`VarianceLedger`, never from batch statistics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as F
from .autodiff import Var
from .layers import Conv2d, Module, SqueezeExcite, StandardizedConv
from .ops import ConvSpec, activation_kind, he_gain
from .tensor import as_rng


class SignalCollapseError(FloatingPointError):
    """Raised when activations stop being finite."""


def check_finite(t, where: str):
    value = t.value if isinstance(t, Var) else t
    if not np.isfinite(value).all():
        raise SignalCollapseError(f"non-finite activations at {where}")
    return t


# -- variance ledger ----------------------------------------------------------


@dataclass
class LedgerEntry:
    block_index: int
    beta: float
    expected_var: float  # predicted Var(x) at the block output
    is_transition: bool


@dataclass
class VarianceLedger:
    """Analytic running prediction of the signal variance through a residual stack."""

    alpha: float
    expected_var: float = 1.0
    history: list[LedgerEntry] = field(default_factory=list)

    def advance(self, is_transition: bool) -> float:
        if self.expected_var < 1.0:
            raise ValueError("expected variance dropped below 1")
        beta = math.sqrt(self.expected_var)
        if is_transition:
            self.expected_var = 1.0
        self.expected_var += self.alpha**2
        self.history.append(LedgerEntry(len(self.history), beta, self.expected_var, is_transition))
        return beta


def ledger_advance(ledger: VarianceLedger, is_transition: bool) -> float:
    return ledger.advance(is_transition)


# -- stochastic depth -------------------------------------------------------------


def stochastic_depth_gate(rate: float, mode: str = "eval", rng=None) -> float:
    """0.0 with probability ``rate`` in train mode, else 1.0. No keep-rate rescaling."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("stochastic depth rate must be in [0, 1)")
    if mode != "train" or rate == 0.0:
        return 1.0
    return 0.0 if as_rng(rng).uniform() < rate else 1.0


# -- NF block ------------------------------------------------------------------------


@dataclass(frozen=True)
class NfBlockConfig:
    in_ch: int
    out_ch: int
    width: int  # bottleneck width of the 3x3 conv
    groups: int = 1
    stride: int = 1
    alpha: float = 0.2
    beta: float = 1.0
    activation: str = "relu"
    se_hidden: int = 0  # 0 disables squeeze-excite
    stochdepth_rate: float = 0.0
    pool_shortcut: bool = False  # avg-pool + 1x1 conv instead of a strided 1x1 conv
    scaled_ws: bool = True

    @property
    def is_transition(self) -> bool:
        return self.stride > 1 or self.in_ch != self.out_ch


@dataclass
class BlockTap:
    residual_out: Var
    block_out: Var


class NfBlock(Module):
    def __init__(self, cfg: NfBlockConfig, rng=None, dtype="single"):
        rng = as_rng(rng)
        self.cfg = cfg
        if cfg.scaled_ws:
            def conv(spec):
                return StandardizedConv(spec, rng, dtype=dtype)
        else:
            # plain He init; every conv here follows a rectifier
            gain = he_gain(cfg.activation)

            def conv(spec):
                return Conv2d(spec, rng, init_gain=gain, dtype=dtype,
                              exempt="scaled WS disabled")
        w = cfg.width
        self.conv1x1a = conv(ConvSpec(cfg.in_ch, w, 1))
        self.conv3x3 = conv(ConvSpec(w, w, 3, cfg.stride, 1, cfg.groups))
        self.se = None
        if cfg.se_hidden:
            self.se = SqueezeExcite(w, cfg.se_hidden, cfg.activation, rng,
                                    scaled=cfg.scaled_ws, corrected=True, dtype=dtype)
        self.conv1x1b = conv(ConvSpec(w, cfg.out_ch, 1))
        self.shortcut = None
        if cfg.is_transition:
            sc_stride = 1 if cfg.pool_shortcut else cfg.stride
            self.shortcut = conv(ConvSpec(cfg.in_ch, cfg.out_ch, 1, sc_stride))
        self.skipinit_gain = Var(np.zeros((), dtype=self.conv1x1a.weight.dtype), requires_grad=True)

    def _act(self, t):
        return F.activation(t, self.cfg.activation, scaled=self.cfg.scaled_ws)

    def __call__(self, x, mode: str = "eval", rng=None, where: str = "block") -> BlockTap:
        cfg = self.cfg
        out = F.scale(self._act(x), 1.0 / cfg.beta)
        if self.shortcut is not None:
            sc_in = out
            if cfg.pool_shortcut and cfg.stride > 1:
                sc_in = F.avg_pool2d(out, cfg.stride)
            shortcut = check_finite(self.shortcut(sc_in), f"{where}.shortcut")
        else:
            shortcut = x
        out = check_finite(self.conv1x1a(out), f"{where}.conv1x1a")
        out = check_finite(self.conv3x3(self._act(out)), f"{where}.conv3x3")
        if self.se is not None:
            out = check_finite(self.se(out), f"{where}.se")
        residual = check_finite(self.conv1x1b(self._act(out)), f"{where}.conv1x1b")
        gate = stochastic_depth_gate(cfg.stochdepth_rate, mode, rng)
        branch = F.scale(F.mul(residual, self.skipinit_gain), cfg.alpha * gate)
        return BlockTap(residual, check_finite(F.add(branch, shortcut), f"{where}.out"))


def nf_block_forward(x, block: NfBlock, mode: str = "eval", rng=None) -> BlockTap:
    return block(x, mode, rng)


# -- BatchNorm reference block -----------------------------------------------------------

ORDERINGS = ("bn_relu_conv", "relu_bn_conv")


def normalize_ordering(ordering: str) -> str:
    key = ordering.replace("-", "_").lower()
    if key not in ORDERINGS:
        raise ValueError(f"unknown ordering {ordering!r}; expected one of {ORDERINGS}")
    return key


@dataclass(frozen=True)
class BnBlockConfig:
    in_ch: int
    out_ch: int
    width: int
    stride: int = 1
    ordering: str = "bn_relu_conv"
    eps: float = 1e-5

    @property
    def is_transition(self) -> bool:
        return self.stride > 1 or self.in_ch != self.out_ch


class BnBlock(Module):
    """Pre-activation bottleneck with BatchNorm in batch-statistics mode.

    Convs are He-initialized for whatever feeds them: gain sqrt(2) after a
    rectifier (BN-ReLU-Conv) and gain 1 after BatchNorm (ReLU-BN-Conv).
    """

    def __init__(self, cfg: BnBlockConfig, rng=None, dtype="single"):
        rng = as_rng(rng)
        self.cfg = cfg
        self.ordering = normalize_ordering(cfg.ordering)
        gain = he_gain("relu") if self.ordering == "bn_relu_conv" else 1.0

        def conv(spec):
            return Conv2d(spec, rng, bias=False, init_gain=gain, dtype=dtype,
                          exempt="batchnorm reference")
        w = cfg.width
        self.conv1 = conv(ConvSpec(cfg.in_ch, w, 1))
        self.conv2 = conv(ConvSpec(w, w, 3, cfg.stride, 1))
        self.conv3 = conv(ConvSpec(w, cfg.out_ch, 1))
        self.shortcut = conv(ConvSpec(cfg.in_ch, cfg.out_ch, 1, cfg.stride)) if cfg.is_transition else None

    def _pre(self, t):
        if self.ordering == "bn_relu_conv":
            return F.activation(F.batch_norm(t, self.cfg.eps), "relu")
        return F.batch_norm(F.activation(t, "relu"), self.cfg.eps)

    def __call__(self, x, mode: str = "eval", rng=None, where: str = "block") -> BlockTap:
        pre = self._pre(x)
        shortcut = x if self.shortcut is None else check_finite(self.shortcut(pre), f"{where}.shortcut")
        h = check_finite(self.conv1(pre), f"{where}.conv1")
        h = check_finite(self.conv2(self._pre(h)), f"{where}.conv2")
        residual = check_finite(self.conv3(self._pre(h)), f"{where}.conv3")
        return BlockTap(residual, check_finite(F.add(residual, shortcut), f"{where}.out"))


def bn_block_forward(x, block: BnBlock, mode: str = "eval", rng=None) -> BlockTap:
    return block(x, mode, rng)


def validate_activation(name: str) -> str:
    return activation_kind(name).value
