import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nfresnet import autodiff as F
from nfresnet.autodiff import Var
from nfresnet.blocks import (BnBlock, BnBlockConfig, NfBlock, NfBlockConfig, SignalCollapseError,
                             VarianceLedger, normalize_ordering, stochastic_depth_gate)
from nfresnet.tensor import avg_channel_variance, gaussian


def test_ledger_recurrence_and_reset():
    ledger = VarianceLedger(alpha=0.2)
    betas = [ledger.advance(t) for t in (True, False, False, True, False)]
    expected = [1.04, 1.08, 1.12, 1.04, 1.08]
    np.testing.assert_allclose([e.expected_var for e in ledger.history], expected)
    np.testing.assert_allclose(betas, [1.0, math.sqrt(1.04), math.sqrt(1.08), math.sqrt(1.12), math.sqrt(1.04)])


@settings(max_examples=30, deadline=None)
@given(alpha=st.floats(0.01, 2.0), n=st.integers(1, 40))
def test_ledger_grows_linearly_within_stage(alpha, n):
    ledger = VarianceLedger(alpha)
    ledger.advance(True)
    for _ in range(n - 1):
        ledger.advance(False)
    assert ledger.expected_var == pytest.approx(1 + n * alpha**2)


def test_stochastic_depth_gate():
    assert stochastic_depth_gate(0.5, "eval", 0) == 1.0
    gates = [stochastic_depth_gate(0.3, "train", np.random.default_rng(i).integers(1 << 30))
             for i in range(2000)]
    assert np.mean(gates) == pytest.approx(0.7, abs=0.03)
    assert set(gates) == {0.0, 1.0}
    with pytest.raises(ValueError):
        stochastic_depth_gate(1.0)


def _x(shape=(4, 8, 8, 16), seed=0):
    return Var(gaussian(shape, rng=seed, dtype="single"))


@pytest.mark.parametrize("pool", [False, True])
def test_block_is_identity_at_init_for_non_transition(pool):
    block = NfBlock(NfBlockConfig(16, 16, 8, groups=2, se_hidden=4, pool_shortcut=pool), rng=0)
    x = _x()
    tap = block(x)
    assert np.array_equal(tap.block_out.value, x.value)
    assert avg_channel_variance(tap.residual_out.value) > 0


def test_skipinit_gain_gradient_is_nonzero_at_zero():
    block = NfBlock(NfBlockConfig(16, 16, 8, activation="silu"), rng=0, dtype="double")
    x = Var(gaussian((2, 4, 4, 16), rng=1))
    r = np.random.default_rng(2).standard_normal(x.shape)
    F.backward(F.sum(F.mul(block(x).block_out, r)))
    assert abs(float(block.skipinit_gain.grad)) > 1e-3


def test_transition_block_uses_conv_shortcut():
    for pool in (False, True):
        block = NfBlock(NfBlockConfig(8, 16, 4, stride=2, pool_shortcut=pool), rng=0)
        assert block.cfg.is_transition and block.shortcut is not None
        assert block.shortcut.spec.stride == (1 if pool else 2)
        out = block(_x((2, 8, 8, 8))).block_out
        assert out.shape == (2, 4, 4, 16)


def test_scaled_branch_variance_near_one():
    block = NfBlock(NfBlockConfig(64, 64, 32), rng=0)
    tap = block(_x((8, 16, 16, 64)))
    assert avg_channel_variance(tap.residual_out.value) == pytest.approx(1.0, abs=0.15)


def test_he_mode_convs_are_exempt():
    block = NfBlock(NfBlockConfig(8, 16, 4, stride=2, scaled_ws=False), rng=0)
    convs = [block.conv1x1a, block.conv3x3, block.conv1x1b, block.shortcut]
    assert all(not c.standardized and c.exempt for c in convs)


def test_collapse_raises_with_location():
    block = NfBlock(NfBlockConfig(8, 8, 4), rng=0)
    block.conv3x3.weight.value[...] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(SignalCollapseError, match="conv3x3"):
        block(_x((1, 4, 4, 8)), where="block 3")


@pytest.mark.parametrize("ordering,lo,hi", [("bn-relu-conv", 0.55, 0.8), ("relu-bn-conv", 0.85, 1.15)])
def test_bn_block_residual_variance_by_ordering(ordering, lo, hi):
    block = BnBlock(BnBlockConfig(256, 256, 64, ordering=ordering), rng=0)
    tap = block(_x((8, 16, 16, 256)))
    assert lo < avg_channel_variance(tap.residual_out.value) < hi


def test_ordering_names():
    assert normalize_ordering("BN-ReLU-Conv") == "bn_relu_conv"
    with pytest.raises(ValueError):
        normalize_ordering("conv-bn-relu")
