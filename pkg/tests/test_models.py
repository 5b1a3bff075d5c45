import json

import numpy as np
import pytest

from nfresnet import autodiff as F
from nfresnet.blocks import SignalCollapseError
from nfresnet.models import (ModelConfig, build_bn_resnet, build_model, build_nf_regnet,
                             build_nf_resnet, count_flops, count_params, force_skipinit_gains,
                             model_forward, nf_regnet_config, resnet_config,
                             unregistered_plain_convs)
from nfresnet.tensor import gaussian


def small_nf(**kw):
    cfg = dict(model="nf-resnet", stage_widths=[16, 32], stage_depths=[2, 2], seed=0, num_classes=5)
    cfg.update(kw)
    return build_model(ModelConfig(**cfg))


def test_regnet_b0_resolved_widths_and_depths():
    cfg = nf_regnet_config("B0")
    assert cfg.stage_widths == [36, 78, 156, 330]
    assert cfg.stage_depths == [1, 3, 6, 6]
    assert cfg.activation == "silu"


def test_regnet_b0_parameter_count():
    model = build_nf_regnet("B0", seed=0)
    assert len(model.blocks) == 16
    assert model.final_conv.spec.out_ch == 960
    assert count_params(model) == pytest.approx(8.6e6, rel=0.01)


def test_regnet_variant_scaling_grows():
    depths = [sum(nf_regnet_config(v).stage_depths) for v in ("B0", "B1", "B2", "B3", "B4", "B5")]
    assert depths == sorted(depths) and len(set(depths)) == 6
    with pytest.raises(ValueError):
        nf_regnet_config("B9")


def test_resnet_layouts():
    assert resnet_config(50).stage_depths == [3, 4, 6, 3]
    assert sum(resnet_config(288).stage_depths) == 96
    assert resnet_config(50, 0.25).stage_widths == [64, 128, 256, 512]
    with pytest.raises(ValueError):
        resnet_config(34)


def test_config_json_round_trip(tmp_path):
    cfg = nf_regnet_config("B2", width_scale=0.5, seed=3)
    path = tmp_path / "cfg.json"
    cfg.to_json(path)
    assert ModelConfig.from_json(path) == cfg
    with pytest.raises(ValueError, match="unknown config keys"):
        ModelConfig.from_dict({**cfg.to_dict(), "bogus": 1})
    with pytest.raises(ValueError):
        ModelConfig(stage_widths=[8], stage_depths=[1, 1])
    assert json.loads(cfg.to_json())["variant"] == "B2"


@pytest.mark.parametrize("builder", ["nf-resnet", "nf-regnet"])
def test_identity_at_init_and_zero_logits(builder):
    if builder == "nf-regnet":
        model = build_nf_regnet("B0", width_scale=0.25, seed=1, num_classes=7)
        x = gaussian((2, 32, 32, 3), rng=0, dtype="single")
    else:
        model = small_nf()
        x = gaussian((2, 16, 16, 3), rng=0, dtype="single")
    logits, taps = model_forward(model, x)
    assert not logits.value.any()
    prev = None
    for block, tap in zip(model.blocks, taps):
        if not block.cfg.is_transition:
            assert np.array_equal(tap.block_out.value, prev)
        prev = tap.block_out.value


@pytest.mark.parametrize("ws", [True, False])
def test_every_plain_conv_in_nf_models_is_accounted_for(ws):
    for model in (small_nf(use_scaled_ws=ws),
                  build_nf_regnet("B0", width_scale=0.25, use_scaled_ws=ws)):
        assert unregistered_plain_convs(model) == []
        if ws:
            body = [c for b in model.blocks for c in (b.conv1x1a, b.conv3x3, b.conv1x1b)]
            assert all(c.standardized for c in body)


def test_bn_resnet_builds_and_runs():
    cfg = resnet_config(26, 0.125, model="bn-resnet", ordering="relu-bn-conv", num_classes=3)
    model = build_bn_resnet(cfg)
    logits, taps = model_forward(model, gaussian((2, 16, 16, 3), rng=0, dtype="single"))
    assert logits.shape == (2, 3) and len(taps) == 8
    assert model.ledger is None and not model.is_nf


def test_seed_determinism():
    a = small_nf(seed=4)
    b = small_nf(seed=4)
    c = small_nf(seed=5)
    pa, pb, pc = a.parameters(), b.parameters(), c.parameters()
    assert all(np.array_equal(pa[k].value, pb[k].value) for k in pa)
    assert not np.array_equal(pa["blocks.0.conv3x3.weight"].value, pc["blocks.0.conv3x3.weight"].value)


def test_collapse_reports_block_index():
    model = small_nf()
    force_skipinit_gains(model, 1.0)
    model.blocks[2].conv1x1a.bias.value[...] = np.inf
    with np.errstate(invalid="ignore"), pytest.raises(SignalCollapseError, match="block 2"):
        model_forward(model, gaussian((1, 8, 8, 3), rng=0, dtype="single"))


def test_input_channel_mismatch_rejected():
    with pytest.raises(ValueError, match="input channels"):
        model_forward(small_nf(), np.zeros((1, 8, 8, 4), dtype=np.float32))


def test_train_mode_is_stochastic_eval_is_not():
    model = small_nf(stochdepth_rate=0.5, drop_rate=0.5)
    force_skipinit_gains(model, 1.0)
    model.classifier.weight.value[...] = 1.0
    x = gaussian((2, 8, 8, 3), rng=0, dtype="single")
    e1, _ = model_forward(model, x)
    e2, _ = model_forward(model, x)
    assert np.array_equal(e1.value, e2.value)
    outs = {model_forward(model, x, "train", rng=s)[0].value.tobytes() for s in range(6)}
    assert len(outs) > 1


def test_ledger_threads_through_stages():
    model = small_nf(alpha=0.5)
    hist = model.ledger.history
    assert [h.is_transition for h in hist] == [True, False, True, False]
    assert [b.cfg.beta for b in model.blocks] == pytest.approx([1.0, np.sqrt(1.25), np.sqrt(1.5), np.sqrt(1.25)])


def test_flop_count_is_positive_and_scales_with_resolution():
    model = small_nf()
    assert count_flops(model, 16) == 4 * count_flops(model, 8)


def test_stem_width_and_stage_strides():
    model = small_nf()
    assert model.stem.spec.out_ch == 4
    assert [b.cfg.stride for b in model.blocks] == [1, 1, 2, 1]
    regnet = build_nf_regnet("B0", width_scale=0.25)
    assert [b.cfg.stride for b in regnet.blocks if b.cfg.stride > 1] == [2, 2, 2, 2]


def test_model_grads_flow_to_every_parameter():
    model = small_nf(dtype="double", activation="silu")
    force_skipinit_gains(model, 0.5)
    model.classifier.weight.value[...] = 0.1
    x = gaussian((2, 8, 8, 3), rng=0)
    logits, _ = model_forward(model, x, collect_taps=False)
    F.backward(F.softmax_cross_entropy(logits, np.array([0, 1])))
    missing = [k for k, p in model.parameters().items() if p.grad is None]
    assert missing == []
