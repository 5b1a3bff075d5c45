"""Config-driven NF-ResNet, BN-ResNet and NF-RegNet builders."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as F
from .autodiff import Var
from .blocks import (BlockTap, BnBlock, BnBlockConfig, NfBlock, NfBlockConfig,
                     SignalCollapseError, VarianceLedger, normalize_ordering, validate_activation)
from .layers import Conv2d, Linear, Module, StandardizedConv
from .ops import ConvSpec
from .tensor import RngStream, as_rng, check_nhwc

MODEL_KINDS = ("nf-resnet", "bn-resnet", "nf-regnet")

# base widths, depths, image sizes and dropout for each NF-RegNet variant
REGNET_VARIANTS = {
    "B0": {"width": [48, 104, 208, 440], "depth": [1, 3, 6, 6],
           "train_imsize": 192, "test_imsize": 224, "weight_decay": 2e-5, "drop_rate": 0.2},
    "B1": {"width": [48, 104, 208, 440], "depth": [2, 4, 7, 7],
           "train_imsize": 240, "test_imsize": 256, "weight_decay": 2e-5, "drop_rate": 0.2},
    "B2": {"width": [56, 112, 232, 488], "depth": [2, 4, 8, 8],
           "train_imsize": 240, "test_imsize": 272, "weight_decay": 3e-5, "drop_rate": 0.3},
    "B3": {"width": [56, 128, 248, 528], "depth": [2, 5, 9, 9],
           "train_imsize": 288, "test_imsize": 320, "weight_decay": 4e-5, "drop_rate": 0.3},
    "B4": {"width": [64, 144, 288, 616], "depth": [2, 6, 11, 11],
           "train_imsize": 320, "test_imsize": 384, "weight_decay": 4e-5, "drop_rate": 0.4},
    "B5": {"width": [80, 168, 336, 704], "depth": [3, 7, 14, 14],
           "train_imsize": 384, "test_imsize": 456, "weight_decay": 5e-5, "drop_rate": 0.4},
}

# named ResNet depths -> blocks per stage (bottleneck: depth = 3 * blocks + 2)
RESNET_DEPTHS = {
    26: [2, 2, 2, 2],
    50: [3, 4, 6, 3],
    101: [3, 4, 23, 3],
    152: [3, 8, 36, 3],
    200: [3, 24, 36, 3],
    288: [24, 24, 24, 24],
}
RESNET_WIDTHS = [256, 512, 1024, 2048]


def _variant_key(variant: str) -> str:
    key = str(variant).upper().replace("NF-REGNET-", "")
    if key not in REGNET_VARIANTS:
        raise ValueError(f"unknown NF-RegNet variant {variant!r}; expected one of {list(REGNET_VARIANTS)}")
    return key


@dataclass
class ModelConfig:
    """Everything needed to rebuild a model; serializes to JSON."""

    model: str = "nf-resnet"
    variant: str = "custom"
    stage_widths: list[int] = field(default_factory=lambda: list(RESNET_WIDTHS))
    stage_depths: list[int] = field(default_factory=lambda: list(RESNET_DEPTHS[50]))
    alpha: float = 0.2
    width_scale: float = 1.0
    activation: str = "relu"
    use_scaled_ws: bool = True
    ordering: str | None = None
    seed: int = 0
    num_classes: int = 10
    in_channels: int = 3
    stem_width: int | None = None
    stem_stride: int = 2
    bottleneck_ratio: float = 0.25
    expansion: float = 2.25
    group_size: int | None = 8
    se_ratio: float = 0.5
    stochdepth_rate: float = 0.0
    drop_rate: float = 0.0
    dtype: str = "single"

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"unknown model {self.model!r}; expected one of {MODEL_KINDS}")
        if len(self.stage_widths) != len(self.stage_depths) or not self.stage_depths:
            raise ValueError("stage_widths and stage_depths must be non-empty and equal length")
        if any(d < 1 for d in self.stage_depths) or any(w < 1 for w in self.stage_widths):
            raise ValueError("stage widths and depths must be positive")
        if self.width_scale <= 0:
            raise ValueError("width_scale must be positive")
        self.activation = validate_activation(self.activation)
        if self.model == "bn-resnet":
            self.ordering = normalize_ordering(self.ordering or "bn_relu_conv")

    @property
    def num_blocks(self) -> int:
        return int(sum(self.stage_depths))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def nf_regnet_config(variant: str = "B0", width_scale: float = 1.0, seed: int = 0, *,
                     width: float = 0.75, **overrides) -> ModelConfig:
    """Resolved NF-RegNet config; widths are ``floor(floor(base * width) * width_scale)``."""
    key = _variant_key(variant)
    table = REGNET_VARIANTS[key]
    widths = [max(1, int(int(w * width) * width_scale)) for w in table["width"]]
    group_size = overrides.pop("group_size", 8)
    if group_size is not None:
        group_size = max(1, int(group_size * width_scale))
    params = dict(model="nf-regnet", variant=key, stage_widths=widths,
                  stage_depths=list(table["depth"]), alpha=0.2, width_scale=width_scale,
                  activation="silu", seed=seed, group_size=group_size,
                  stochdepth_rate=0.1, drop_rate=table["drop_rate"], num_classes=1000)
    params.update(overrides)
    return ModelConfig(**params)


def resnet_config(depth: int | None = 50, width_scale: float = 1.0, *, model: str = "nf-resnet",
                  stage_depths=None, stage_widths=None, **overrides) -> ModelConfig:
    if stage_depths is None:
        if depth not in RESNET_DEPTHS:
            raise ValueError(f"no layout for depth {depth}; pass stage_depths")
        stage_depths = RESNET_DEPTHS[depth]
    if stage_widths is None:
        stage_widths = [max(1, int(w * width_scale)) for w in RESNET_WIDTHS[: len(stage_depths)]]
    return ModelConfig(model=model, stage_widths=list(stage_widths),
                       stage_depths=list(stage_depths), width_scale=width_scale, **overrides)


class Model(Module):
    """Stem, residual body, optional expansion conv and a zero-initialized classifier."""

    def __init__(self, config: ModelConfig, stem, blocks, block_stages, final_conv,
                 classifier, ledger: VarianceLedger | None):
        self.config = config
        self.stem = stem
        self.blocks = list(blocks)
        self.block_stages = list(block_stages)
        self.final_conv = final_conv
        self.classifier = classifier
        self.ledger = ledger
        self.name_parameters()

    @property
    def kind(self) -> str:
        return self.config.model

    @property
    def is_nf(self) -> bool:
        return self.kind != "bn-resnet"

    def parameters(self) -> dict[str, Var]:
        return self.named_parameters()

    def convs(self):
        return [m for m in self.modules() if isinstance(m, Conv2d)]

    def forward(self, x, mode: str = "eval", rng=None, collect_taps: bool = True):
        return model_forward(self, x, mode, rng, collect_taps)

    __call__ = forward


def _stride_for(stage: int, block: int, first_stage_stride: int) -> int:
    if block != 0:
        return 1
    return first_stage_stride if stage == 0 else 2


def _head(cfg, in_ch, rng, dtype):
    return Linear(in_ch, cfg.num_classes, dtype=dtype)


def _stem_width(cfg: ModelConfig) -> int:
    # ResNet convention: the stem is a quarter of the first stage's width
    return cfg.stem_width or max(1, cfg.stage_widths[0] // 4)


def _stem(cfg: ModelConfig, out_ch: int, rng, dtype):
    spec = ConvSpec(cfg.in_channels, out_ch, 3, cfg.stem_stride, 1)
    if cfg.model != "bn-resnet" and cfg.use_scaled_ws:
        return StandardizedConv(spec, rng, dtype=dtype)
    # input is a raw (unrectified) signal
    return Conv2d(spec, rng, bias=cfg.model != "bn-resnet", init_gain=1.0, dtype=dtype,
                  exempt="He-init stem" if cfg.model != "bn-resnet" else "batchnorm reference")


def _stoch_rates(cfg: ModelConfig) -> list[float]:
    n = cfg.num_blocks
    if n == 1:
        return [0.0]
    return [cfg.stochdepth_rate * i / (n - 1) for i in range(n)]


def build_nf_resnet(cfg: ModelConfig, seed: int | None = None) -> Model:
    """Pre-activation NF bottleneck ResNet; transitions use a strided 1x1 shortcut."""
    cfg = dataclasses.replace(cfg, model="nf-resnet", seed=cfg.seed if seed is None else seed)
    rng = RngStream(cfg.seed)
    stem_w = _stem_width(cfg)
    stem = _stem(cfg, stem_w, rng, cfg.dtype)
    ledger = VarianceLedger(cfg.alpha)
    rates = _stoch_rates(cfg)
    blocks, stages = [], []
    in_ch = stem_w
    for s, (width, depth) in enumerate(zip(cfg.stage_widths, cfg.stage_depths)):
        for b in range(depth):
            stride = _stride_for(s, b, 1)
            beta = ledger.advance(stride > 1 or in_ch != width)
            bcfg = NfBlockConfig(in_ch, width, max(1, int(width * cfg.bottleneck_ratio)),
                                 groups=1, stride=stride, alpha=cfg.alpha, beta=beta,
                                 activation=cfg.activation, stochdepth_rate=rates[len(blocks)],
                                 pool_shortcut=False, scaled_ws=cfg.use_scaled_ws)
            blocks.append(NfBlock(bcfg, rng, cfg.dtype))
            stages.append(s)
            in_ch = width
    return Model(cfg, stem, blocks, stages, None, _head(cfg, in_ch, rng, cfg.dtype), ledger)


def build_bn_resnet(cfg: ModelConfig, ordering: str | None = None, seed: int | None = None) -> Model:
    ordering = normalize_ordering(ordering or cfg.ordering or "bn_relu_conv")
    cfg = dataclasses.replace(cfg, model="bn-resnet", ordering=ordering,
                              seed=cfg.seed if seed is None else seed)
    rng = RngStream(cfg.seed)
    stem_w = _stem_width(cfg)
    stem = _stem(cfg, stem_w, rng, cfg.dtype)
    blocks, stages = [], []
    in_ch = stem_w
    for s, (width, depth) in enumerate(zip(cfg.stage_widths, cfg.stage_depths)):
        for b in range(depth):
            stride = _stride_for(s, b, 1)
            bcfg = BnBlockConfig(in_ch, width, max(1, int(width * cfg.bottleneck_ratio)),
                                 stride=stride, ordering=ordering)
            blocks.append(BnBlock(bcfg, rng, cfg.dtype))
            stages.append(s)
            in_ch = width
    return Model(cfg, stem, blocks, stages, None, _head(cfg, in_ch, rng, cfg.dtype), None)


def build_nf_regnet(variant: str | ModelConfig = "B0", width_scale: float = 1.0,
                    seed: int = 0, **overrides) -> Model:
    """NF-RegNet: inverted grouped bottlenecks, corrected S+E, avg-pool transitions."""
    if isinstance(variant, ModelConfig):
        cfg = dataclasses.replace(variant, model="nf-regnet")
    else:
        cfg = nf_regnet_config(variant, width_scale, seed, **overrides)
    rng = RngStream(cfg.seed)
    in_ch = cfg.stage_widths[0]
    stem = _stem(cfg, in_ch, rng, cfg.dtype)
    ledger = VarianceLedger(cfg.alpha)
    rates = _stoch_rates(cfg)
    blocks, stages = [], []
    for s, (block_w, depth) in enumerate(zip(cfg.stage_widths, cfg.stage_depths)):
        for b in range(depth):
            expand = cfg.expansion if blocks else 1.0
            width = int(in_ch * expand)
            if cfg.group_size is None:
                groups = 1
            else:
                groups = max(1, width // cfg.group_size)
                width = cfg.group_size * groups
            stride = 2 if b == 0 else 1
            beta = ledger.advance(stride > 1 or in_ch != block_w)
            bcfg = NfBlockConfig(in_ch, block_w, width, groups=groups, stride=stride,
                                 alpha=cfg.alpha, beta=beta, activation=cfg.activation,
                                 se_hidden=max(1, int(width * cfg.se_ratio)),
                                 stochdepth_rate=rates[len(blocks)], pool_shortcut=True,
                                 scaled_ws=cfg.use_scaled_ws)
            blocks.append(NfBlock(bcfg, rng, cfg.dtype))
            stages.append(s)
            in_ch = block_w
    final_ch = int(1280 * in_ch // 440)
    if cfg.use_scaled_ws:
        final_conv = StandardizedConv(ConvSpec(in_ch, final_ch, 1), rng, dtype=cfg.dtype)
    else:
        final_conv = Conv2d(ConvSpec(in_ch, final_ch, 1), rng, dtype=cfg.dtype,
                            exempt="scaled WS disabled")
    return Model(cfg, stem, blocks, stages, final_conv, _head(cfg, final_ch, rng, cfg.dtype), ledger)


def build_model(cfg: ModelConfig) -> Model:
    if cfg.model == "nf-regnet":
        if cfg.variant != "custom":
            base = nf_regnet_config(cfg.variant, cfg.width_scale, cfg.seed)
            if (base.stage_widths, base.stage_depths) != (cfg.stage_widths, cfg.stage_depths):
                cfg = dataclasses.replace(cfg, variant="custom")
        return build_nf_regnet(cfg)
    if cfg.model == "bn-resnet":
        return build_bn_resnet(cfg)
    return build_nf_resnet(cfg)


def model_forward(model: Model, x, mode: str = "eval", rng=None, collect_taps: bool = True):
    """Return ``(logits, taps)`` with one :class:`BlockTap` per residual block."""
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    if not isinstance(x, Var):
        x = Var(check_nhwc(x, dtype=model.stem.weight.dtype))
    if x.shape[3] != model.config.in_channels:
        raise ValueError(f"expected {model.config.in_channels} input channels, got {x.shape[3]}")
    rng = as_rng(rng) if mode == "train" else None
    cfg = model.config
    out = model.stem(x)
    taps = []
    for i, block in enumerate(model.blocks):
        try:
            tap = block(out, mode, rng, where=f"block {i}")
        except SignalCollapseError as err:
            raise SignalCollapseError(f"block {i}: {err}") from None
        if collect_taps:
            taps.append(tap)
        out = tap.block_out
    if model.final_conv is not None:
        out = model.final_conv(out)
    if model.is_nf:
        out = F.activation(out, cfg.activation, scaled=cfg.use_scaled_ws)
    else:
        out = F.activation(F.batch_norm(out), "relu")
    pooled = F.global_avg_pool(out)
    if mode == "train" and cfg.drop_rate > 0:
        keep = 1.0 - cfg.drop_rate
        mask = (rng.uniform(pooled.shape) < keep).astype(pooled.dtype) / pooled.dtype.type(keep)
        pooled = F.mul(pooled, mask)
    logits = model.classifier(pooled)
    if not np.isfinite(logits.value).all():
        raise SignalCollapseError("non-finite logits")
    return logits, taps


def force_skipinit_gains(model: Model, value: float = 1.0) -> Model:
    """Set every NF block's skipinit gain in place (analysis helper)."""
    for block in model.blocks:
        if isinstance(block, NfBlock):
            block.skipinit_gain.value[...] = value
    return model


def count_params(model: Model) -> int:
    return int(sum(p.value.size for p in model.parameters().values()))


def count_flops(model: Model, resolution: int = 224) -> int:
    """Convolution multiply-adds for one image at ``resolution``."""
    x = np.zeros((1, resolution, resolution, model.config.in_channels), dtype=model.stem.weight.dtype)
    with F.no_grad(), F.count_conv_macs() as macs:
        model_forward(model, x, collect_taps=False)
    return macs[0]


def unregistered_plain_convs(model: Model) -> list[Conv2d]:
    """Plain convs in an NF model that carry neither Scaled WS nor an exemption."""
    return [c for c in model.convs() if not c.standardized and c.exempt is None]
