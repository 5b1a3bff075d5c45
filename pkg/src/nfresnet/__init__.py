"""Normalizer-free residual networks in numpy: Scaled Weight Standardization,
signal propagation plots, a small reverse-mode autodiff engine and a CLI."""

from .autodiff import GradReport, Var, backward, grad_check, no_grad
from .blocks import (BnBlock, BnBlockConfig, NfBlock, NfBlockConfig, SignalCollapseError,
                     VarianceLedger)
from .estimators import GainEstimator, NFNetClassifier, SignalPropagationProfiler
from .models import (ModelConfig, build_bn_resnet, build_model, build_nf_regnet, build_nf_resnet,
                     model_forward, nf_regnet_config, resnet_config)
from .ops import ActivationKind, ConvSpec, ShapeError, activation, conv2d, sigma_g
from .scaled_ws import fixed_w_moments, standardize_weight
from .spp import SppRecord, emit, fit_stage_growth, generate_spp
from .tensor import RngStream, gaussian
from .training import TaskConfig, synthetic_task, train_demo

__version__ = "0.1.0"

__all__ = [
    "ActivationKind", "BnBlock", "BnBlockConfig", "ConvSpec", "GainEstimator", "GradReport",
    "ModelConfig", "NFNetClassifier", "SignalPropagationProfiler", "TaskConfig",
    "NfBlock", "NfBlockConfig", "RngStream", "ShapeError", "SignalCollapseError", "SppRecord",
    "Var", "VarianceLedger", "activation", "backward", "build_bn_resnet", "build_model",
    "build_nf_regnet", "build_nf_resnet", "conv2d", "emit", "fit_stage_growth",
    "fixed_w_moments", "gaussian", "generate_spp", "grad_check", "model_forward", "no_grad",
    "nf_regnet_config", "resnet_config", "sigma_g", "standardize_weight",
    "synthetic_task", "train_demo",
]
