"""scikit-learn style wrappers around the model, profiling and gain estimation code."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_is_fitted

from . import autodiff as F
from . import scaled_ws
from .models import ModelConfig, build_model, force_skipinit_gains, model_forward
from .ops import activation, activation_kind
from .spp import generate_spp
from .tensor import check_nhwc
from .training import demo_model_config, fit_model


def _resolve_config(config, **overrides) -> ModelConfig:
    if config is None:
        cfg = demo_model_config()
    elif isinstance(config, ModelConfig):
        cfg = config
    else:
        cfg = ModelConfig.from_dict(dict(config))
    if overrides:
        cfg = ModelConfig.from_dict({**cfg.to_dict(), **overrides})
    return cfg


class GainEstimator(BaseEstimator, TransformerMixin):
    """Estimate ``sigma_g`` for an activation on unit-Gaussian vectors.

    ``fit`` ignores its input; ``transform`` applies the gain-scaled activation.
    """

    def __init__(self, activation="relu", dim=256, n_vectors=1024, random_state=0):
        self.activation = activation
        self.dim = dim
        self.n_vectors = n_vectors
        self.random_state = random_state

    def fit(self, X=None, y=None):
        kind = activation_kind(self.activation)
        self.sigma_ = scaled_ws.estimate_activation_std(kind, self.dim, self.n_vectors,
                                                        self.random_state)
        self.gamma_ = 1.0 / self.sigma_
        return self

    def transform(self, X):
        check_is_fitted(self, "gamma_")
        X = np.asarray(X, dtype=np.float64)
        return activation(X, self.activation) * self.gamma_


class SignalPropagationProfiler(BaseEstimator, TransformerMixin):
    """Build a model at initialization and report per-block signal statistics.

    ``transform`` returns an ``(n_blocks, 3)`` array of average channel squared
    mean, average channel variance and residual-branch variance for ``X``.
    """

    def __init__(self, config=None, skipinit_gain=1.0, random_state=0):
        self.config = config
        self.skipinit_gain = skipinit_gain
        self.random_state = random_state

    def fit(self, X=None, y=None):
        cfg = _resolve_config(self.config, seed=int(self.random_state))
        self.model_ = build_model(cfg)
        if self.skipinit_gain is not None:
            force_skipinit_gains(self.model_, self.skipinit_gain)
        self.n_blocks_ = len(self.model_.blocks)
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_nhwc(X, dtype=self.model_.stem.weight.dtype)
        self.records_ = generate_spp(self.model_, x=X)
        return np.array([[r.avg_sq_mean, r.avg_var, r.residual_var] for r in self.records_])


class NFNetClassifier(BaseEstimator, ClassifierMixin):
    """Normalizer-free image classifier trained with Nesterov SGD.

    ``X`` is NHWC. ``config`` is a :class:`ModelConfig`, a dict, or None for the
    16-block demo network; its class count is overridden from ``y``.
    """

    def __init__(self, config=None, steps=100, lr=0.1, momentum=0.9, batch_size=64,
                 random_state=0):
        self.config = config
        self.steps = steps
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        y = np.asarray(y)
        check_classification_targets(y)
        if len(y) != len(X):
            raise ValueError("X and y have different lengths")
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        cfg = _resolve_config(self.config, num_classes=len(self.classes_),
                              seed=int(self.random_state))
        X = check_nhwc(X, dtype=cfg.dtype)
        cfg = _resolve_config(cfg, in_channels=X.shape[3])
        self.model_ = build_model(cfg)
        self.n_features_in_ = X.shape[3]
        self.loss_curve_ = fit_model(self.model_, X, codes,
                                     self.steps, self.lr, self.momentum, self.batch_size,
                                     int(self.random_state))
        return self

    def _logits(self, X, batch_size=64):
        check_is_fitted(self, "model_")
        X = check_nhwc(X, dtype=self.model_.stem.weight.dtype)
        out = []
        with F.no_grad():
            for start in range(0, len(X), batch_size):
                logits, _ = model_forward(self.model_, X[start:start + batch_size],
                                          collect_taps=False)
                out.append(logits.value)
        return np.concatenate(out).astype(np.float64)

    def predict_proba(self, X):
        z = self._logits(X)
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)

    def predict(self, X):
        logits = self._logits(X)
        return self.classes_[np.argmax(logits, axis=1)]
