"""Desk-scale training loop on a synthetic image classification task."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as F
from .blocks import SignalCollapseError
from .models import Model, ModelConfig, build_model, model_forward, resnet_config
from .spp import SppRecord, generate_spp
from .tensor import RngStream


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TaskConfig:
    n_classes: int = 4
    n_samples: int = 256
    resolution: int = 16
    batch_size: int = 64
    noise: float = 0.1
    seed: int = 0


def synthetic_task(n_classes: int = 4, n_samples: int = 64, resolution: int = 32,
                   seed: int = 0, noise: float = 0.1, channels: int = 3, dtype=np.float32):
    """Gaussian-blob images whose blob width encodes the class.

    Each image holds one blob at a random position with a random sign, plus
    light white noise, then standardized to unit variance. Labels are balanced
    exactly (``n_samples`` must be a multiple of ``n_classes``). Returns ``(x, y)`` with ``x`` in NHWC.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if n_samples % n_classes:
        raise ValueError("n_samples must be a multiple of n_classes")
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    rng = np.random.default_rng(seed)
    y = np.repeat(np.arange(n_classes), n_samples // n_classes)
    rng.shuffle(y)
    sigmas = np.linspace(0.06, 0.3, n_classes) * resolution
    grid = np.arange(resolution, dtype=np.float64)
    x = np.empty((n_samples, resolution, resolution, channels), dtype=np.float64)
    for i, label in enumerate(y):
        cy, cx = rng.uniform(0.25, 0.75, 2) * resolution
        s = sigmas[label]
        blob = np.exp(-((grid[:, None] - cy) ** 2 + (grid[None, :] - cx) ** 2) / (2 * s * s))
        sign = rng.choice([-1.0, 1.0])
        x[i] = sign * blob[..., None] + noise * rng.standard_normal((resolution, resolution, channels))
    x = (x - x.mean()) / x.std()
    return x.astype(dtype), y


class NesterovSGD:
    """Heavy-ball SGD with Nesterov lookahead: ``v = mu*v + g; w -= lr*(g + mu*v)``."""

    def __init__(self, params: dict, lr: float = 0.1, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        if lr < 0:
            raise ValueError("lr must be non-negative")
        if not 0 <= momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        self.params = dict(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self._velocity = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def step(self) -> None:
        mu = self.momentum
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = np.asarray(p.grad, dtype=p.dtype).reshape(p.shape)
            if self.weight_decay:
                g = g + self.weight_decay * p.value
            v = self._velocity[k]
            v *= mu
            v += g
            p.value -= (self.lr * (g + mu * v)).astype(p.dtype)

    def zero_grad(self) -> None:
        F.zero_grad(self.params)


def evaluate_loss(model: Model, x, y, batch_size: int = 64) -> float:
    total = 0.0
    with F.no_grad():
        for start in range(0, len(y), batch_size):
            xb, yb = x[start:start + batch_size], y[start:start + batch_size]
            logits, _ = model_forward(model, xb, mode="eval", collect_taps=False)
            total += float(F.softmax_cross_entropy(logits, yb).value) * len(yb)
    return total / len(y)


@dataclass
class TrainResult:
    losses: list[float]
    initial_loss: float
    final_loss: float
    spp: list[SppRecord] = field(default_factory=list)

    @property
    def halved(self) -> bool:
        return self.final_loss <= 0.5 * self.initial_loss


def fit_model(model: Model, x, y, steps: int, lr: float = 0.1, momentum: float = 0.9,
              batch_size: int = 64, seed: int = 0, log_every: int = 0) -> list[float]:
    """Minibatch Nesterov SGD on softmax cross-entropy. Returns per-step losses.

    Raises :class:`NonFiniteLossError` naming the step if the loss, the
    activations or the gradients stop being finite.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    y = np.asarray(y)
    batch_size = min(batch_size, len(y))
    opt = NesterovSGD(model.parameters(), lr, momentum)
    rng = RngStream(seed + 1)
    order = np.random.default_rng(seed + 2)
    losses = []
    perm, pos = order.permutation(len(y)), 0
    # divergence is detected explicitly below, so overflow warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(steps):
            if pos + batch_size > len(y):
                perm, pos = order.permutation(len(y)), 0
            idx = perm[pos:pos + batch_size]
            pos += batch_size
            opt.zero_grad()
            try:
                logits, _ = model_forward(model, x[idx], mode="train", rng=rng, collect_taps=False)
            except SignalCollapseError as err:
                raise NonFiniteLossError(f"step {step}: {err}") from None
            loss = F.softmax_cross_entropy(logits, y[idx])
            value = float(loss.value)
            if not math.isfinite(value):
                raise NonFiniteLossError(f"non-finite loss at step {step}")
            try:
                F.backward(loss)
            except F.NonFiniteGradientError as err:
                raise NonFiniteLossError(f"step {step}: {err}") from None
            opt.step()
            losses.append(value)
            if log_every and step % log_every == 0:
                print(f"step {step} loss {value:.4f}")
    return losses


def train_demo(model_cfg: ModelConfig, task: TaskConfig = TaskConfig(), steps: int = 500,
               lr: float = 0.1, momentum: float = 0.9, spp_batch=None,
               model: Model | None = None, log_every: int = 0) -> TrainResult:
    """Train ``model_cfg`` on :func:`synthetic_task` and report full-dataset losses.

    ``spp_batch`` (NHWC shape) triggers a post-training SPP.
    """
    if model_cfg.num_classes < task.n_classes:
        raise ValueError("model has fewer outputs than the task has classes")
    x, y = synthetic_task(task.n_classes, task.n_samples, task.resolution, task.seed, task.noise,
                          channels=model_cfg.in_channels)
    model = build_model(model_cfg) if model is None else model
    initial = evaluate_loss(model, x, y)
    losses = fit_model(model, x, y, steps, lr, momentum, task.batch_size, task.seed, log_every)
    final = evaluate_loss(model, x, y)
    if not math.isfinite(final):
        raise NonFiniteLossError("non-finite loss after training")
    spp = generate_spp(model, spp_batch, seed=task.seed) if spp_batch else []
    return TrainResult(losses, initial, final, spp)


def write_loss_csv(losses, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("step", "loss"))
        for i, v in enumerate(losses):
            writer.writerow((i, repr(float(v))))


def demo_model_config(seed: int = 0, n_classes: int = 4, **overrides) -> ModelConfig:
    """The 16-block NF-ResNet-50 layout at width scale 0.25 used for the training demo."""
    return resnet_config(50, 0.25, model="nf-resnet", seed=seed, num_classes=n_classes, **overrides)
