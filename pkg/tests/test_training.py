import numpy as np
import pytest

from nfresnet import autodiff as F
from nfresnet.autodiff import Var
from nfresnet.models import ModelConfig, build_model
from nfresnet.training import (NesterovSGD, NonFiniteLossError, TaskConfig, demo_model_config,
                               synthetic_task, train_demo, write_loss_csv)

TINY = ModelConfig(model="nf-resnet", stage_widths=[8, 16], stage_depths=[1, 1], num_classes=4, seed=0)
TASK = TaskConfig(n_classes=4, n_samples=32, resolution=8, batch_size=16)


def test_synthetic_task_is_balanced_and_deterministic():
    x, y = synthetic_task(4, 64, 16, seed=3)
    x2, y2 = synthetic_task(4, 64, 16, seed=3)
    assert np.array_equal(x, x2) and np.array_equal(y, y2)
    assert np.bincount(y).tolist() == [16] * 4
    assert x.shape == (64, 16, 16, 3) and x.dtype == np.float32
    with pytest.raises(ValueError):
        synthetic_task(1, 10, 16)
    with pytest.raises(ValueError):
        synthetic_task(3, 10, 16)


def test_bias_only_classifier_is_at_chance():
    _, y = synthetic_task(4, 256, 16, seed=0)
    majority = np.bincount(y).max() / len(y)
    assert majority <= 0.25 + 1e-9


def test_pixel_level_linear_classifier_does_not_separate_classes():
    """Random sign and position defeat a linear model on raw pixels."""
    from sklearn.linear_model import LogisticRegression
    x, y = synthetic_task(4, 256, 16, seed=0)
    xt, yt = synthetic_task(4, 256, 16, seed=1)
    clf = LogisticRegression(max_iter=300).fit(x.reshape(256, -1), y)
    assert clf.score(xt.reshape(256, -1), yt) < 0.5


def test_nesterov_update_matches_formula():
    w = Var(np.array([1.0]), requires_grad=True)
    opt = NesterovSGD({"w": w}, lr=0.1, momentum=0.9)
    w.grad = np.array([2.0])
    opt.step()
    # v = 2, w = 1 - 0.1 * (2 + 0.9 * 2)
    assert w.value[0] == pytest.approx(1 - 0.1 * 3.8)
    w.grad = np.array([1.0])
    opt.step()
    # v = 0.9 * 2 + 1 = 2.8
    assert w.value[0] == pytest.approx(0.62 - 0.1 * (1 + 0.9 * 2.8))


def test_zero_lr_keeps_loss_constant():
    result = train_demo(TINY, TASK, steps=3, lr=0.0)
    assert result.final_loss == result.initial_loss == pytest.approx(np.log(4))


def test_identical_runs_give_identical_curves():
    a = train_demo(TINY, TASK, steps=5, lr=0.05)
    b = train_demo(TINY, TASK, steps=5, lr=0.05)
    assert a.losses == b.losses


def test_divergence_reports_step():
    with np.errstate(all="ignore"), pytest.raises(NonFiniteLossError, match="step"):
        train_demo(TINY, TASK, steps=50, lr=1e6)


def test_short_training_reduces_loss_and_produces_spp():
    result = train_demo(TINY, TASK, steps=30, lr=0.1, spp_batch=(2, 8, 8, 3))
    assert result.final_loss < result.initial_loss
    assert len(result.spp) == 2


def test_loss_csv(tmp_path):
    path = tmp_path / "loss.csv"
    write_loss_csv([1.5, 0.25], path)
    assert path.read_text().splitlines() == ["step,loss", "0,1.5", "1,0.25"]


def test_demo_model_has_sixteen_blocks():
    model = build_model(demo_model_config())
    assert len(model.blocks) == 16
    assert model.config.width_scale == 0.25


def test_model_must_cover_task_classes():
    with pytest.raises(ValueError):
        train_demo(ModelConfig(stage_widths=[8], stage_depths=[1], num_classes=2), TASK, steps=1)
