import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from emoxnet.augment import AugmentPolicy
from emoxnet.dataio import Dataset, one_hot
from emoxnet.losses import SmoothingConfig, smooth_distribution
from emoxnet.models import (BackboneConfig, StudentConfig, build_backbone_classifier, count_parameters,
                            forward_ensemble)
from emoxnet.train import (NesterovSGD, TrainConfig, TrainingDiverged, TrainingMonitor, accuracy,
                           distillation_targets, distill, nesterov_step, run_training, scheduled_lr,
                           train_ensemble, write_history_csv)

TINY = BackboneConfig("plain_conv", (4, 8), (1, 1))


def tiny_model(seed=0):
    return build_backbone_classifier(TINY, head_hidden=0, seed=seed)


def quick_cfg(**kw):
    base = dict(epochs=2, batch_size=32, augment=False, lr0=0.01, decay=0.0)
    base.update(kw)
    return TrainConfig(**base)


def state_equal(a, b):
    return all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))


# ----------------------------------------------------------------- optimizer

def test_nesterov_two_step_trace():
    p, v = [0.0], [0.0]
    p, v = nesterov_step(p, [1.0], v, lr=0.1, momentum=0.9)
    assert abs(p[0] - (-0.19)) <= 1e-12
    p, v = nesterov_step(p, [1.0], v, lr=0.1, momentum=0.9)
    assert abs(p[0] - (-0.461)) <= 1e-12


def test_zero_momentum_is_plain_sgd(rng):
    p, g = rng.normal(size=5), rng.normal(size=5)
    (new,), _ = nesterov_step([p], [g], [np.zeros(5)], lr=0.3, momentum=0.0)
    np.testing.assert_array_equal(new, p - 0.3 * g)


@given(st.floats(-10, 10), st.floats(0, 1), st.floats(0, 0.99))
def test_zero_gradient_zero_velocity_is_fixed_point(p0, lr, mu):
    (p,), (v,) = nesterov_step([p0], [0.0], [0.0], lr, mu)
    assert p == p0 and v == 0.0


def test_nesterov_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        nesterov_step([np.zeros(3)], [np.zeros(2)], [np.zeros(3)], 0.1, 0.9)


def test_torch_optimizer_matches_scalar_trace():
    w = torch.zeros(1, requires_grad=True)
    opt = NesterovSGD([w], momentum=0.9)
    for expected in (-0.19, -0.461):
        w.grad = torch.ones(1)
        opt.step(0.1)
        assert abs(w.item() - expected) < 1e-6


def test_scheduled_lr():
    assert scheduled_lr(0.01, 1e-4, 10000) == 0.005
    assert scheduled_lr(0.01, 1e-4, 0) == 0.01
    with pytest.raises(ValueError):
        scheduled_lr(0.01, 1e-4, -1)


@given(st.floats(1e-4, 1), st.floats(0, 1e-2), st.integers(0, 10**6))
def test_scheduled_lr_is_monotone(lr0, decay, t):
    assert scheduled_lr(lr0, decay, t + 1) <= scheduled_lr(lr0, decay, t) <= lr0


def test_quadratic_objective_decreases():
    target = torch.tensor([3.0, -2.0])
    w = torch.zeros(2, requires_grad=True)
    opt = NesterovSGD([w], momentum=0.9)
    losses = []
    for _ in range(200):
        loss = ((w - target) ** 2).sum()
        losses.append(loss.item())
        opt.zero_grad()
        loss.backward()
        opt.step(0.01)
    assert losses[-1] < 1e-3 * losses[0]


# ------------------------------------------------------------------ monitor

def test_monitor_early_stop_by_hand():
    mon = TrainingMonitor(early_stop_patience=3, plateau_patience=100)
    events = [mon.update(e, v) for e, v in enumerate([0.5, 0.6, 0.6, 0.6, 0.6], start=1)]
    assert [("early_stop" in ev) for ev in events] == [False, False, False, False, True]
    assert mon.best_epoch == 2 and mon.best == 0.6


def test_monitor_plateau_by_hand():
    # improvements at 1 and 2; plateau counter hits 2 at epoch 4, resets, hits 2 again at 6
    mon = TrainingMonitor(early_stop_patience=100, plateau_patience=2, plateau_factor=0.5)
    seq = [0.5, 0.6, 0.55, 0.6, 0.59, 0.58, 0.7, 0.7]
    reduced = [e for e, v in enumerate(seq, start=1) if "reduce_lr" in mon.update(e, v)]
    assert reduced == [4, 6]
    assert mon.lr_scale == 0.25


def test_monitor_improvement_resets_counters():
    mon = TrainingMonitor(early_stop_patience=2, plateau_patience=2)
    for e, v in enumerate([0.1, 0.1, 0.2, 0.2, 0.3], start=1):
        assert "early_stop" not in mon.update(e, v)
    assert mon.best_epoch == 5


def scripted(values, log):
    def fn(model, epoch):
        log[epoch] = [p.detach().clone() for p in model.parameters()]
        return values[epoch - 1]
    return fn


def test_scripted_run_stops_and_restores(small_synthetic):
    values = [0.5, 0.6, 0.6, 0.6, 0.6, 0.9, 0.9]
    snapshots = {}
    model = tiny_model()
    cfg = quick_cfg(epochs=7, early_stop_patience=3, plateau_patience=2)
    result = run_training(model, small_synthetic, cfg, evaluate_fn=scripted(values, snapshots))
    assert result.stopped_early and len(result.history) == 5
    assert result.best_epoch == 2 and result.best_value == 0.6
    for p, q in zip(model.parameters(), snapshots[2]):
        assert torch.equal(p, q)
    lrs = [row["lr"] for row in result.history]
    assert lrs[:4] == [0.01] * 4 and lrs[4] == 0.005


def test_restored_weights_reproduce_best_metric(small_synthetic):
    model = tiny_model(1)
    result = run_training(model, small_synthetic, quick_cfg(epochs=4, lr0=0.05))
    best = max(row["val_accuracy"] for row in result.history)
    assert result.best_value == best
    assert accuracy(model, small_synthetic.split("val")) == best


# ----------------------------------------------------------------- training

def test_training_is_bit_reproducible(small_synthetic):
    cfg = quick_cfg(augment=True)
    a, b = tiny_model(), tiny_model()
    ra = run_training(a, small_synthetic, cfg)
    rb = run_training(b, small_synthetic, cfg)
    assert state_equal(a, b)
    assert ra.history == rb.history


def test_plain_sgd_scalar_example():
    (p,), _ = nesterov_step([1.0], [1.0], [0.0], lr=0.1, momentum=0.0)
    assert p == pytest.approx(0.9, abs=1e-15)


def test_lr_must_be_positive():
    with pytest.raises(ValueError, match="lr0"):
        quick_cfg(lr0=0.0)


def test_training_loss_decreases(small_synthetic):
    model = tiny_model()
    result = run_training(model, small_synthetic, quick_cfg(epochs=6, lr0=0.05, early_stop_patience=100))
    assert result.history[-1]["loss"] < result.history[0]["loss"]


def test_empty_split_rejected(small_synthetic):
    train_only = small_synthetic.subset(small_synthetic.splits == "train")
    with pytest.raises(ValueError, match="val split is empty"):
        run_training(tiny_model(), train_only, quick_cfg())


def test_non_finite_loss_raises(small_synthetic):
    model = tiny_model()
    with torch.no_grad():
        model.head[0].weight.fill_(float("nan"))
    with pytest.raises(TrainingDiverged, match="epoch 1, batch 0"):
        run_training(model, small_synthetic, quick_cfg())


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(momentum=1.0)
    with pytest.raises(ValueError):
        TrainConfig.from_dict({"lr": 0.1})
    cfg = TrainConfig()
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_history_csv(tmp_path, small_synthetic):
    result = run_training(tiny_model(), small_synthetic, quick_cfg())
    text = write_history_csv(result.history, tmp_path / "h.csv").read_text().splitlines()
    assert text[0] == "epoch,loss,val_accuracy,lr"
    assert len(text) == 3


# ------------------------------------------------------- ensemble / distill

def test_ensemble_keeps_backbones_frozen(small_synthetic):
    members = [tiny_model(0), tiny_model(1)]
    before = [m.backbones[0].state_dict() for m in members]
    before = [{k: v.clone() for k, v in sd.items()} for sd in before]
    model, results = train_ensemble(members, small_synthetic, quick_cfg(), head_hidden=16)
    for bb, sd in zip(model.backbones, before):
        for k, v in bb.state_dict().items():
            assert torch.equal(v, sd[k]), k
    assert model.head_input_dim == 16
    assert len(results) == 1


def test_ensemble_finetune_changes_backbones(small_synthetic):
    members = [tiny_model(0)]
    model, results = train_ensemble(members, small_synthetic, quick_cfg(epochs=1), head_hidden=0, finetune=True)
    assert len(results) == 2
    assert results[1].history[0]["lr"] == pytest.approx(0.001)
    assert not torch.equal(model.backbones[0].body[0][0].weight, members[0].backbones[0].body[0][0].weight)


def test_distillation_targets_are_smoothed_teacher(small_synthetic):
    teacher = tiny_model(2)
    x = small_synthetic.images[:6]
    targets = distillation_targets(teacher, x, 0.1)
    np.testing.assert_allclose(targets, smooth_distribution(forward_ensemble(teacher, x), SmoothingConfig(0.1)))
    assert (targets >= 0.1 / 7 - 1e-12).all()
    np.testing.assert_allclose(targets.sum(axis=1), 1.0)
    np.testing.assert_array_equal(distillation_targets(teacher, x, 0.0), forward_ensemble(teacher, x))


def test_distill_budget(small_synthetic):
    teacher = build_backbone_classifier(BackboneConfig("plain_conv", (64, 128), (1, 1)), seed=0)
    student, result = distill(teacher, small_synthetic, quick_cfg(epochs=1),
                              StudentConfig((4, 8), (1, 1)))
    assert count_parameters(student) <= 0.10 * count_parameters(teacher)
    assert student.name == "EmoXNetLite" and len(result.history) == 1
    with pytest.raises(ValueError, match="hard_weight"):
        distill(teacher, small_synthetic, quick_cfg(), hard_weight=2.0)
