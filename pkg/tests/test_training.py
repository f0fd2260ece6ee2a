"""Backtrack training: phase schedule, freezing, determinism, numerics."""

import math
import re

import numpy as np
import pytest

from cscd import cascade, nn, training
from cscd.cascade import CascadeSpec, ComponentSpec, build_cascade, preset_spec
from cscd.data import Dataset
from cscd.training import (FreezeViolation, NumericError, TrainConfig, TrainReport,
                           ci_bt_train, evaluate, phase_a_epochs)


def toy_dataset(n=50, seed=0):
    """Two linearly separable blobs as 1x4x4 images."""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = rng.normal(0, 0.3, size=(n, 1, 4, 4)).astype(np.float32)
    images += np.where(labels[:, None, None, None] == 0, -1.0, 1.0)
    return Dataset(images=images.astype(np.float32), labels=labels.astype(np.int64),
                   n_c=2, name="toy", split="train")


def one_component_spec():
    return CascadeSpec(
        n_c=2, input_shape=(1, 4, 4),
        components=(ComponentSpec((nn.Conv2D(1, 4, 3, 3, padding=1), nn.ReLU()),
                                  (nn.GlobalAvgPool(), nn.FullyConnected(4, 2))),))


# --- config and schedule -----------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(n_e=0)
    with pytest.raises(ValueError):
        TrainConfig(n_e=1, batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(n_e=1, learning_rate=-0.1)
    with pytest.raises(ValueError):
        TrainConfig(n_e=1, momentum=1.0)
    with pytest.raises(ValueError):  # fractions must increase
        TrainConfig(n_e=1, schedule=((0.75, 0.1), (0.5, 0.01)))
    with pytest.raises(ValueError):  # multipliers must be positive
        TrainConfig(n_e=1, schedule=((0.5, 0.0),))
    TrainConfig(n_e=1, learning_rate=0.0)  # lr 0 allowed: no-op training


def test_phase_a_epoch_counts():
    assert phase_a_epochs(4) == 5
    assert phase_a_epochs(160) == 200
    assert phase_a_epochs(1) == math.ceil(1.25)
    assert phase_a_epochs(3) == 4  # ceil(3.75)


def test_lr_schedule_milestones():
    cfg = TrainConfig(n_e=1, learning_rate=1.0,
                      schedule=((0.5, 0.1), (0.75, 0.01)))
    # 100-epoch phase: full rate until epoch 49, 0.1x until 74, then 0.01x
    assert cfg.lr_at(0, 100) == 1.0
    assert cfg.lr_at(49, 100) == 1.0
    assert cfg.lr_at(50, 100) == 0.1
    assert cfg.lr_at(74, 100) == 0.1
    assert cfg.lr_at(75, 100) == 0.01
    assert cfg.lr_at(99, 100) == 0.01


# --- train_epoch behavior ----------------------------------------------------

def test_lr_zero_leaves_parameters_unchanged():
    # batch-norm free so train-mode forwards carry no state updates either
    model = build_cascade(one_component_spec(), seed=0)
    data = toy_dataset()
    before = model.model_digest()
    cfg = TrainConfig(n_e=3, batch_size=10, learning_rate=0.0, seed=1)
    model, report = ci_bt_train(model, data, cfg)
    assert model.model_digest() == before
    # with nothing moving, every epoch loss is the evaluation loss; batch
    # composition only perturbs float32 accumulation, so compare to 1e-6
    logits = cascade.cascade_logits(model, data.images)[0]
    nll, _ = nn.softmax_cross_entropy(logits, data.labels)
    weights = [w for layers in (model.trunks[0], model.classifiers[0])
               for layer in layers for w in layer.weight_arrays()]
    eval_loss = nll + nn.l2_penalty(weights, cfg.l2_coefficient)
    for loss in report.phases[0].losses:
        assert abs(loss - eval_loss) < 1e-6


def test_same_seed_same_run():
    data = toy_dataset()
    outcomes = []
    for _ in range(2):
        model = build_cascade(one_component_spec(), seed=5)
        cfg = TrainConfig(n_e=2, batch_size=10, learning_rate=0.05, seed=9)
        model, report = ci_bt_train(model, data, cfg)
        outcomes.append((model.model_digest(), tuple(report.phases[0].losses)))
    assert outcomes[0] == outcomes[1]


def test_different_seed_different_run():
    data = toy_dataset()
    digests = []
    for seed in (1, 2):
        model = build_cascade(one_component_spec(), seed=5)
        cfg = TrainConfig(n_e=1, batch_size=10, learning_rate=0.05, seed=seed)
        model, _ = ci_bt_train(model, data, cfg)
        digests.append(model.model_digest())
    assert digests[0] != digests[1]


def test_separable_toy_reaches_full_accuracy():
    data = toy_dataset()
    model = build_cascade(one_component_spec(), seed=3)
    cfg = TrainConfig(n_e=16, batch_size=10, learning_rate=0.1, seed=3)
    model, report = ci_bt_train(model, data, cfg)
    # phase A epochs = ceil(1.25 * 16) = 20: within-20-epoch contract
    assert report.phases[0].epochs == 20
    assert evaluate(model, 0, data) == 1.0


def test_untrained_ten_class_accuracy_near_chance():
    rng = np.random.default_rng(11)
    images = rng.normal(size=(1000, 1, 8, 8)).astype(np.float32)
    labels = np.repeat(np.arange(10), 100).astype(np.int64)
    data = Dataset(images=images, labels=labels, n_c=10, name="noise", split="test")
    model = build_cascade(preset_spec("mini", (1, 8, 8), 10), seed=13)
    acc = evaluate(model, 2, data)
    assert abs(acc - 0.1) < 0.05


def test_empty_dataset_rejected():
    model = build_cascade(one_component_spec(), seed=0)
    empty = Dataset(images=np.zeros((0, 1, 4, 4), np.float32),
                    labels=np.zeros(0, np.int64), n_c=2, name="e", split="train")
    with pytest.raises(ValueError, match="empty"):
        ci_bt_train(model, empty, TrainConfig(n_e=1))


def test_nonfinite_loss_aborts_with_location():
    model = build_cascade(one_component_spec(), seed=0)
    data = toy_dataset()
    data.images[7, 0, 0, 0] = np.nan
    cfg = TrainConfig(n_e=1, batch_size=10, learning_rate=0.05, seed=0)
    with pytest.raises(NumericError, match=r"phase index 0 epoch 0 batch \d"):
        ci_bt_train(model, data, cfg)


# --- full backtrack run ------------------------------------------------------

def test_report_structure_and_freeze(digits_report):
    model, report = digits_report
    assert isinstance(report, TrainReport)
    assert [p.phase for p in report.phases] == ["A", "B:0", "B:1"]
    assert [p.epochs for p in report.phases] == [phase_a_epochs(1), 1, 1]
    # trunk digest settled in phase A and never moved in the branch phases
    assert report.phases[0].trunk_digest == report.phases[1].trunk_digest
    assert report.phases[1].trunk_digest == report.phases[2].trunk_digest
    assert report.phases[0].trunk_digest == model.trunk_digest()
    # the last classifier trained in phase A and stayed frozen through B
    assert (report.phases[0].classifier_digests[2]
            == report.phases[2].classifier_digests[2])
    # branch phase m rewrites only classifier m
    assert (report.phases[0].classifier_digests[1]
            != report.phases[2].classifier_digests[1])
    assert (report.phases[1].classifier_digests[1]
            == report.phases[0].classifier_digests[1])
    assert len(report.train_accuracy) == 3
    assert len(report.eval_accuracy) == 3
    assert report.wall_clock_seconds > 0


def test_training_log_format(digits_sets):
    train, _ = digits_sets
    small = train.subset(np.arange(64))
    model = build_cascade(preset_spec("mini", (1, 8, 8), 10), seed=2)
    lines = []
    cfg = TrainConfig(n_e=1, batch_size=32, learning_rate=0.05, seed=2)
    ci_bt_train(model, small, cfg, log=lines.append)
    phase_lines = [ln for ln in lines if ln.startswith("phase=")]
    assert len(phase_lines) == phase_a_epochs(1) + 1 + 1
    pat = re.compile(r"^phase=(A|B:\d+) epoch=\d+ loss=\d+\.\d{6} acc=0\.\d{4}$")
    for ln in phase_lines:
        assert pat.match(ln), ln
    assert phase_lines[0].startswith("phase=A epoch=1 ")
    assert phase_lines[-1].startswith("phase=B:1 epoch=1 ")


def test_freeze_violation_detected(digits_sets, monkeypatch):
    # sabotage: a branch phase that also nudges a trunk weight must be caught
    train, _ = digits_sets
    small = train.subset(np.arange(64))
    model = build_cascade(preset_spec("mini", (1, 8, 8), 10), seed=4)
    real = training.train_epoch

    def sabotaged(model, m, dataset, cfg, phase_index, epoch, optimizer, lr,
                  trunk_train):
        out = real(model, m, dataset, cfg, phase_index, epoch, optimizer, lr,
                   trunk_train)
        if not trunk_train:  # only corrupt branch phases
            model.trunks[0][0].weight[0, 0, 0, 0] += 1.0
        return out

    monkeypatch.setattr(training, "train_epoch", sabotaged)
    cfg = TrainConfig(n_e=1, batch_size=32, learning_rate=0.05, seed=4)
    with pytest.raises(FreezeViolation, match="trunk"):
        ci_bt_train(model, small, cfg)


def test_branch_phase_keeps_batchnorm_stats(digits_sets):
    # trunk batch norm runs in eval mode while branches train, so running
    # statistics are part of the frozen state
    train, _ = digits_sets
    small = train.subset(np.arange(96))
    model = build_cascade(preset_spec("mini", (1, 8, 8), 10), seed=6)
    cfg = TrainConfig(n_e=1, batch_size=32, learning_rate=0.05, seed=6)
    model, report = ci_bt_train(model, small, cfg)
    stats_after_a = None
    for name, arr in model.named_tensors():
        if "running" in name and name.startswith("c0.trunk"):
            stats_after_a = arr.copy()
            break
    # rerun phase B by hand: stats must not move
    before = model.trunk_digest()
    training.train_epoch(model, 0, small, cfg, phase_index=1, epoch=0,
                         optimizer=nn.SGD(0.05, cfg.momentum), lr=0.05,
                         trunk_train=False)
    assert model.trunk_digest() == before
    for name, arr in model.named_tensors():
        if "running" in name and name.startswith("c0.trunk"):
            np.testing.assert_array_equal(arr, stats_after_a)
            break
