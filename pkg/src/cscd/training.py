"""Backtrack training of a cascade.

Phase A optimizes every trunk segment together with the last classifier for
ceil(1.25 * n_e) epochs. Phase B then walks the branch classifiers in order,
training each alone for n_e epochs against the frozen trunk; the freeze is
enforced by hashing the untouched parameter groups around every branch phase.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from . import data as data_mod
from . import nn
from .cascade import CascadeModel, cascade_logits, classifier_logits, trunk_forward

EVAL_BATCH = 512


class NumericError(RuntimeError):
    """Training hit a non-finite loss; carries the epoch/batch diagnostics."""


class FreezeViolation(AssertionError):
    """A parameter group changed during a phase that must not touch it."""


@dataclass(frozen=True)
class TrainConfig:
    n_e: int
    batch_size: int = 64
    learning_rate: float = 0.1
    schedule: Tuple[Tuple[float, float], ...] = ((0.5, 0.1), (0.75, 0.01))
    momentum: float = 0.9
    seed: int = 0
    augment: bool = False
    l2_coefficient: float = 1e-4

    def __post_init__(self):
        if self.n_e < 1:
            raise ValueError(f"n_e must be >= 1, got {self.n_e}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.l2_coefficient < 0:
            raise ValueError(f"l2_coefficient must be >= 0, got {self.l2_coefficient}")
        prev = 0.0
        for frac, mult in self.schedule:
            if not prev < frac <= 1.0:
                raise ValueError(f"schedule fractions must increase strictly within "
                                 f"(0, 1], got {self.schedule}")
            if mult <= 0:
                raise ValueError(f"schedule multipliers must be > 0, got {mult}")
            prev = frac

    def lr_at(self, epoch: int, total_epochs: int) -> float:
        """Base rate scaled by the last schedule multiplier whose fraction is reached."""
        frac = epoch / total_epochs
        mult = 1.0
        for f, m in self.schedule:
            if frac >= f:
                mult = m
        return self.learning_rate * mult


def phase_a_epochs(n_e: int) -> int:
    return math.ceil(1.25 * n_e)


@dataclass(frozen=True)
class PhaseRecord:
    phase: str                       # "A" or "B:<m>"
    epochs: int
    losses: Tuple[float, ...]        # mean objective per epoch
    accuracies: Tuple[float, ...]    # training accuracy per epoch (batch running)
    trunk_digest: str                # hashes taken when the phase finished
    classifier_digests: Tuple[str, ...]


@dataclass(frozen=True)
class TrainReport:
    n_e: int
    phases: Tuple[PhaseRecord, ...]
    train_accuracy: Tuple[float, ...]          # per classifier, after all phases
    eval_accuracy: Optional[Tuple[float, ...]]
    wall_clock_seconds: float

    def summary_lines(self) -> List[str]:
        lines = [f"epochs: phase A={self.phases[0].epochs}, "
                 f"branch phases={[p.epochs for p in self.phases[1:]]}"]
        for m, acc in enumerate(self.train_accuracy):
            line = f"classifier {m}: train acc={acc:.4f}"
            if self.eval_accuracy is not None:
                line += f" eval acc={self.eval_accuracy[m]:.4f}"
            lines.append(line)
        lines.append(f"wall clock: {self.wall_clock_seconds:.1f}s")
        return lines


def _named_params(prefixed_layers) -> List[Tuple[str, np.ndarray]]:
    out = []
    for prefix, layer in prefixed_layers:
        for name in sorted(layer.parameters()):
            out.append((f"{prefix}.{name}", layer.parameters()[name]))
    return out


def _phase_a_layers(model: CascadeModel):
    layers = []
    for m in range(model.n_m):
        for i, layer in enumerate(model.trunks[m]):
            layers.append((f"c{m}.trunk{i}", layer))
    last = model.n_m - 1
    for i, layer in enumerate(model.classifiers[last]):
        layers.append((f"c{last}.cls{i}", layer))
    return layers


def _branch_layers(model: CascadeModel, m: int):
    return [(f"c{m}.cls{i}", layer) for i, layer in enumerate(model.classifiers[m])]


def _l2_weights(prefixed_layers) -> List[np.ndarray]:
    """Convolution and FC kernels among the trainable set; biases and batch
    norm are never decayed."""
    return [p for name, p in _named_params(prefixed_layers)
            if name.rsplit(".", 1)[-1] == "weight"]


def _collect_step(prefixed_layers):
    triples = []
    for prefix, layer in prefixed_layers:
        params = layer.parameters()
        grads = layer.gradients()
        for name in sorted(params):
            triples.append((f"{prefix}.{name}", params[name], grads[name]))
    return triples


def _phase_rng(seed: int, phase_index: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, phase_index, epoch])


def train_epoch(model: CascadeModel, m: int, dataset: data_mod.Dataset,
                cfg: TrainConfig, phase_index: int, epoch: int,
                optimizer: Optional[nn.SGD], lr: float,
                trunk_train: bool) -> Tuple[float, float]:
    """One full shuffled pass optimizing classifier m's objective.

    With trunk_train the loss propagates into every trunk segment (phase A);
    otherwise the trunk runs frozen in eval mode and only classifier m
    learns (branch phases). The shuffle and augmentation stream derive from
    (seed, phase, epoch) alone. Returns (mean objective, training accuracy).
    """
    rng = _phase_rng(cfg.seed, phase_index, epoch)
    order = rng.permutation(dataset.n)
    if trunk_train:
        trainable = _phase_a_layers(model)
    else:
        trainable = _branch_layers(model, m)
    l2_weights = _l2_weights(trainable)
    total_loss = 0.0
    total_correct = 0
    for batch_no, start in enumerate(range(0, dataset.n, cfg.batch_size)):
        idx = order[start:start + cfg.batch_size]
        images = dataset.images[idx]
        labels = dataset.labels[idx]
        if cfg.augment:
            images = data_mod.augment(images, rng)
        feats = images
        if trunk_train:
            for j in range(m + 1):
                feats = trunk_forward(model, j, feats, train=True)
        else:
            for j in range(m + 1):
                feats = trunk_forward(model, j, feats, train=False)
        logits = classifier_logits(model, m, feats, train=True)
        nll, dlogits = nn.softmax_cross_entropy(logits, labels)
        loss = nll + nn.l2_penalty(l2_weights, cfg.l2_coefficient)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss {loss} at phase index {phase_index} "
                               f"epoch {epoch} batch {batch_no}")
        total_loss += float(loss) * len(idx)
        total_correct += int((np.argmax(logits, axis=1) == labels).sum())
        dfeat = nn.backward_chain(model.classifiers[m], dlogits)
        if trunk_train:
            for j in range(m, -1, -1):
                dfeat = nn.backward_chain(model.trunks[j], dfeat)
        if optimizer is not None and lr > 0:
            optimizer.learning_rate = lr
            triples = _collect_step(trainable)
            if cfg.l2_coefficient > 0:
                decay = np.float32(2.0 * cfg.l2_coefficient)
                for key, param, grad in triples:
                    # gamma/beta tensors never carry the name "weight", so
                    # this decays exactly the conv and FC kernels
                    if key.rsplit(".", 1)[-1] == "weight":
                        grad += decay * param
            optimizer.step(triples)
    return total_loss / dataset.n, total_correct / dataset.n


def evaluate(model: CascadeModel, m: int, dataset: data_mod.Dataset,
             batch_size: int = EVAL_BATCH) -> float:
    """Eval-mode accuracy of classifier m alone."""
    logits = cascade_logits(model, dataset.images, batch_size, up_to=m)[m]
    return float((np.argmax(logits, axis=1) == dataset.labels).mean())


def evaluate_all(model: CascadeModel, dataset: data_mod.Dataset,
                 batch_size: int = EVAL_BATCH) -> Tuple[float, ...]:
    """Per-classifier accuracies sharing one trunk pass."""
    logits = cascade_logits(model, dataset.images, batch_size)
    return tuple(float((np.argmax(z, axis=1) == dataset.labels).mean())
                 for z in logits)


def ci_bt_train(model: CascadeModel, dataset: data_mod.Dataset, cfg: TrainConfig,
                eval_set: Optional[data_mod.Dataset] = None,
                log: Optional[Callable[[str], None]] = None,
                train_acc_limit: Optional[int] = None) -> Tuple[CascadeModel, TrainReport]:
    """Backtrack-train the cascade in place and report per-phase curves.

    Phase A trains all trunks plus the last classifier for ceil(1.25 * n_e)
    epochs; each branch classifier then trains alone for n_e epochs with the
    trunk frozen (batch norm in eval mode). Any drift in a frozen group
    raises FreezeViolation. train_acc_limit caps the number of training
    samples used for the final accuracy report.
    """
    if dataset.n == 0:
        raise ValueError("training dataset is empty")
    if dataset.labels.max() >= model.n_c:
        raise ValueError(f"label {dataset.labels.max()} out of range for "
                         f"n_c={model.n_c}")
    emit = log or (lambda line: None)
    t0 = time.perf_counter()
    phases: List[PhaseRecord] = []

    def run_phase(phase_name: str, phase_index: int, m: int, epochs: int,
                  trunk_train: bool) -> PhaseRecord:
        optimizer = nn.SGD(cfg.learning_rate, cfg.momentum) \
            if cfg.learning_rate > 0 else None
        losses, accs = [], []
        for epoch in range(epochs):
            lr = cfg.lr_at(epoch, epochs)
            loss, acc = train_epoch(model, m, dataset, cfg, phase_index, epoch,
                                    optimizer, lr, trunk_train)
            losses.append(loss)
            accs.append(acc)
            emit(f"phase={phase_name} epoch={epoch + 1} loss={loss:.6f} acc={acc:.4f}")
        return PhaseRecord(
            phase=phase_name, epochs=epochs, losses=tuple(losses),
            accuracies=tuple(accs), trunk_digest=model.trunk_digest(),
            classifier_digests=tuple(model.classifier_digest(j)
                                     for j in range(model.n_m)))

    last = model.n_m - 1
    phases.append(run_phase("A", 0, last, phase_a_epochs(cfg.n_e), trunk_train=True))

    frozen_trunk = phases[0].trunk_digest
    cls_digests = list(phases[0].classifier_digests)
    for m in range(model.n_m - 1):
        record = run_phase(f"B:{m}", m + 1, m, cfg.n_e, trunk_train=False)
        if record.trunk_digest != frozen_trunk:
            raise FreezeViolation(f"trunk parameters changed during branch phase {m}")
        for j in range(model.n_m):
            if j != m and record.classifier_digests[j] != cls_digests[j]:
                raise FreezeViolation(
                    f"classifier {j} changed during branch phase {m}")
        cls_digests[m] = record.classifier_digests[m]
        phases.append(record)

    if train_acc_limit is not None and dataset.n > train_acc_limit:
        acc_set = dataset.subset(np.arange(train_acc_limit))
    else:
        acc_set = dataset
    train_acc = evaluate_all(model, acc_set)
    eval_acc = evaluate_all(model, eval_set) if eval_set is not None else None
    report = TrainReport(
        n_e=cfg.n_e, phases=tuple(phases), train_accuracy=train_acc,
        eval_accuracy=eval_acc, wall_clock_seconds=time.perf_counter() - t0)
    return model, report
