"""Cascade assembly, confidence-based early termination, and MAC accounting.

A cascade is a chain of trunk segments sharing one computation path, with a
branch classifier hanging off each segment's output. Inference walks the
components in order and stops at the first classifier whose top softmax
probability reaches that component's threshold.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import nn
from .nn import (Conv2D, FullyConnected, GlobalAvgPool, LayerSpec, ReLU,
                 ResidualBlock, ResidualBlockDown, BatchNorm, ShapeError,
                 chain_shape, forward_chain, softmax)

DISABLED = float("inf")  # threshold sentinel: delta <= 1 < inf, so it never fires


class SpecValidationError(ValueError):
    """CascadeSpec violates a structural invariant."""


@dataclass(frozen=True)
class ComponentSpec:
    """One cascade component: a trunk segment plus its branch classifier."""
    conv_layers: Tuple[LayerSpec, ...]
    classifier_layers: Tuple[LayerSpec, ...]


@dataclass(frozen=True)
class CascadeSpec:
    n_c: int
    input_shape: Tuple[int, int, int]
    components: Tuple[ComponentSpec, ...]
    blocks_per_module: int = 0

    @property
    def n_m(self) -> int:
        return len(self.components)

    def validate(self) -> None:
        """Check chaining and classifier invariants; raises SpecValidationError."""
        if self.n_c < 2:
            raise SpecValidationError(f"n_c must be >= 2, got {self.n_c}")
        if not self.components:
            raise SpecValidationError("cascade needs at least one component")
        shape = self.input_shape
        for m, comp in enumerate(self.components):
            try:
                trunk_out = chain_shape(comp.conv_layers, shape)
            except ShapeError as e:
                raise SpecValidationError(
                    f"component {m} trunk does not chain from input shape {shape}: {e}"
                ) from None
            try:
                cls_out = chain_shape(comp.classifier_layers, trunk_out)
            except ShapeError as e:
                raise SpecValidationError(
                    f"component {m} classifier does not chain from trunk output "
                    f"{trunk_out}: {e}") from None
            if not comp.classifier_layers or \
                    not isinstance(comp.classifier_layers[-1], FullyConnected):
                raise SpecValidationError(
                    f"component {m} classifier must end in a FullyConnected layer")
            if cls_out != (self.n_c,):
                raise SpecValidationError(
                    f"component {m} classifier outputs {cls_out}, expected ({self.n_c},)")
            shape = trunk_out

    def trunk_shapes(self) -> List[Tuple[int, ...]]:
        """Per-component trunk output shapes, input first excluded."""
        shapes = []
        shape = self.input_shape
        for comp in self.components:
            shape = chain_shape(comp.conv_layers, shape)
            shapes.append(shape)
        return shapes


@dataclass(frozen=True)
class ThresholdVector:
    """Per-component confidence thresholds; DISABLED means never exit here."""
    values: Tuple[float, ...]

    def __post_init__(self):
        if not self.values:
            raise ValueError("threshold vector must be non-empty")
        for i, v in enumerate(self.values):
            if v != DISABLED and not 0.0 <= v <= 1.0:
                raise ValueError(f"threshold {i} must be in [0, 1] or DISABLED, got {v}")
        if self.values[-1] != 0.0:
            raise ValueError(
                f"last component's threshold must be 0, got {self.values[-1]}")

    @staticmethod
    def zeros(n_m: int) -> "ThresholdVector":
        return ThresholdVector((0.0,) * n_m)

    @staticmethod
    def last_only(n_m: int) -> "ThresholdVector":
        """DISABLED everywhere except the mandatory 0 on the last component."""
        return ThresholdVector((DISABLED,) * (n_m - 1) + (0.0,))

    def fires(self, m: int, delta: float) -> bool:
        return delta >= self.values[m]


@dataclass(frozen=True)
class ClassifierOutput:
    logits: np.ndarray
    probabilities: np.ndarray
    out: int
    delta: float


@dataclass(frozen=True)
class InferenceTrace:
    predicted_class: int
    exit_component: int
    confidence: float
    macs_used: int
    per_component_outputs: Optional[Tuple[ClassifierOutput, ...]] = None


# ---------------------------------------------------------------------------
# MAC accounting
# ---------------------------------------------------------------------------

def layer_macs(spec: LayerSpec, in_shape: Tuple[int, ...]) -> int:
    """Multiply-accumulates of one layer's linear operations.

    Activations, pooling, batch norm and the residual elementwise additions
    cost zero; the stride-2 skip projection is a convolution and is counted.
    """
    if isinstance(spec, Conv2D):
        ho, wo = nn.conv_out_hw(in_shape[1], in_shape[2], spec.kernel_h,
                                spec.kernel_w, spec.stride, spec.padding)
        return ho * wo * spec.out_channels * spec.in_channels * spec.kernel_h * spec.kernel_w
    if isinstance(spec, FullyConnected):
        return spec.in_features * spec.out_features
    if isinstance(spec, ResidualBlock):
        c, h, w = in_shape
        return 2 * (h * w * c * c * 9)
    if isinstance(spec, ResidualBlockDown):
        ho, wo = nn.conv_out_hw(in_shape[1], in_shape[2], 3, 3, 2, 1)
        conv1 = ho * wo * spec.out_channels * spec.in_channels * 9
        conv2 = ho * wo * spec.out_channels * spec.out_channels * 9
        skip = ho * wo * spec.out_channels * spec.in_channels
        return conv1 + conv2 + skip
    return 0


def chain_macs(specs: Sequence[LayerSpec], in_shape: Tuple[int, ...]) -> int:
    total = 0
    shape = in_shape
    for spec in specs:
        total += layer_macs(spec, shape)
        shape = nn.output_shape(spec, shape)
    return total


@dataclass(frozen=True)
class MacTable:
    """Exact per-component MAC counts for one cascade spec.

    full_network_macs is the cost of the plain (non-cascaded) network: every
    trunk segment plus the final classifier only. An all-DISABLED cascade run
    additionally pays for the branch classifiers it consults en route, which
    is why its speedup sits slightly below 1.
    """
    trunk_macs: Tuple[int, ...]
    classifier_macs: Tuple[int, ...]

    def cumulative_macs(self, m: int) -> int:
        """MACs spent by a run exiting at component m (trunks and classifiers 0..m)."""
        return sum(self.trunk_macs[:m + 1]) + sum(self.classifier_macs[:m + 1])

    @property
    def full_network_macs(self) -> int:
        return sum(self.trunk_macs) + self.classifier_macs[-1]


def mac_table(spec: CascadeSpec) -> MacTable:
    spec.validate()
    trunk, cls = [], []
    shape = spec.input_shape
    for comp in spec.components:
        trunk.append(chain_macs(comp.conv_layers, shape))
        shape = chain_shape(comp.conv_layers, shape)
        cls.append(chain_macs(comp.classifier_layers, shape))
    return MacTable(tuple(trunk), tuple(cls))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

class CascadeModel:
    """A validated CascadeSpec plus its parameter tensors.

    Immutable by convention after training; eval-mode forwards are read-only
    and safe to run concurrently.
    """

    def __init__(self, spec: CascadeSpec, trunks: List[List[nn.Layer]],
                 classifiers: List[List[nn.Layer]]):
        self.spec = spec
        self.trunks = trunks
        self.classifiers = classifiers
        self._macs: Optional[MacTable] = None

    @property
    def n_m(self) -> int:
        return self.spec.n_m

    @property
    def n_c(self) -> int:
        return self.spec.n_c

    def mac_table(self) -> MacTable:
        if self._macs is None:
            self._macs = mac_table(self.spec)
        return self._macs

    def named_tensors(self) -> List[Tuple[str, np.ndarray]]:
        """Every parameter and state tensor in canonical order.

        Order: component index, trunk layers before the classifier, layer
        index, then tensor name alphabetically within the layer. Serialization
        and hashing both depend on this ordering.
        """
        out: List[Tuple[str, np.ndarray]] = []
        for m in range(self.n_m):
            for part, layers in (("trunk", self.trunks[m]), ("cls", self.classifiers[m])):
                for i, layer in enumerate(layers):
                    tensors = {**layer.parameters(), **layer.state_tensors()}
                    for name in sorted(tensors):
                        out.append((f"c{m}.{part}{i}.{name}", tensors[name]))
        return out

    def trunk_digest(self) -> str:
        """SHA-256 over all trunk tensors (parameters and running stats)."""
        return _digest(f"c{m}.trunk" for m in range(self.n_m))(self)

    def classifier_digest(self, m: int) -> str:
        return _digest([f"c{m}.cls"])(self)

    def model_digest(self) -> str:
        return _digest([""])(self)


def _digest(prefixes):
    prefixes = list(prefixes)

    def compute(model: CascadeModel) -> str:
        h = hashlib.sha256()
        for name, arr in model.named_tensors():
            if any(name.startswith(p) for p in prefixes):
                h.update(name.encode())
                h.update(str(arr.shape).encode())
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    return compute


def build_cascade(spec: CascadeSpec, seed: int) -> CascadeModel:
    """Validate the spec and He-initialize every component deterministically."""
    spec.validate()
    rng = np.random.default_rng(seed)
    trunks, classifiers = [], []
    for comp in spec.components:
        trunks.append(nn.init_layers(comp.conv_layers, rng))
        classifiers.append(nn.init_layers(comp.classifier_layers, rng))
    return CascadeModel(spec, trunks, classifiers)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def trunk_forward(model: CascadeModel, m: int, feats: np.ndarray, train: bool) -> np.ndarray:
    """Run component m's trunk segment on a batch of feature maps."""
    return forward_chain(model.trunks[m], feats, train, where=f"component {m} trunk")

def classifier_logits(model: CascadeModel, m: int, feats: np.ndarray, train: bool) -> np.ndarray:
    return forward_chain(model.classifiers[m], feats, train,
                         where=f"component {m} classifier")


def classifier_output_from_logits(z: np.ndarray) -> ClassifierOutput:
    s = softmax(z)
    out = int(np.argmax(s))  # ties break to the lowest class index
    return ClassifierOutput(logits=z, probabilities=s, out=out, delta=float(s[out]))


def component_forward(model: CascadeModel, m: int, feature_in: np.ndarray,
                      train: bool = False) -> Tuple[np.ndarray, ClassifierOutput]:
    """Single-input component step: trunk segment plus branch classifier.

    feature_in is component m-1's trunk output, or the standardized image for
    m = 0. Returns the feature map to feed component m+1 and the classifier's
    full output.
    """
    if not 0 <= m < model.n_m:
        raise IndexError(f"component {m} out of range [0, {model.n_m})")
    feats = feature_in[None]
    feat_out = trunk_forward(model, m, feats, train)
    z = classifier_logits(model, m, feat_out, train)
    return feat_out[0], classifier_output_from_logits(z[0])


def ci_infer(model: CascadeModel, thresholds: ThresholdVector, x: np.ndarray,
             record_outputs: bool = False) -> InferenceTrace:
    """Run the early-termination loop on one standardized input.

    Components are evaluated in order; the first whose confidence reaches its
    threshold supplies the prediction. The last threshold is always 0, so the
    loop is guaranteed to exit.
    """
    if x.shape != model.spec.input_shape:
        raise ShapeError(f"input shape {x.shape} != spec input {model.spec.input_shape}")
    if len(thresholds.values) != model.n_m:
        raise ValueError(f"{len(thresholds.values)} thresholds for {model.n_m} components")
    table = model.mac_table()
    feat = x
    recorded = []
    for m in range(model.n_m):
        feat, cls = component_forward(model, m, feat, train=False)
        if record_outputs:
            recorded.append(cls)
        if thresholds.fires(m, cls.delta):
            return InferenceTrace(
                predicted_class=cls.out, exit_component=m, confidence=cls.delta,
                macs_used=table.cumulative_macs(m),
                per_component_outputs=tuple(recorded) if record_outputs else None)
    # unreachable: the last threshold is 0 and delta >= 1/n_c > 0
    raise AssertionError("no component fired despite a zero final threshold")


def batch_infer(model: CascadeModel, thresholds: ThresholdVector,
                images: np.ndarray, batch_size: int = 256) -> List[InferenceTrace]:
    """Elementwise ci_infer over a (N, C, H, W) array, order preserved.

    Inputs are advanced through the cascade in batches, dropping rows as they
    exit. Per-row arithmetic is identical to single-input ci_infer calls.
    """
    if images.ndim != 4 or images.shape[1:] != model.spec.input_shape:
        raise ShapeError(f"batch shape {images.shape} != (N, *{model.spec.input_shape})")
    if len(thresholds.values) != model.n_m:
        raise ValueError(f"{len(thresholds.values)} thresholds for {model.n_m} components")
    table = model.mac_table()
    n = images.shape[0]
    traces: List[Optional[InferenceTrace]] = [None] * n
    for start in range(0, n, batch_size):
        feats = images[start:start + batch_size]
        alive = np.arange(feats.shape[0])
        for m in range(model.n_m):
            feats = trunk_forward(model, m, feats, train=False)
            z = classifier_logits(model, m, feats, train=False)
            probs = softmax(z, axis=1)
            preds = np.argmax(probs, axis=1)
            deltas = probs[np.arange(len(preds)), preds]
            fired = deltas >= thresholds.values[m]  # inf never fires, 0 always does
            for i in np.flatnonzero(fired):
                traces[start + alive[i]] = InferenceTrace(
                    predicted_class=int(preds[i]), exit_component=m,
                    confidence=float(deltas[i]), macs_used=table.cumulative_macs(m))
            keep = ~fired
            if not keep.any():
                break
            feats = feats[keep]
            alive = alive[keep]
    return traces  # type: ignore[return-value]


def cascade_logits(model: CascadeModel, images: np.ndarray, batch_size: int = 256,
                   up_to: Optional[int] = None) -> List[np.ndarray]:
    """Eval-mode logits of every classifier up to `up_to` over a whole set.

    The shared trunk is advanced once per batch and each branch classifier is
    applied to the feature map as it passes. Returns one (N, n_c) array per
    component; rows are bit-identical to single-input component_forward calls.
    """
    if images.ndim != 4 or images.shape[1:] != model.spec.input_shape:
        raise ShapeError(f"batch shape {images.shape} != (N, *{model.spec.input_shape})")
    last = model.n_m - 1 if up_to is None else up_to
    if not 0 <= last < model.n_m:
        raise IndexError(f"component {last} out of range [0, {model.n_m})")
    outs = [[] for _ in range(last + 1)]
    for start in range(0, images.shape[0], batch_size):
        feats = images[start:start + batch_size]
        for m in range(last + 1):
            feats = trunk_forward(model, m, feats, train=False)
            outs[m].append(classifier_logits(model, m, feats, train=False))
    empty = np.zeros((0, model.n_c), dtype=nn.DTYPE)
    return [np.concatenate(chunks) if chunks else empty for chunks in outs]


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------

PRESETS = {"mini": (8, 1), "small": (16, 2), "paper18": (32, 18)}


def preset_spec(name: str, input_shape: Tuple[int, int, int], n_c: int,
                enhanced: bool = True, batch_norm: bool = True) -> CascadeSpec:
    """Three-component cascade over three residual modules.

    Module widths run (w0, 2*w0, 4*w0); the first block of modules 2 and 3
    subsamples with stride 2. Branch classifiers sit after modules 1 and 2;
    when `enhanced`, each branch expands its feature map to 4*w0 channels with
    a 1x1 convolution before pooling.
    """
    if name not in PRESETS:
        raise SpecValidationError(f"unknown preset {name!r}; choices: {sorted(PRESETS)}")
    w0, blocks = PRESETS[name]
    return custom_spec(w0, blocks, input_shape, n_c, enhanced, batch_norm)


def custom_spec(w0: int, blocks_per_module: int, input_shape: Tuple[int, int, int],
                n_c: int, enhanced: bool = True, batch_norm: bool = True) -> CascadeSpec:
    c_in = input_shape[0]
    n = blocks_per_module
    w1, w2, w3 = w0, 2 * w0, 4 * w0

    def module(width: int, first_down_from: int | None) -> List[LayerSpec]:
        layers: List[LayerSpec] = []
        if first_down_from is None:
            layers.extend([ResidualBlock(width, batch_norm)] * n)
        else:
            layers.append(ResidualBlockDown(first_down_from, width, batch_norm))
            layers.extend([ResidualBlock(width, batch_norm)] * (n - 1))
        return layers

    def branch_head(width: int) -> Tuple[LayerSpec, ...]:
        if enhanced:
            return (Conv2D(width, w3, 1, 1), ReLU(), GlobalAvgPool(),
                    FullyConnected(w3, n_c))
        return (GlobalAvgPool(), FullyConnected(width, n_c))

    stem: List[LayerSpec] = [Conv2D(c_in, w1, 3, 3, stride=1, padding=1)]
    if batch_norm:
        stem.append(BatchNorm(w1))
    stem.append(ReLU())

    components = (
        ComponentSpec(tuple(stem + module(w1, None)), branch_head(w1)),
        ComponentSpec(tuple(module(w2, w1)), branch_head(w2)),
        ComponentSpec(tuple(module(w3, w2)),
                      (GlobalAvgPool(), FullyConnected(w3, n_c))),
    )
    return CascadeSpec(n_c=n_c, input_shape=tuple(input_shape),
                       components=components, blocks_per_module=n)
