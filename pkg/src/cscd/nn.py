"""Minimal neural-network core: layer specs, forward/backward passes, loss, SGD.

Tensors are plain numpy float32 arrays in NCHW layout (row-major). Every layer
is a small class holding its own parameters and, after a train-mode forward,
the cache needed for backward. Nothing here knows about cascades; this module
is just the material the cascade components are built from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, Iterable, Sequence, Tuple, Union

import numpy as np

DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.9  # running <- 0.9*running + 0.1*batch


class ShapeError(ValueError):
    """Input/parameter shape does not match what a layer expects."""


class BackwardStateError(RuntimeError):
    """backward() called without a matching train-mode forward."""


# ---------------------------------------------------------------------------
# Layer specs (architecture description, no parameters)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class BatchNorm:
    channels: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class ResidualBlock:
    channels: int
    batch_norm: bool = True


@dataclass(frozen=True)
class ResidualBlockDown:
    """Residual block whose first conv subsamples with stride 2.

    The skip path is a 1x1 stride-2 convolution projecting in_channels to
    out_channels.
    """
    in_channels: int
    out_channels: int
    batch_norm: bool = True


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class FullyConnected:
    in_features: int
    out_features: int


LayerSpec = Union[Conv2D, BatchNorm, ReLU, ResidualBlock, ResidualBlockDown,
                  GlobalAvgPool, FullyConnected]


def conv_out_hw(h: int, w: int, kh: int, kw: int, stride: int, padding: int) -> Tuple[int, int]:
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"convolution reduces {h}x{w} below 1x1 "
                         f"(kernel {kh}x{kw}, stride {stride}, padding {padding})")
    return ho, wo


def output_shape(spec: LayerSpec, in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
    """Shape rule for a single layer, on a per-sample shape (no batch dim).

    Feature maps are (C, H, W); flat vectors are (F,). Raises ShapeError when
    in_shape is not consumable by the spec.
    """
    if isinstance(spec, Conv2D):
        _expect_chw(spec, in_shape, spec.in_channels)
        ho, wo = conv_out_hw(in_shape[1], in_shape[2], spec.kernel_h, spec.kernel_w,
                             spec.stride, spec.padding)
        return (spec.out_channels, ho, wo)
    if isinstance(spec, BatchNorm):
        _expect_chw(spec, in_shape, spec.channels)
        return in_shape
    if isinstance(spec, ReLU):
        return in_shape
    if isinstance(spec, ResidualBlock):
        _expect_chw(spec, in_shape, spec.channels)
        return in_shape
    if isinstance(spec, ResidualBlockDown):
        _expect_chw(spec, in_shape, spec.in_channels)
        ho, wo = conv_out_hw(in_shape[1], in_shape[2], 3, 3, 2, 1)
        return (spec.out_channels, ho, wo)
    if isinstance(spec, GlobalAvgPool):
        if len(in_shape) != 3:
            raise ShapeError(f"GlobalAvgPool expects (C, H, W), got {in_shape}")
        return (in_shape[0],)
    if isinstance(spec, FullyConnected):
        if len(in_shape) != 1 or in_shape[0] != spec.in_features:
            raise ShapeError(f"FullyConnected expects ({spec.in_features},), got {in_shape}")
        return (spec.out_features,)
    raise TypeError(f"unknown layer spec {spec!r}")


def chain_shape(specs: Sequence[LayerSpec], in_shape: Tuple[int, ...]) -> Tuple[int, ...]:
    """Compose the shape rules over a layer chain."""
    shape = tuple(in_shape)
    for i, spec in enumerate(specs):
        try:
            shape = output_shape(spec, shape)
        except ShapeError as e:
            raise ShapeError(f"layer {i} ({type(spec).__name__}): {e}") from None
    return shape


def _expect_chw(spec: LayerSpec, in_shape: Tuple[int, ...], channels: int) -> None:
    if len(in_shape) != 3 or in_shape[0] != channels:
        raise ShapeError(f"{type(spec).__name__} expects ({channels}, H, W), got {in_shape}")


# ---------------------------------------------------------------------------
# GEMM and im2col helpers
# ---------------------------------------------------------------------------

def _gemm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Single-row matmul takes BLAS's gemv path, whose accumulation order
    # differs from gemm rows; pad to 2 rows so per-row results are
    # bit-identical no matter how inputs are batched.
    if a.shape[0] == 1:
        return (np.concatenate([a, a]) @ b)[:1]
    return a @ b


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Unfold (N, C, H, W) into patch rows of shape (N*H_out*W_out, C*kh*kw)."""
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _col2im(dcols: np.ndarray, x_shape: Tuple[int, ...], kh: int, kw: int,
            stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Scatter patch-row gradients back to the (N, C, H, W) input gradient."""
    n, c, h, w = x_shape
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    d6 = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d6[:, :, i, j]
    if padding:
        return dxp[:, :, padding:-padding, padding:-padding]
    return dxp


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Layer:
    """Base class: parameter/state bookkeeping shared by all layers."""

    spec: LayerSpec

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable tensors, flattened names for composite layers."""
        return {}

    def gradients(self) -> Dict[str, np.ndarray]:
        """Gradients aligned with parameters(); valid after backward()."""
        return {}

    def state_tensors(self) -> Dict[str, np.ndarray]:
        """Non-trained state (batch-norm running statistics)."""
        return {}

    def weight_arrays(self) -> Tuple[np.ndarray, ...]:
        """Tensors subject to L2 regularization (conv/FC weights only)."""
        return ()

    def set_parameters(self, tensors: Dict[str, np.ndarray]) -> None:
        """Replace parameters and state from a {name: array} dict (shapes checked)."""
        own = {**self.parameters(), **self.state_tensors()}
        for name, arr in tensors.items():
            if name not in own:
                raise ShapeError(f"{type(self).__name__} has no tensor named {name!r}")
            if own[name].shape != arr.shape:
                raise ShapeError(f"{type(self).__name__}.{name}: expected shape "
                                 f"{own[name].shape}, got {arr.shape}")
            own[name][...] = arr

    def _require_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise BackwardStateError(
                f"{type(self).__name__}.backward() without a train-mode forward "
                "(eval-mode forwards keep no cache)")
        return cache


class Conv2DLayer(Layer):
    """2D convolution via im2col + GEMM. Weight layout (out_c, in_c, kh, kw)."""

    def __init__(self, spec: Conv2D, rng: np.random.Generator):
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
        std = math.sqrt(2.0 / fan_in)
        self.weight = (rng.standard_normal(
            (spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w),
            dtype=np.float64) * std).astype(DTYPE)
        self.bias = np.zeros(spec.out_channels, dtype=DTYPE)
        self._cache = None

    def forward(self, x, train):
        s = self.spec
        if x.ndim != 4 or x.shape[1] != s.in_channels:
            raise ShapeError(f"Conv2D expects (N, {s.in_channels}, H, W), got {x.shape}")
        cols, ho, wo = _im2col(x, s.kernel_h, s.kernel_w, s.stride, s.padding)
        w2 = self.weight.reshape(s.out_channels, -1).T
        if train:
            y = _gemm(cols, w2.astype(cols.dtype, copy=False))
        else:
            # one matmul per sample: a row's bits must not depend on what
            # else sits in the batch, or batched and single-input inference
            # would disagree
            y = np.matmul(cols.reshape(x.shape[0], ho * wo, -1),
                          w2.astype(cols.dtype, copy=False))
        y = (y.reshape(-1, s.out_channels) + self.bias.astype(cols.dtype, copy=False))
        y = np.ascontiguousarray(
            y.reshape(x.shape[0], ho, wo, s.out_channels).transpose(0, 3, 1, 2))
        self._cache = (cols, x.shape, ho, wo) if train else None
        return y

    def backward(self, dout):
        cols, x_shape, ho, wo = self._require_cache()
        s = self.spec
        dmat = dout.transpose(0, 2, 3, 1).reshape(-1, s.out_channels)
        self._dweight = _gemm(dmat.T, cols).reshape(self.weight.shape)
        self._dbias = dmat.sum(axis=0)
        dcols = _gemm(dmat, self.weight.reshape(s.out_channels, -1).astype(dmat.dtype, copy=False))
        return _col2im(dcols, x_shape, s.kernel_h, s.kernel_w, s.stride, s.padding, ho, wo)

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def gradients(self):
        return {"weight": self._dweight, "bias": self._dbias}

    def weight_arrays(self):
        return (self.weight,)


class BatchNormLayer(Layer):
    """Per-channel batch normalization over (N, H, W)."""

    def __init__(self, spec: BatchNorm, rng: np.random.Generator):
        self.spec = spec
        c = spec.channels
        self.gamma = np.ones(c, dtype=DTYPE)
        self.beta = np.zeros(c, dtype=DTYPE)
        self.running_mean = np.zeros(c, dtype=DTYPE)
        self.running_var = np.ones(c, dtype=DTYPE)
        self._cache = None

    def forward(self, x, train):
        c = self.spec.channels
        if x.ndim != 4 or x.shape[1] != c:
            raise ShapeError(f"BatchNorm expects (N, {c}, H, W), got {x.shape}")
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            self.running_mean[...] = BN_MOMENTUM * self.running_mean + (1 - BN_MOMENTUM) * mean
            self.running_var[...] = BN_MOMENTUM * self.running_var + (1 - BN_MOMENTUM) * var
        else:
            mean = self.running_mean.astype(x.dtype, copy=False)
            var = self.running_var.astype(x.dtype, copy=False)
        inv_std = 1.0 / np.sqrt(var + np.asarray(BN_EPS, dtype=x.dtype))
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        y = self.gamma.astype(x.dtype, copy=False)[None, :, None, None] * xhat \
            + self.beta.astype(x.dtype, copy=False)[None, :, None, None]
        self._cache = (xhat, inv_std) if train else None
        return y

    def backward(self, dout):
        xhat, inv_std = self._require_cache()
        n, c, h, w = dout.shape
        m = n * h * w
        self._dgamma = (dout * xhat).sum(axis=(0, 2, 3))
        self._dbeta = dout.sum(axis=(0, 2, 3))
        dxhat = dout * self.gamma.astype(dout.dtype, copy=False)[None, :, None, None]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
        return (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def gradients(self):
        return {"gamma": self._dgamma, "beta": self._dbeta}

    def state_tensors(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}


class ReLULayer(Layer):
    def __init__(self, spec: ReLU, rng=None):
        self.spec = spec
        self._cache = None

    def forward(self, x, train):
        mask = x > 0
        self._cache = mask if train else None
        return x * mask

    def backward(self, dout):
        mask = self._require_cache()
        return dout * mask


class GlobalAvgPoolLayer(Layer):
    """(N, C, H, W) -> (N, C), arithmetic mean over the spatial dims."""

    def __init__(self, spec: GlobalAvgPool, rng=None):
        self.spec = spec
        self._cache = None

    def forward(self, x, train):
        if x.ndim != 4:
            raise ShapeError(f"GlobalAvgPool expects (N, C, H, W), got {x.shape}")
        self._cache = x.shape if train else None
        return x.mean(axis=(2, 3))

    def backward(self, dout):
        n, c, h, w = self._require_cache()
        scale = np.asarray(1.0 / (h * w), dtype=dout.dtype)
        return np.broadcast_to((dout * scale)[:, :, None, None], (n, c, h, w)).copy()


class FullyConnectedLayer(Layer):
    """y = x @ W + b with W of shape (in_features, out_features)."""

    def __init__(self, spec: FullyConnected, rng: np.random.Generator):
        self.spec = spec
        std = math.sqrt(2.0 / spec.in_features)
        self.weight = (rng.standard_normal(
            (spec.in_features, spec.out_features), dtype=np.float64) * std).astype(DTYPE)
        self.bias = np.zeros(spec.out_features, dtype=DTYPE)
        self._cache = None

    def forward(self, x, train):
        s = self.spec
        if x.ndim != 2 or x.shape[1] != s.in_features:
            raise ShapeError(f"FullyConnected expects (N, {s.in_features}), got {x.shape}")
        w = self.weight.astype(x.dtype, copy=False)
        if train:
            y = _gemm(x, w)
        else:
            # per-sample matvec keeps rows independent of batch composition
            y = np.matmul(x[:, None, :], w)[:, 0, :]
        y = y + self.bias.astype(x.dtype)
        self._cache = x if train else None
        return y

    def backward(self, dout):
        x = self._require_cache()
        self._dweight = _gemm(x.T, dout)
        self._dbias = dout.sum(axis=0)
        return _gemm(dout, self.weight.T.astype(dout.dtype, copy=False))

    def parameters(self):
        return {"weight": self.weight, "bias": self.bias}

    def gradients(self):
        return {"weight": self._dweight, "bias": self._dbias}

    def weight_arrays(self):
        return (self.weight,)


class _CompositeLayer(Layer):
    """Shared plumbing for residual blocks: named sublayers, flattened tensors."""

    _sublayers: Tuple[Tuple[str, Layer], ...]

    def parameters(self):
        out = {}
        for name, sub in self._sublayers:
            for k, v in sub.parameters().items():
                out[f"{name}.{k}"] = v
        return out

    def gradients(self):
        out = {}
        for name, sub in self._sublayers:
            for k, v in sub.gradients().items():
                out[f"{name}.{k}"] = v
        return out

    def state_tensors(self):
        out = {}
        for name, sub in self._sublayers:
            for k, v in sub.state_tensors().items():
                out[f"{name}.{k}"] = v
        return out

    def weight_arrays(self):
        out = []
        for _, sub in self._sublayers:
            out.extend(sub.weight_arrays())
        return tuple(out)

    def set_parameters(self, tensors):
        by_sub: Dict[str, Dict[str, np.ndarray]] = {}
        subs = dict(self._sublayers)
        for name, arr in tensors.items():
            head, _, rest = name.partition(".")
            if head not in subs or not rest:
                raise ShapeError(f"{type(self).__name__} has no tensor named {name!r}")
            by_sub.setdefault(head, {})[rest] = arr
        for head, sub_tensors in by_sub.items():
            subs[head].set_parameters(sub_tensors)


class ResidualBlockLayer(_CompositeLayer):
    """x + f(x), with f = conv3x3 -> [bn] -> relu -> conv3x3 -> [bn] -> relu.

    Zero conv weights make f vanish, so the block reduces to the identity.
    """

    def __init__(self, spec: ResidualBlock, rng: np.random.Generator):
        self.spec = spec
        c = spec.channels
        conv = lambda: Conv2DLayer(Conv2D(c, c, 3, 3, stride=1, padding=1), rng)
        self._branch = [("conv1", conv())]
        if spec.batch_norm:
            self._branch.append(("bn1", BatchNormLayer(BatchNorm(c), rng)))
        self._branch.append(("relu1", ReLULayer(ReLU())))
        self._branch.append(("conv2", conv()))
        if spec.batch_norm:
            self._branch.append(("bn2", BatchNormLayer(BatchNorm(c), rng)))
        self._branch.append(("relu2", ReLULayer(ReLU())))
        self._sublayers = tuple((n, l) for n, l in self._branch if l.parameters() or l.state_tensors())

    def forward(self, x, train):
        _expect_batch_chw(self, x, self.spec.channels)
        out = x
        for _, sub in self._branch:
            out = sub.forward(out, train)
        return x + out

    def backward(self, dout):
        d = dout
        for _, sub in reversed(self._branch):
            d = sub.backward(d)
        return dout + d


class ResidualBlockDownLayer(_CompositeLayer):
    """Stride-2 residual block; skip path is a 1x1 stride-2 projection conv."""

    def __init__(self, spec: ResidualBlockDown, rng: np.random.Generator):
        self.spec = spec
        ci, co = spec.in_channels, spec.out_channels
        self._branch = [("conv1", Conv2DLayer(Conv2D(ci, co, 3, 3, stride=2, padding=1), rng))]
        if spec.batch_norm:
            self._branch.append(("bn1", BatchNormLayer(BatchNorm(co), rng)))
        self._branch.append(("relu1", ReLULayer(ReLU())))
        self._branch.append(("conv2", Conv2DLayer(Conv2D(co, co, 3, 3, stride=1, padding=1), rng)))
        if spec.batch_norm:
            self._branch.append(("bn2", BatchNormLayer(BatchNorm(co), rng)))
        self._branch.append(("relu2", ReLULayer(ReLU())))
        self._skip = Conv2DLayer(Conv2D(ci, co, 1, 1, stride=2, padding=0), rng)
        named = [(n, l) for n, l in self._branch if l.parameters() or l.state_tensors()]
        named.append(("skip", self._skip))
        self._sublayers = tuple(named)

    def forward(self, x, train):
        _expect_batch_chw(self, x, self.spec.in_channels)
        out = x
        for _, sub in self._branch:
            out = sub.forward(out, train)
        return self._skip.forward(x, train) + out

    def backward(self, dout):
        d = dout
        for _, sub in reversed(self._branch):
            d = sub.backward(d)
        return self._skip.backward(dout) + d


def _expect_batch_chw(layer: Layer, x: np.ndarray, channels: int) -> None:
    if x.ndim != 4 or x.shape[1] != channels:
        raise ShapeError(f"{type(layer).__name__} expects (N, {channels}, H, W), got {x.shape}")


_LAYER_CLASSES = {
    Conv2D: Conv2DLayer,
    BatchNorm: BatchNormLayer,
    ReLU: ReLULayer,
    ResidualBlock: ResidualBlockLayer,
    ResidualBlockDown: ResidualBlockDownLayer,
    GlobalAvgPool: GlobalAvgPoolLayer,
    FullyConnected: FullyConnectedLayer,
}


def make_layer(spec: LayerSpec, rng: np.random.Generator) -> Layer:
    return _LAYER_CLASSES[type(spec)](spec, rng)


def init_layers(specs: Sequence[LayerSpec], rng: np.random.Generator) -> list:
    """He-initialize a layer chain: conv/FC weights ~ N(0, sqrt(2/fan_in)),
    biases 0, batch-norm scale 1 / shift 0, running stats (0, 1).

    Draw order follows the spec sequence, so a fixed generator state yields a
    bit-identical chain.
    """
    return [make_layer(s, rng) for s in specs]


def cast_layers(layers: Sequence[Layer], dtype) -> None:
    """Rebind every parameter and state tensor to the given float dtype.

    This is the 64-bit mode used by the finite-difference gradient checks;
    production runs stay float32. Inputs of the same dtype then keep the
    whole forward/backward pass in that precision.
    """
    for layer in layers:
        if isinstance(layer, _CompositeLayer):
            cast_layers([sub for _, sub in layer._sublayers], dtype)
        for name in ("weight", "bias", "gamma", "beta",
                     "running_mean", "running_var"):
            arr = getattr(layer, name, None)
            if arr is not None:
                setattr(layer, name, arr.astype(dtype))


def forward_chain(layers: Sequence[Layer], x: np.ndarray, train: bool,
                  where: str = "chain") -> np.ndarray:
    """Run a layer chain, annotating shape errors with the layer index."""
    for i, layer in enumerate(layers):
        try:
            x = layer.forward(x, train)
        except ShapeError as e:
            raise ShapeError(f"{where}, layer {i}: {e}") from None
    return x


def backward_chain(layers: Sequence[Layer], dout: np.ndarray) -> np.ndarray:
    for layer in reversed(layers):
        dout = layer.backward(dout)
    return dout


# ---------------------------------------------------------------------------
# Softmax, loss, optimizer
# ---------------------------------------------------------------------------

def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtraction; shift-invariant)."""
    shifted = z - z.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(frozen=True)
class LossConfig:
    l2_coefficient: float = 1e-4

    def __post_init__(self):
        if self.l2_coefficient < 0:
            raise ValueError(f"l2_coefficient must be >= 0, got {self.l2_coefficient}")


def l2_penalty(weights: Iterable[np.ndarray], coefficient: float) -> float:
    """coefficient * sum of squared entries over the given weight tensors."""
    total = 0.0
    for w in weights:
        total += float(np.sum(np.asarray(w, dtype=np.float64) ** 2))
    return coefficient * total


def cross_entropy_loss(probs: np.ndarray, label: int, weights: Iterable[np.ndarray] = (),
                       cfg: LossConfig = LossConfig(l2_coefficient=0.0)) -> float:
    """-log(probs[label]) plus the L2 penalty over the weights being optimized."""
    n_c = probs.shape[-1]
    if not 0 <= label < n_c:
        raise ValueError(f"label {label} out of range [0, {n_c})")
    return float(-np.log(probs[label])) + l2_penalty(weights, cfg.l2_coefficient)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Fused batched softmax + mean NLL.

    Returns (loss, dlogits) with dlogits = (softmax - onehot) / N, the exact
    gradient of the mean cross-entropy w.r.t. the logits.
    """
    n = logits.shape[0]
    probs = softmax(logits, axis=1)
    nll = -np.log(np.maximum(probs[np.arange(n), labels], np.finfo(probs.dtype).tiny))
    dlogits = probs.copy()
    dlogits[np.arange(n), labels] -= 1
    dlogits /= n
    return float(nll.mean()), dlogits


class SGD:
    """Plain SGD with classical momentum: v <- mu*v + g; w <- w - lr*v."""

    def __init__(self, learning_rate: float, momentum: float = 0.9):
        if learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {learning_rate}")
        if not 0 <= momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self._velocity: Dict[str, np.ndarray] = {}

    def step(self, named: Iterable[Tuple[str, np.ndarray, np.ndarray]]) -> None:
        """Apply one update. `named` yields (key, param, grad); params update in place."""
        for key, param, grad in named:
            if param.shape != grad.shape:
                raise ShapeError(f"{key}: gradient shape {grad.shape} != param shape {param.shape}")
            if self.momentum > 0:
                v = self._velocity.get(key)
                if v is None:
                    v = np.zeros_like(param)
                    self._velocity[key] = v
                v *= self.momentum
                v += grad
                param -= self.learning_rate * v
            else:
                param -= self.learning_rate * grad
