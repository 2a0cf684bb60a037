"""Primitive layers with hand-written forward and backward passes.

Activations are plain ``float64`` numpy arrays laid out (batch, channel,
height, width). Every primitive is stride 1 with zero "same" padding, so
spatial dimensions never change.

Each primitive comes in two flavours: module-level pure functions
(``conv2d_forward``, ``conv2d_backward``, ...) that return gradients without
side effects, and small layer objects that cache their input on ``forward``
and accumulate into :class:`Param` gradients on ``backward``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateBatchError, ShapeError, SizeError, StateError

# im2col buffers larger than this are refused rather than risking an OOM.
MAX_COLUMN_ELEMENTS = 1 << 31

TRAIN = "train"
INFER = "infer"


def check_tensor4(x, name: str = "input") -> np.ndarray:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a 4-D array (n, c, h, w)")
    if min(x.shape) < 1:
        raise ShapeError(f"{name} has an empty dimension: {x.shape}")
    if x.dtype != np.float64:
        raise ShapeError(f"{name} must be float64, got {x.dtype}")
    return x


@dataclass(eq=False)
class Param:
    """A learnable array with its gradient and momentum buffer."""

    value: np.ndarray
    name: str = ""
    decay_class: str = "weight"
    id: int = -1
    grad: np.ndarray = field(init=False)
    momentum_buf: np.ndarray = field(init=False)

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.momentum_buf = np.zeros_like(self.value)

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


# --------------------------------------------------------------------------
# convolution


def _columns(x: np.ndarray, f: int) -> np.ndarray:
    """im2col for same-padded stride-1 windows, shaped (c*f*f, n*h*w)."""
    n, c, h, w = x.shape
    if n * h * w * c * f * f > MAX_COLUMN_ELEMENTS:
        raise SizeError(f"convolution of {x.shape} with {f}x{f} kernel is too large")
    if f == 1:
        return x.transpose(1, 0, 2, 3).reshape(c, n * h * w)
    p = (f - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    cols = np.empty((c, f, f, n, h, w))
    for i in range(f):
        for j in range(f):
            cols[:, i, j] = xp[:, :, i:i + h, j:j + w].transpose(1, 0, 2, 3)
    return cols.reshape(c * f * f, n * h * w)


def _apply(cols: np.ndarray, weight: np.ndarray, shape) -> np.ndarray:
    n, _, h, w = shape
    o = weight.shape[0]
    out = weight.reshape(o, -1) @ cols
    return np.ascontiguousarray(out.reshape(o, n, h, w).transpose(1, 0, 2, 3))


def _correlate(x: np.ndarray, weight: np.ndarray) -> np.ndarray:
    return _apply(_columns(x, weight.shape[2]), weight, x.shape)


def _weight_grad(cols: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    o = grad_out.shape[1]
    g = grad_out.transpose(1, 0, 2, 3).reshape(o, -1)
    return g @ cols.T


def _flip_swap(weight: np.ndarray) -> np.ndarray:
    """(a, b, f, f) -> (b, a, f, f) with both spatial axes reversed."""
    return np.ascontiguousarray(weight[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


@dataclass(eq=False)
class ConvLayer:
    """Stride-1, zero-padded, shape-preserving convolution.

    For an ordinary convolution ``weight`` is (n_out, c_in, f, f). When
    ``transposed`` is set the layer is the adjoint operator and ``weight`` is
    stored (c_in, n_out, f, f), the same array a forward convolution from
    n_out to c_in channels would use.
    """

    c_in: int
    n_out: int
    f: int
    transposed: bool = False
    name: str = "conv"
    weight: Param = None
    bias: Param = None
    _cache: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.f < 1 or self.f % 2 == 0:
            raise ConfigError(f"{self.name}: kernel size must be odd, got {self.f}")
        if self.c_in < 1 or self.n_out < 1:
            raise ConfigError(f"{self.name}: channel counts must be positive")
        shape = self.weight_shape
        if self.weight is None:
            self.weight = Param(np.zeros(shape), f"{self.name}.weight", "weight")
        if self.weight.value.shape != shape:
            raise ShapeError(f"{self.name}: weight shape {self.weight.value.shape} != {shape}")
        if self.bias is None:
            self.bias = Param(np.zeros(self.n_out), f"{self.name}.bias", "bias")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        if self.transposed:
            return (self.c_in, self.n_out, self.f, self.f)
        return (self.n_out, self.c_in, self.f, self.f)

    @property
    def padding(self) -> int:
        return (self.f - 1) // 2

    @property
    def params(self) -> list[Param]:
        return [self.weight, self.bias]

    def effective_weight(self) -> np.ndarray:
        """Weight of the plain correlation this layer computes, (n_out, c_in, f, f)."""
        w = self.weight.value
        return _flip_swap(w) if self.transposed else w

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_conv_input(x, self)
        cols = _columns(x, self.f)
        out = _apply(cols, self.effective_weight(), x.shape)
        out += self.bias.value[None, :, None, None]
        self._cache = (x.shape, cols)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError(f"{self.name}: backward called before forward")
        shape, cols = self._cache
        gx, gw, gb = _conv_grads(cols, shape, self, grad_out)
        self.weight.grad += gw
        self.bias.grad += gb
        return gx


def _check_conv_input(x: np.ndarray, layer: ConvLayer) -> None:
    check_tensor4(x)
    if x.shape[1] != layer.c_in:
        raise ConfigError(f"{layer.name}: expected {layer.c_in} input channels, got {x.shape[1]}")


def _conv_grads(cols: np.ndarray, x_shape, layer: ConvLayer, grad_out: np.ndarray):
    check_tensor4(grad_out, "grad_out")
    expected = (x_shape[0], layer.n_out, x_shape[2], x_shape[3])
    if grad_out.shape != expected:
        raise ShapeError(f"{layer.name}: grad_out shape {grad_out.shape} != {expected}")
    weff = layer.effective_weight()
    grad_eff = _weight_grad(cols, grad_out).reshape(weff.shape)
    # transposed layers store flip_swap of the effective weight
    grad_w = _flip_swap(grad_eff) if layer.transposed else grad_eff
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = _correlate(grad_out, _flip_swap(weff))
    return grad_x, grad_w, grad_b


def conv2d_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """out[b,o,y,x] = bias[o] + sum_{c,i,j} w[o,c,i,j] * padded[b,c,y+i,x+j]."""
    if layer.transposed:
        raise ConfigError(f"{layer.name} is transposed; use conv2d_transpose_forward")
    _check_conv_input(x, layer)
    out = _correlate(x, layer.weight.value)
    out += layer.bias.value[None, :, None, None]
    return out


def conv2d_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray):
    """Gradients of ``sum(grad_out * conv2d_forward(x))`` wrt input, weight, bias."""
    if layer.transposed:
        raise ConfigError(f"{layer.name} is transposed; use conv2d_transpose_backward")
    _check_conv_input(x, layer)
    return _conv_grads(_columns(x, layer.f), x.shape, layer, grad_out)


def conv2d_transpose_forward(x: np.ndarray, layer: ConvLayer) -> np.ndarray:
    """Adjoint of the same-padded convolution that uses ``layer.weight``."""
    if not layer.transposed:
        raise ConfigError(f"{layer.name} is not a transposed layer")
    _check_conv_input(x, layer)
    out = _correlate(x, layer.effective_weight())
    out += layer.bias.value[None, :, None, None]
    return out


def conv2d_transpose_backward(x: np.ndarray, layer: ConvLayer, grad_out: np.ndarray):
    if not layer.transposed:
        raise ConfigError(f"{layer.name} is not a transposed layer")
    _check_conv_input(x, layer)
    return _conv_grads(_columns(x, layer.f), x.shape, layer, grad_out)


# --------------------------------------------------------------------------
# batch normalization


@dataclass(eq=False)
class BatchNorm:
    channels: int
    eps: float = 1e-5
    momentum_bn: float = 0.1
    mode: str = TRAIN
    name: str = "bn"
    gamma: Param = None
    beta: Param = None
    running_mean: np.ndarray = None
    running_var: np.ndarray = None
    _cache: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if not 0.0 < self.momentum_bn <= 1.0:
            raise ConfigError(f"{self.name}: momentum_bn must lie in (0, 1]")
        if self.gamma is None:
            self.gamma = Param(np.ones(self.channels), f"{self.name}.gamma", "bn")
        if self.beta is None:
            self.beta = Param(np.zeros(self.channels), f"{self.name}.beta", "bn")
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels)
        if self.running_var is None:
            self.running_var = np.ones(self.channels)

    @property
    def params(self) -> list[Param]:
        return [self.gamma, self.beta]

    def forward(self, x: np.ndarray) -> np.ndarray:
        out = batchnorm_forward(x, self)
        self._cache = x
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError(f"{self.name}: backward called before forward")
        gx, gg, gb = batchnorm_backward(self._cache, self, grad_out)
        self.gamma.grad += gg
        self.beta.grad += gb
        return gx


def _bn_stats(x: np.ndarray, bn: BatchNorm):
    if bn.mode == TRAIN:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        if count < 2:
            raise DegenerateBatchError(
                f"{bn.name}: batch statistics need >= 2 elements per channel, got {count}"
            )
        mean = x.mean(axis=(0, 2, 3))
        var = ((x - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
        return mean, var
    if bn.mode == INFER:
        return bn.running_mean, bn.running_var
    raise ConfigError(f"{bn.name}: unknown mode {bn.mode!r}")


def _check_bn_input(x: np.ndarray, bn: BatchNorm) -> None:
    check_tensor4(x)
    if x.shape[1] != bn.channels:
        raise ConfigError(f"{bn.name}: expected {bn.channels} channels, got {x.shape[1]}")


def batchnorm_forward(x: np.ndarray, bn: BatchNorm) -> np.ndarray:
    """Per-channel normalization; in train mode also updates running stats."""
    _check_bn_input(x, bn)
    mean, var = _bn_stats(x, bn)
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    if bn.mode == TRAIN:
        m = bn.momentum_bn
        bn.running_mean = (1.0 - m) * bn.running_mean + m * mean
        bn.running_var = (1.0 - m) * bn.running_var + m * var
    return bn.gamma.value[None, :, None, None] * xhat + bn.beta.value[None, :, None, None]


def batchnorm_backward(x: np.ndarray, bn: BatchNorm, grad_out: np.ndarray):
    _check_bn_input(x, bn)
    if grad_out.shape != x.shape:
        raise ShapeError(f"{bn.name}: grad_out shape {grad_out.shape} != {x.shape}")
    mean, var = _bn_stats(x, bn)
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    scale = (bn.gamma.value * inv_std)[None, :, None, None]
    if bn.mode == INFER:
        return grad_out * scale, grad_gamma, grad_beta
    count = x.shape[0] * x.shape[2] * x.shape[3]
    mean_g = (grad_beta / count)[None, :, None, None]
    mean_gx = (grad_gamma / count)[None, :, None, None]
    grad_x = scale * (grad_out - mean_g - xhat * mean_gx)
    return grad_x, grad_gamma, grad_beta


# --------------------------------------------------------------------------
# PReLU and addition


@dataclass(eq=False)
class PReLU:
    channels: int
    init: float = 0.25
    name: str = "prelu"
    alpha: Param = None
    _cache: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = Param(np.full(self.channels, self.init), f"{self.name}.alpha", "prelu")

    @property
    def params(self) -> list[Param]:
        return [self.alpha]

    def forward(self, x: np.ndarray) -> np.ndarray:
        out = prelu_forward(x, self)
        self._cache = x
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError(f"{self.name}: backward called before forward")
        gx, ga = prelu_backward(self._cache, self, grad_out)
        self.alpha.grad += ga
        return gx


def _check_prelu_input(x: np.ndarray, p: PReLU) -> None:
    check_tensor4(x)
    if x.shape[1] != p.channels:
        raise ShapeError(f"{p.name}: expected {p.channels} channels, got {x.shape[1]}")


def prelu_forward(x: np.ndarray, p: PReLU) -> np.ndarray:
    _check_prelu_input(x, p)
    a = p.alpha.value[None, :, None, None]
    return np.where(x >= 0.0, x, a * x)


def prelu_backward(x: np.ndarray, p: PReLU, grad_out: np.ndarray):
    # slope 1 at x == 0
    _check_prelu_input(x, p)
    if grad_out.shape != x.shape:
        raise ShapeError(f"{p.name}: grad_out shape {grad_out.shape} != {x.shape}")
    neg = x < 0.0
    a = p.alpha.value[None, :, None, None]
    grad_x = np.where(neg, a * grad_out, grad_out)
    grad_alpha = np.where(neg, grad_out * x, 0.0).sum(axis=(0, 2, 3))
    return grad_x, grad_alpha


def eltwise_add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    check_tensor4(a, "a")
    check_tensor4(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"eltwise_add needs identical shapes, got {a.shape} and {b.shape}")
    return a + b


def eltwise_add_backward(grad_out: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return grad_out, grad_out
