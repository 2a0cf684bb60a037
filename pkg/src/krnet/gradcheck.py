"""Central finite-difference checks of every hand-written backward pass."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .model import KRBlockVariant, Network, NetworkConfig, build_network
from .nn import (
    BatchNorm,
    ConvLayer,
    PReLU,
    batchnorm_backward,
    batchnorm_forward,
    conv2d_backward,
    conv2d_forward,
    conv2d_transpose_backward,
    conv2d_transpose_forward,
    eltwise_add,
    eltwise_add_backward,
    prelu_backward,
    prelu_forward,
)
from .rng import Rng

STEP = 1e-6
# entries far below a tensor's gradient scale are compared at that scale
SCALE_FLOOR = 1e-3
LAYER_CLASSES = ("conv", "deconv", "bn", "prelu", "add", "network")

MINI_CONFIG = NetworkConfig(
    in_channels=1, extract_filters=4, extract_kernel=7, shrink_channels=4,
    block_channels_reduced=4, num_blocks=2, variant=KRBlockVariant.KR7_3,
    recon_filters=4, mini=True,
)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst entry-wise |a - n| / max(|a|, |n|, SCALE_FLOOR * max|n|)."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.size == 0:
        return 0.0
    floor = max(SCALE_FLOOR * float(np.max(np.abs(n))), 1e-300)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numeric_grad(f: Callable[[], float], array: np.ndarray, indices=None,
                 h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` wrt entries of ``array`` (perturbed in place)."""
    flat = array.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = []
    for i in indices:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out.append((fp - fm) / (2.0 * h))
    return np.array(out)


@dataclass
class CheckResult:
    worst: dict[str, float] = field(default_factory=dict)

    def record(self, name: str, err: float) -> None:
        self.worst[name] = max(self.worst.get(name, 0.0), err)

    def passed(self, tolerance: float) -> bool:
        return all(v < tolerance for v in self.worst.values())


def _rand(rng: Rng, *shape) -> np.ndarray:
    return rng.normal(int(np.prod(shape))).reshape(shape)


def _corrupt(grads, factor):
    return tuple(g * factor for g in grads)


def check_conv(rng: Rng, transposed: bool = False, corrupt: bool = False) -> float:
    c_in, n_out, f = 2, 3, 3
    layer = ConvLayer(c_in, n_out, f, transposed=transposed)
    layer.weight.value[...] = _rand(rng, *layer.weight_shape)
    layer.bias.value[...] = _rand(rng, n_out)
    x = _rand(rng, 2, c_in, 4, 4)
    g = _rand(rng, 2, n_out, 4, 4)
    fwd = conv2d_transpose_forward if transposed else conv2d_forward
    bwd = conv2d_transpose_backward if transposed else conv2d_backward
    grads = bwd(x, layer, g)
    if corrupt:
        grads = _corrupt(grads, 1.01)

    def objective() -> float:
        return float(np.sum(g * fwd(x, layer)))

    targets = (x, layer.weight.value, layer.bias.value)
    return max(rel_error(a, numeric_grad(objective, t)) for a, t in zip(grads, targets))


def check_bn(rng: Rng, corrupt: bool = False) -> float:
    bn = BatchNorm(3)
    bn.gamma.value[...] = _rand(rng, 3)
    bn.beta.value[...] = _rand(rng, 3)
    x = _rand(rng, 2, 3, 4, 4)
    g = _rand(rng, 2, 3, 4, 4)
    grads = batchnorm_backward(x, bn, g)
    if corrupt:
        grads = _corrupt(grads, 1.01)

    def objective() -> float:
        return float(np.sum(g * batchnorm_forward(x, bn)))

    targets = (x, bn.gamma.value, bn.beta.value)
    return max(rel_error(a, numeric_grad(objective, t)) for a, t in zip(grads, targets))


def check_prelu(rng: Rng, corrupt: bool = False) -> float:
    p = PReLU(3)
    p.alpha.value[...] = rng.uniform(3, 0.05, 0.5)
    x = _rand(rng, 2, 3, 4, 4)
    # keep samples away from the kink so differences never straddle it
    x = np.where(np.abs(x) < 1e-3, 1e-3, x)
    g = _rand(rng, 2, 3, 4, 4)
    grads = prelu_backward(x, p, g)
    if corrupt:
        grads = _corrupt(grads, 1.01)

    def objective() -> float:
        return float(np.sum(g * prelu_forward(x, p)))

    targets = (x, p.alpha.value)
    return max(rel_error(a, numeric_grad(objective, t)) for a, t in zip(grads, targets))


def check_add(rng: Rng, corrupt: bool = False) -> float:
    a = _rand(rng, 2, 3, 4, 4)
    b = _rand(rng, 2, 3, 4, 4)
    g = _rand(rng, 2, 3, 4, 4)
    grads = eltwise_add_backward(g)
    if corrupt:
        grads = _corrupt(grads, 1.01)

    def objective() -> float:
        return float(np.sum(g * eltwise_add(a, b)))

    return max(rel_error(grads[0], numeric_grad(objective, a)),
               rel_error(grads[1], numeric_grad(objective, b)))


def network_objective(net: Network, y: np.ndarray) -> float:
    out = net.forward(y)
    return float(np.sum(out * out))


def check_network(net: Network, y: np.ndarray, rng: Rng, fraction: float = 0.01,
                  min_samples: int = 2, corrupt: bool = False) -> float:
    """Gradient of sum(x_hat ** 2) wrt a random sample of parameter entries and the input."""
    net.train()
    net.zero_grad()
    out = net.forward(y)
    grad_in = net.backward(2.0 * out)
    # pooled so the scale floor is the network-wide gradient scale: conv biases
    # feeding BN have identically zero gradient and only rounding noise
    analytic, numeric = [], []
    for p in net.params:
        k = min(max(min_samples, int(round(fraction * p.size))), p.size)
        idx = np.unique(rng.integers(k, 0, p.size - 1))
        a = p.grad.reshape(-1)[idx].copy()
        analytic.append(a * 1.01 if corrupt else a)
        numeric.append(numeric_grad(lambda: network_objective(net, y), p.value, idx))
    idx = np.unique(rng.integers(8, 0, y.size - 1))
    analytic.append(grad_in.reshape(-1)[idx])
    numeric.append(numeric_grad(lambda: network_objective(net, y), y, idx))
    worst = rel_error(np.concatenate(analytic), np.concatenate(numeric))
    net.zero_grad()
    return worst


def randomize_network(net: Network, rng: Rng) -> None:
    """Perturb BN affine terms and PReLU slopes away from their init values."""
    for p in net.params:
        if p.name.endswith(".gamma"):
            p.value[...] = rng.uniform(p.size, 0.5, 1.5)
        elif p.name.endswith(".beta") or p.name.endswith(".bias"):
            p.value[...] = 0.1 * rng.normal(p.size)
        elif p.name.endswith(".alpha"):
            p.value[...] = rng.uniform(p.size, 0.05, 0.5)


def run_gradcheck(config: NetworkConfig = MINI_CONFIG, seeds=range(20),
                  corrupt: str | None = None, input_size: int = 10) -> CheckResult:
    result = CheckResult()
    with warnings.catch_warnings():
        # tiny inputs sit below the receptive field by design
        warnings.simplefilter("ignore")
        for seed in seeds:
            rng = Rng(seed)
            result.record("conv", check_conv(rng, corrupt=corrupt == "conv"))
            result.record("deconv", check_conv(rng, transposed=True, corrupt=corrupt == "deconv"))
            result.record("bn", check_bn(rng, corrupt=corrupt == "bn"))
            result.record("prelu", check_prelu(rng, corrupt=corrupt == "prelu"))
            result.record("add", check_add(rng, corrupt=corrupt == "add"))
            net = build_network(config, seed)
            randomize_network(net, rng)
            y = rng.uniform(2 * config.in_channels * input_size ** 2).reshape(
                2, config.in_channels, input_size, input_size)
            result.record("network", check_network(net, y, rng, corrupt=corrupt == "network"))
    return result

