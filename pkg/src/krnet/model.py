"""KR-blocks and the full KRNET denoiser."""

from __future__ import annotations

import copy
import dataclasses
import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, StateError
from .nn import INFER, TRAIN, BatchNorm, ConvLayer, Param, PReLU, check_tensor4, eltwise_add
from .rng import Rng


class KRBlockVariant(str, enum.Enum):
    KR7_3 = "KR7_3"
    KR3_3 = "KR3_3"
    KR7_7 = "KR7_7"

    @property
    def kernels(self) -> tuple[int, int]:
        return {"KR7_3": (7, 3), "KR3_3": (3, 3), "KR7_7": (7, 7)}[self.value]


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 1
    extract_filters: int = 128
    extract_kernel: int = 7
    shrink_channels: int = 64
    block_channels_reduced: int = 64
    num_blocks: int = 4
    variant: KRBlockVariant = KRBlockVariant.KR7_3
    recon_filters: int = 128
    mini: bool = False

    def __post_init__(self):
        if not isinstance(self.variant, KRBlockVariant):
            try:
                object.__setattr__(self, "variant", KRBlockVariant(self.variant))
            except ValueError:
                raise ConfigError(f"variant: unknown KR-block variant {self.variant!r}") from None
        self.validate()

    def validate(self) -> None:
        for name in ("extract_filters", "shrink_channels", "block_channels_reduced",
                     "num_blocks", "recon_filters", "extract_kernel"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name}: must be a positive integer, got {value!r}")
        if self.in_channels not in (1, 3):
            raise ConfigError(f"in_channels: must be 1 or 3, got {self.in_channels!r}")
        if self.extract_kernel % 2 == 0:
            raise ConfigError(f"extract_kernel: must be odd, got {self.extract_kernel}")
        if not self.mini:
            if self.extract_kernel < 7:
                raise ConfigError("extract_kernel: must be >= 7 unless mini is set")
            if self.extract_filters < 128:
                raise ConfigError("extract_filters: must be >= 128 unless mini is set")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["variant"] = self.variant.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"network: unknown key(s) {', '.join(unknown)}")
        return cls(**d)


class CompositeUnit:
    """Conv -> BN -> PReLU."""

    def __init__(self, c_in: int, c_out: int, f: int, name: str):
        self.name = name
        self.conv = ConvLayer(c_in, c_out, f, name=f"{name}.conv")
        self.bn = BatchNorm(c_out, name=f"{name}.bn")
        self.act = PReLU(c_out, name=f"{name}.prelu")

    @property
    def params(self) -> list[Param]:
        return self.conv.params + self.bn.params + self.act.params

    @property
    def batchnorms(self) -> list[BatchNorm]:
        return [self.bn]

    @property
    def convs(self) -> list[ConvLayer]:
        return [self.conv]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.act.forward(self.bn.forward(self.conv.forward(x)))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return self.conv.backward(self.bn.backward(self.act.backward(grad)))


class KRBlock:
    """1x1 reduce -> large -> small, large + small blended, 1x1 expand."""

    def __init__(self, channels: int, reduced: int, variant: KRBlockVariant, name: str = "block"):
        k_large, k_small = variant.kernels
        self.channels = channels
        self.variant = variant
        self.reduce = CompositeUnit(channels, reduced, 1, f"{name}.reduce")
        self.large = CompositeUnit(reduced, reduced, k_large, f"{name}.large")
        self.small = CompositeUnit(reduced, reduced, k_small, f"{name}.small")
        self.expand = CompositeUnit(reduced, channels, 1, f"{name}.expand")

    @property
    def units(self) -> list[CompositeUnit]:
        return [self.reduce, self.large, self.small, self.expand]

    @property
    def params(self) -> list[Param]:
        return [p for u in self.units for p in u.params]

    def forward(self, x: np.ndarray) -> np.ndarray:
        return kr_block_forward(self, x)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        g_blend = self.expand.backward(grad)
        g_large = g_blend + self.small.backward(g_blend)
        return self.reduce.backward(self.large.backward(g_large))


def kr_block_forward(block: KRBlock, x: np.ndarray) -> np.ndarray:
    check_tensor4(x)
    if x.shape[1] != block.channels:
        raise ConfigError(f"KR-block expects {block.channels} channels, got {x.shape[1]}")
    large = block.large.forward(block.reduce.forward(x))
    small = block.small.forward(large)
    return block.expand.forward(eltwise_add(large, small))


class Network:
    def __init__(self, config: NetworkConfig):
        c = config
        self.config = c
        self.extract = [
            CompositeUnit(c.in_channels, c.extract_filters, c.extract_kernel, "extract1"),
            CompositeUnit(c.extract_filters, c.extract_filters, c.extract_kernel, "extract2"),
        ]
        self.shrink = CompositeUnit(c.extract_filters, c.shrink_channels, 1, "shrink")
        self.blocks = [
            KRBlock(c.shrink_channels, c.block_channels_reduced, c.variant, f"block{k}")
            for k in range(c.num_blocks)
        ]
        self.expand_stage = CompositeUnit(c.shrink_channels, c.recon_filters, 1, "expand")
        self.recon_conv = CompositeUnit(c.recon_filters, c.recon_filters, 3, "recon")
        self.recon_deconv = ConvLayer(c.recon_filters, c.in_channels, 3, transposed=True,
                                      name="deconv")
        self.params = self._collect_params()
        for i, p in enumerate(self.params):
            p.id = i
        self._forwarded = False

    def units(self) -> list[CompositeUnit]:
        units = [*self.extract, self.shrink]
        for b in self.blocks:
            units.extend(b.units)
        return units + [self.expand_stage, self.recon_conv]

    def convs(self) -> list[ConvLayer]:
        return [u.conv for u in self.units()] + [self.recon_deconv]

    def batchnorms(self) -> list[BatchNorm]:
        return [u.bn for u in self.units()]

    def _collect_params(self) -> list[Param]:
        params = [p for u in self.units() for p in u.params]
        return params + self.recon_deconv.params

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def set_mode(self, mode: str) -> None:
        if mode not in (TRAIN, INFER):
            raise ConfigError(f"unknown mode {mode!r}")
        for bn in self.batchnorms():
            bn.mode = mode

    def train(self) -> None:
        self.set_mode(TRAIN)

    def eval(self) -> None:
        self.set_mode(INFER)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def clone(self) -> "Network":
        return copy.deepcopy(self)

    def forward(self, y: np.ndarray) -> np.ndarray:
        return network_forward(self, y)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return network_backward(self, grad_out)


def he_init(shape: tuple[int, ...], rng: Rng, fan_in: int | None = None) -> np.ndarray:
    """Zero-mean Gaussian weights with variance ``2 / fan_in``.

    ``fan_in`` defaults to ``c_in * f * f`` for a (n_out, c_in, f, f) shape.
    """
    if fan_in is None:
        fan_in = int(np.prod(shape[1:]))
    std = np.sqrt(2.0 / fan_in)
    return rng.normal(int(np.prod(shape))).reshape(shape) * std


def build_network(config: NetworkConfig, seed: int) -> Network:
    config.validate()
    net = Network(config)
    rng = Rng(seed)
    for conv in net.convs():
        # fan-in counts the channels each output actually sums over
        c_in = conv.c_in
        conv.weight.value[...] = he_init(conv.weight_shape, rng, fan_in=c_in * conv.f * conv.f)
    return net


def network_forward(net: Network, y: np.ndarray) -> np.ndarray:
    check_tensor4(y)
    c = net.config
    if y.shape[1] != c.in_channels:
        raise ConfigError(f"network expects {c.in_channels} channels, got {y.shape[1]}")
    rf = receptive_field(c)
    if min(y.shape[2:]) < rf:
        warnings.warn(f"input {y.shape[2]}x{y.shape[3]} is smaller than the receptive field {rf}",
                      stacklevel=2)
    h = y
    for unit in net.extract:
        h = unit.forward(h)
    b = net.shrink.forward(h)
    for block in net.blocks:
        b = eltwise_add(block.forward(b), b)
    z = net.recon_conv.forward(net.expand_stage.forward(b))
    out = eltwise_add(net.recon_deconv.forward(z), y)
    net._forwarded = True
    return out


def network_backward(net: Network, grad_out: np.ndarray) -> np.ndarray:
    """Accumulate parameter gradients; returns the gradient wrt the input."""
    if not net._forwarded:
        raise StateError("network_backward called before network_forward")
    check_tensor4(grad_out, "grad_out")
    g = net.recon_deconv.backward(grad_out)
    g = net.expand_stage.backward(net.recon_conv.backward(g))
    for block in reversed(net.blocks):
        g = g + block.backward(g)
    g = net.shrink.backward(g)
    for unit in reversed(net.extract):
        g = unit.backward(g)
    return g + grad_out


def layer_kernels(config: NetworkConfig) -> list[int]:
    """Kernel sizes along the longest serial path from input to output."""
    k_large, k_small = config.variant.kernels
    ks = [config.extract_kernel, config.extract_kernel, 1]
    for _ in range(config.num_blocks):
        ks += [1, k_large, k_small, 1]
    return ks + [1, 3, 3]


def compose_receptive_field(kernels) -> int:
    """Receptive field of stride-1 layers applied in series."""
    return 1 + sum(k - 1 for k in kernels)


def receptive_field(config: NetworkConfig) -> int:
    return compose_receptive_field(layer_kernels(config))
