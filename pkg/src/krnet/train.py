"""Loss, SGD with momentum, learning-rate schedule, epoch loop, checkpoints."""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .data import batch_iter
from .errors import (
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    EmptyEpochError,
    ShapeError,
)
from .model import Network, NetworkConfig, build_network, he_init, receptive_field
from .nn import Param
from .rng import Rng

__all__ = [
    "TrainConfig", "LrSchedule", "EpochStats", "TrainingState", "mse_loss", "he_init", "lr_at",
    "epoch_lr", "sgd_step", "train_step", "train_epoch", "checkpoint_save", "checkpoint_load",
    "checkpoint_bytes", "checkpoint_parse", "fit", "new_training_state",
]

MAGIC = b"KRN1"
VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr_start: float = 1e-1
    lr_end: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    patch_size: int = 75
    decay_all: bool = True

    def __post_init__(self):
        if not (0.0 < self.lr_end <= self.lr_start):
            raise ConfigError("lr_end/lr_start: need 0 < lr_end <= lr_start")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum: need 0 <= momentum < 1")
        if self.weight_decay < 0.0:
            raise ConfigError("weight_decay: must be >= 0")
        for name in ("epochs", "batch_size", "patch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")

    def check_patch_size(self, net_config: NetworkConfig) -> None:
        rf = receptive_field(net_config)
        if self.patch_size <= rf:
            raise ConfigError(
                f"patch_size: {self.patch_size} must be larger than the receptive field ({rf})"
            )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"train: unknown key(s) {', '.join(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LrSchedule:
    lr_start: float
    lr_end: float
    total_epochs: int


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Log-linear interpolation from lr_start (epoch 0) to lr_end (total_epochs)."""
    if not 0 <= epoch <= schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    if epoch == 0:
        return schedule.lr_start
    if epoch == schedule.total_epochs:
        return schedule.lr_end
    ratio = schedule.lr_end / schedule.lr_start
    return schedule.lr_start * ratio ** (epoch / schedule.total_epochs)


def epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    """Rate used during 0-based training epoch ``epoch``: the first epoch runs
    at lr_start and the last at lr_end."""
    if cfg.epochs == 1:
        return cfg.lr_start
    return lr_at(LrSchedule(cfg.lr_start, cfg.lr_end, cfg.epochs - 1), epoch)


def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    return loss, diff * (2.0 / diff.size)


def sgd_step(params: Iterable[Param], lr: float, momentum: float, weight_decay: float,
             decay_all: bool = True) -> None:
    for p in params:
        wd = weight_decay if (decay_all or p.decay_class == "weight") else 0.0
        g = p.grad + wd * p.value
        p.momentum_buf *= momentum
        p.momentum_buf += g
        p.value -= lr * p.momentum_buf
        p.grad[...] = 0.0


@dataclass
class EpochStats:
    mean_loss: float
    batch_count: int
    step_losses: list[float] = field(default_factory=list)


def train_step(net: Network, noisy: np.ndarray, clean: np.ndarray, cfg: TrainConfig,
               lr: float) -> float:
    pred = net.forward(noisy)
    loss, grad = mse_loss(pred, clean)
    net.backward(grad)
    sgd_step(net.params, lr, cfg.momentum, cfg.weight_decay, cfg.decay_all)
    return loss


def train_epoch(net: Network, batches, cfg: TrainConfig, lr: float) -> EpochStats:
    """One forward/loss/backward/step per batch, in iterator order."""
    net.train()
    net.zero_grad()
    losses = [train_step(net, noisy, clean, cfg, lr) for noisy, clean in batches]
    if not losses:
        raise EmptyEpochError("train_epoch received no batches")
    return EpochStats(float(np.mean(losses)), len(losses), losses)


# --------------------------------------------------------------------------
# checkpoints
#
# little-endian layout:
#   b"KRN1" | u32 version | u64 header length | header JSON (UTF-8)
#   | param values (f64, Param id order) | momentum buffers (same order)
#   | per BN layer: running_mean, running_var | u64 rng seed | u64 rng counter


@dataclass
class TrainingState:
    net: Network
    train_config: TrainConfig
    epoch: int
    rng: Rng
    extra: dict = field(default_factory=dict)

    @property
    def net_config(self) -> NetworkConfig:
        return self.net.config


def _header(state: TrainingState) -> bytes:
    doc = {
        "network": state.net.config.to_dict(),
        "train": state.train_config.to_dict(),
        "epoch": state.epoch,
        "extra": state.extra,
    }
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def checkpoint_bytes(state: TrainingState) -> bytes:
    header = _header(state)
    chunks = [MAGIC, struct.pack("<IQ", VERSION, len(header)), header]
    le = np.dtype("<f8")
    for p in state.net.params:
        chunks.append(p.value.astype(le).tobytes())
    for p in state.net.params:
        chunks.append(p.momentum_buf.astype(le).tobytes())
    for bn in state.net.batchnorms():
        chunks.append(bn.running_mean.astype(le).tobytes())
        chunks.append(bn.running_var.astype(le).tobytes())
    chunks.append(struct.pack("<QQ", *state.rng.state()))
    return b"".join(chunks)


def checkpoint_save(state: TrainingState, path) -> None:
    data = checkpoint_bytes(state)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(
                f"checkpoint truncated: need {n} bytes at offset {self.pos}, file has {len(self.data)}"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def floats(self, count: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * count), dtype="<f8").astype(np.float64)


def checkpoint_parse(data: bytes) -> TrainingState:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointMagicError("not a KRNET checkpoint (bad magic)")
    version, header_len = struct.unpack("<IQ", r.take(12))
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} unsupported (expected {VERSION})")
    try:
        doc = json.loads(r.take(header_len).decode("utf-8"))
        net_cfg = NetworkConfig.from_dict(doc["network"])
        train_cfg = TrainConfig.from_dict(doc["train"])
        epoch = int(doc["epoch"])
        extra = doc.get("extra", {})
    except CheckpointError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    net = Network(net_cfg)
    values = [r.floats(p.size).reshape(p.value.shape) for p in net.params]
    bufs = [r.floats(p.size).reshape(p.value.shape) for p in net.params]
    stats = [(r.floats(bn.channels), r.floats(bn.channels)) for bn in net.batchnorms()]
    seed, counter = struct.unpack("<QQ", r.take(16))
    if r.pos != len(data):
        raise CheckpointError(f"checkpoint has {len(data) - r.pos} trailing bytes")
    # only mutate the network once the whole file parsed
    for p, v, b in zip(net.params, values, bufs):
        p.value[...] = v
        p.momentum_buf[...] = b
    for bn, (mean, var) in zip(net.batchnorms(), stats):
        bn.running_mean = mean
        bn.running_var = var
    return TrainingState(net, train_cfg, epoch, Rng(seed, counter), extra)


def checkpoint_load(path) -> TrainingState:
    with open(path, "rb") as fh:
        return checkpoint_parse(fh.read())


def new_training_state(net_config: NetworkConfig, train_config: TrainConfig) -> TrainingState:
    net = build_network(net_config, train_config.seed)
    return TrainingState(net, train_config, 0, Rng(train_config.seed).spawn(2))


def fit(state: TrainingState, patches, noise, on_epoch=None) -> list[EpochStats]:
    """Run the remaining epochs of ``state``; ``on_epoch(state, stats, lr)`` follows each one."""
    cfg = state.train_config
    history = []
    for epoch in range(state.epoch, cfg.epochs):
        lr = epoch_lr(cfg, epoch)
        batches = batch_iter(patches, noise, cfg.batch_size, state.rng)
        stats = train_epoch(state.net, batches, cfg, lr)
        state.epoch = epoch + 1
        history.append(stats)
        if on_epoch is not None:
            on_epoch(state, stats, lr)
    return history
