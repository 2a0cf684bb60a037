"""JSON run configuration shared by the command-line tools."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .data import Awgn, NoiseSpec, noise_from_dict, noise_to_dict
from .errors import ConfigError
from .model import NetworkConfig
from .train import TrainConfig

DEFAULT_COUNT_PER_IMAGE = 16
DEFAULT_OUT_DIR = "runs/krnet"
TOP_LEVEL_KEYS = {"network", "train", "noise", "data", "out_dir"}
DATA_KEYS = {"train_manifest", "val_manifest", "test_manifest", "count_per_image"}


@dataclass
class DataConfig:
    train_manifest: Path | None = None
    val_manifest: Path | None = None
    test_manifest: Path | None = None
    count_per_image: int = DEFAULT_COUNT_PER_IMAGE

    def require(self, key: str) -> Path:
        value = getattr(self, key)
        if value is None:
            raise ConfigError(f"missing required key data.{key}")
        return value


@dataclass
class RunConfig:
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    noise: NoiseSpec = field(default_factory=lambda: Awgn(25.0))
    data: DataConfig = field(default_factory=DataConfig)
    out_dir: Path = Path(DEFAULT_OUT_DIR)

    def to_dict(self) -> dict:
        def opt(p):
            return None if p is None else str(p)

        return {
            "network": self.network.to_dict(),
            "train": self.train.to_dict(),
            "noise": noise_to_dict(self.noise),
            "data": {
                "train_manifest": opt(self.data.train_manifest),
                "val_manifest": opt(self.data.val_manifest),
                "test_manifest": opt(self.data.test_manifest),
                "count_per_image": self.data.count_per_image,
            },
            "out_dir": str(self.out_dir),
        }


def _section(doc: dict, key: str) -> dict:
    value = doc.get(key, {})
    if not isinstance(value, dict):
        raise ConfigError(f"{key}: expected a JSON object")
    return value


def parse_run_config(doc: dict, base_dir: Path = Path(".")) -> RunConfig:
    """Build a RunConfig from a parsed JSON document; unknown keys are rejected."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = sorted(set(doc) - TOP_LEVEL_KEYS)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}")
    try:
        network = NetworkConfig.from_dict(_section(doc, "network"))
        train = TrainConfig.from_dict(_section(doc, "train"))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    noise = noise_from_dict(doc["noise"]) if "noise" in doc else Awgn(25.0)

    data_doc = _section(doc, "data")
    unknown = sorted(set(data_doc) - DATA_KEYS)
    if unknown:
        raise ConfigError(f"data: unknown key(s) {', '.join(unknown)}")

    def resolve(key):
        value = data_doc.get(key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else base_dir / p

    count = data_doc.get("count_per_image", DEFAULT_COUNT_PER_IMAGE)
    if not isinstance(count, int) or count < 1:
        raise ConfigError("data.count_per_image: must be a positive integer")
    data = DataConfig(resolve("train_manifest"), resolve("val_manifest"),
                      resolve("test_manifest"), count)
    out_dir = Path(doc.get("out_dir", DEFAULT_OUT_DIR))
    if not out_dir.is_absolute():
        out_dir = base_dir / out_dir
    return RunConfig(network, train, noise, data, out_dir)


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    return parse_run_config(doc, path.parent)


def default_config_document() -> dict:
    """Every key with its default value, as shipped in the docs."""
    doc = RunConfig().to_dict()
    doc["data"]["train_manifest"] = "train/manifest.txt"
    return doc
