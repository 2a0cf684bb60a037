"""KRNET: a kernel-regulation CNN denoiser on plain numpy."""

from .data import Awgn, Blind, MultiChannel, add_noise, crop_patches, read_pnm, write_pnm
from .evaluate import EvalReport, evaluate, psnr, report_render
from .model import KRBlockVariant, Network, NetworkConfig, build_network, receptive_field
from .rng import Rng
from .train import TrainConfig, checkpoint_load, checkpoint_save

__version__ = "0.1.0"

__all__ = [
    "Awgn", "Blind", "EvalReport", "KRBlockVariant", "MultiChannel", "Network", "NetworkConfig",
    "Rng", "TrainConfig", "add_noise", "build_network", "checkpoint_load", "checkpoint_save",
    "crop_patches", "evaluate", "psnr", "read_pnm", "receptive_field", "report_render",
    "write_pnm",
]
