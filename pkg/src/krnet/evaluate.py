"""PSNR, dataset evaluation, ablation runs and report rendering."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import NoiseSpec, PatchSet, add_noise
from .errors import DataError, ShapeError
from .model import KRBlockVariant, Network, NetworkConfig, build_network
from .rng import Rng
from .train import EpochStats, TrainConfig, TrainingState, fit

log = logging.getLogger(__name__)

CSV_HEADER = ["label", "noise", "images", "input_psnr", "psnr", "per_image_input", "per_image_psnr"]


def psnr(reference: np.ndarray, test: np.ndarray, peak: float = 1.0) -> float:
    """10 * log10(peak**2 / mse), with ``test`` clipped to [0, 1] first."""
    if reference.shape != test.shape:
        raise ShapeError(f"psnr shapes differ: {reference.shape} vs {test.shape}")
    diff = reference - np.clip(test, 0.0, 1.0)
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def mean_psnr(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else math.nan


@dataclass
class ReportRow:
    label: str
    noise: str
    per_image_input: list[float]
    per_image_psnr: list[float]
    wall_time: float = 0.0

    @property
    def images(self) -> int:
        return len(self.per_image_psnr)

    @property
    def input_psnr(self) -> float:
        return mean_psnr(self.per_image_input)

    @property
    def psnr(self) -> float:
        return mean_psnr(self.per_image_psnr)


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)

    def extend(self, other: "EvalReport") -> "EvalReport":
        self.rows.extend(other.rows)
        return self


def denoise(net: Network, image: np.ndarray) -> np.ndarray:
    """Run a (c, h, w) image through the network in inference mode."""
    net.eval()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return net.forward(image[None])[0]


def evaluate(net: Network, images: Sequence[np.ndarray], spec: NoiseSpec, seed: int,
             label: str = "KRNET") -> EvalReport:
    """Corrupt each image (seeded), denoise, and score both against the clean image."""
    if len(images) == 0:
        raise DataError("evaluation set is empty")
    rng = Rng(seed)
    started = time.perf_counter()
    inputs, outputs = [], []
    for i, clean in enumerate(images):
        if clean.shape[0] != net.config.in_channels:
            log.warning("image %d has %d channels, model expects %d; skipped",
                        i, clean.shape[0], net.config.in_channels)
            continue
        noisy, _ = add_noise(clean, spec, rng)
        inputs.append(psnr(clean, noisy))
        outputs.append(psnr(clean, denoise(net, noisy)))
    if not outputs:
        raise DataError("no evaluation image matched the model's channel count")
    row = ReportRow(label, spec.label(), inputs, outputs, time.perf_counter() - started)
    return EvalReport([row])


# --------------------------------------------------------------------------
# rendering


def _fmt2(v: float) -> str:
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return f"{v:.2f}"


def _fmt_full(v: float) -> str:
    return repr(float(v))


def render_text(report: EvalReport, timing: bool = False) -> str:
    """Noise settings as rows, configurations as columns, plus the noisy-input baseline."""
    labels = list(dict.fromkeys(r.label for r in report.rows))
    noises = list(dict.fromkeys(r.noise for r in report.rows))
    cell = {(r.noise, r.label): r for r in report.rows}
    header = ["noise", "input"] + labels
    if timing:
        header += [f"{lab} [s]" for lab in labels]
    table = [header]
    for noise in noises:
        present = [cell[(noise, lab)] for lab in labels if (noise, lab) in cell]
        line = [noise, _fmt2(present[0].input_psnr)]
        line += [_fmt2(cell[(noise, lab)].psnr) if (noise, lab) in cell else "-" for lab in labels]
        if timing:
            line += [f"{cell[(noise, lab)].wall_time:.2f}" if (noise, lab) in cell else "-"
                     for lab in labels]
        table.append(line)
    widths = [max(len(row[i]) for row in table) for i in range(len(header))]
    out = []
    for row in table:
        parts = [row[0].ljust(widths[0])] + [v.rjust(w) for v, w in zip(row[1:], widths[1:])]
        out.append("  ".join(parts).rstrip())
    return "\n".join(out) + "\n"


def render_csv(report: EvalReport, timing: bool = False) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(CSV_HEADER + (["wall_s"] if timing else []))
    for r in report.rows:
        line = [r.label, r.noise, str(r.images), _fmt_full(r.input_psnr), _fmt_full(r.psnr),
                ";".join(map(_fmt_full, r.per_image_input)),
                ";".join(map(_fmt_full, r.per_image_psnr))]
        if timing:
            line.append(_fmt_full(r.wall_time))
        writer.writerow(line)
    return buf.getvalue()


def report_render(report: EvalReport, fmt: str = "text", timing: bool = False) -> bytes:
    if fmt == "text":
        return render_text(report, timing).encode("utf-8")
    if fmt == "csv":
        return render_csv(report, timing).encode("utf-8")
    raise ValueError(f"unknown report format {fmt!r}")


def parse_csv_report(data) -> EvalReport:
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    rows = list(csv.reader(io.StringIO(text, newline="")))
    if not rows or rows[0][:len(CSV_HEADER)] != CSV_HEADER:
        raise ValueError("not a KRNET csv report")
    timing = len(rows[0]) > len(CSV_HEADER)

    def floats(s: str) -> list[float]:
        return [float(v) for v in s.split(";")] if s else []

    report = EvalReport()
    for line in rows[1:]:
        report.rows.append(ReportRow(line[0], line[1], floats(line[5]), floats(line[6]),
                                     float(line[7]) if timing else 0.0))
    return report


# --------------------------------------------------------------------------
# ablation


def validation_loss(net: Network, noisy: np.ndarray, clean: np.ndarray) -> float:
    net.eval()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        pred = net.forward(noisy)
    return float(np.mean((pred - clean) ** 2))


def noisy_validation_set(images: Sequence[np.ndarray], spec: NoiseSpec, seed: int):
    """Stack same-sized images into fixed (noisy, clean) tensors."""
    rng = Rng(seed).spawn(3)
    clean = np.stack(images)
    noisy = np.stack([add_noise(img, spec, rng)[0] for img in images])
    return noisy, clean


@dataclass
class AblationData:
    patches: PatchSet
    noise: NoiseSpec
    val_images: list[np.ndarray]
    test_images: list[np.ndarray]


@dataclass
class AblationResult:
    report: EvalReport
    val_losses: dict[str, list[float]]
    train_stats: dict[str, list[EpochStats]]


def cell_label(config: NetworkConfig) -> str:
    return f"KRNET{config.num_blocks}-{config.variant.value}"


def ablation_run(base_config: NetworkConfig, variants: Sequence[KRBlockVariant],
                 block_counts: Sequence[int], train_cfg: TrainConfig,
                 data: AblationData) -> AblationResult:
    """Train every (variant, block count) cell on identical data and seed."""
    noisy_val, clean_val = noisy_validation_set(data.val_images, data.noise, train_cfg.seed)
    report = EvalReport()
    curves: dict[str, list[float]] = {}
    stats: dict[str, list[EpochStats]] = {}
    for blocks in block_counts:
        for variant in variants:
            cfg = NetworkConfig(**{**base_config.to_dict(), "variant": variant,
                                   "num_blocks": blocks})
            train_cfg.check_patch_size(cfg)
            label = cell_label(cfg)
            state = TrainingState(build_network(cfg, train_cfg.seed), train_cfg, 0,
                                  Rng(train_cfg.seed).spawn(2))
            losses: list[float] = []

            def on_epoch(st, _stats, _lr, losses=losses):
                losses.append(validation_loss(st.net, noisy_val, clean_val))

            stats[label] = fit(state, data.patches, data.noise, on_epoch)
            curves[label] = losses
            cell = evaluate(state.net, data.test_images, data.noise, train_cfg.seed, label)
            report.extend(cell)
    return AblationResult(report, curves, stats)


def render_loss_csv(losses: Sequence[float]) -> str:
    return "epoch,loss\n" + "".join(f"{i + 1},{v!r}\n" for i, v in enumerate(losses))
