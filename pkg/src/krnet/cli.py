"""Command-line entry point: ``krnet {train,denoise,eval,gradcheck,synth-data,ablate}``.

Exit codes: 0 success, 1 gradient check failed, 2 configuration error,
3 data error, 4 checkpoint error. Failures print one line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import warnings
from pathlib import Path

from . import plotting
from .config import RunConfig, load_run_config
from .data import (
    crop_patches,
    load_images,
    noise_from_dict,
    read_manifest,
    read_pnm,
    synth_corpus,
    write_pnm,
)
from .errors import CheckpointError, ConfigError, DataError
from .evaluate import (
    AblationData,
    EvalReport,
    ablation_run,
    denoise,
    evaluate,
    noisy_validation_set,
    render_loss_csv,
    report_render,
    validation_loss,
)
from .gradcheck import LAYER_CLASSES, MINI_CONFIG, run_gradcheck
from .model import KRBlockVariant, Network, build_network
from .rng import Rng
from .train import TrainingState, checkpoint_load, checkpoint_save, fit

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_CHECKPOINT = 4
GRADCHECK_MAX_PARAMS = 100_000


def _emit(line: str) -> None:
    sys.stdout.write(line + "\n")
    sys.stdout.flush()


def _load_checkpoint(path) -> TrainingState:
    try:
        return checkpoint_load(path)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None


def _overridden(cfg: RunConfig, args) -> RunConfig:
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    if changes:
        cfg.train = dataclasses.replace(cfg.train, **changes)
    return cfg


def _patches(cfg: RunConfig):
    images = load_images(read_manifest(cfg.data.require("train_manifest")))
    return crop_patches(images, cfg.train.patch_size, cfg.data.count_per_image,
                        Rng(cfg.train.seed).spawn(1))


def _write_series(out_dir: Path, name: str, values) -> None:
    (out_dir / f"{name}.csv").write_text(render_loss_csv(values))


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _overridden(load_run_config(args.config), args)
    cfg.train.check_patch_size(cfg.network)
    patches = _patches(cfg)
    val = None
    if cfg.data.val_manifest is not None:
        val_images = load_images(read_manifest(cfg.data.val_manifest))
        val = noisy_validation_set(val_images, cfg.noise, cfg.train.seed)

    if args.resume:
        state = _load_checkpoint(args.resume)
        if state.net.config != cfg.network:
            raise CheckpointError("checkpoint network config differs from the run config")
        state.train_config = cfg.train
    else:
        state = TrainingState(build_network(cfg.network, cfg.train.seed), cfg.train, 0,
                              Rng(cfg.train.seed).spawn(2))
    history = state.extra.setdefault("history", {"loss": [], "val_loss": []})
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)

    def on_epoch(st, stats, lr):
        history["loss"].append(stats.mean_loss)
        if val is not None:
            history["val_loss"].append(validation_loss(st.net, *val))
        _emit(json.dumps({"epoch": st.epoch, "lr": lr, "mean_loss": stats.mean_loss}))
        checkpoint_save(st, out_dir / f"ckpt_epoch_{st.epoch}.krn")

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fit(state, patches, cfg.noise, on_epoch)
    checkpoint_save(state, out_dir / "model.krn")
    series = {"train": history["loss"]}
    _write_series(out_dir, "train_loss", history["loss"])
    if history["val_loss"]:
        series["validation"] = history["val_loss"]
        _write_series(out_dir, "val_loss", history["val_loss"])
    plotting.plot_loss_curves(series, out_dir / "loss.png", ylabel="loss (MSE)")
    return EXIT_OK


def cmd_denoise(args) -> int:
    state = _load_checkpoint(args.model)
    net = state.net
    image = read_pnm(args.input)
    if image.shape[0] != net.config.in_channels:
        raise ConfigError(f"model expects {net.config.in_channels} channel(s), "
                          f"input has {image.shape[0]}")
    write_pnm(denoise(net, image), args.output)
    return EXIT_OK


def _parse_noise(text: str):
    p = Path(text)
    if not text.lstrip().startswith("{") and p.exists():
        text = p.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"--noise is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("--noise must be a JSON object")
    return noise_from_dict(doc)


def cmd_eval(args) -> int:
    state = _load_checkpoint(args.model)
    specs = [_parse_noise(n) for n in (args.noise or ['{"kind": "awgn", "sigma": 25}'])]
    images = load_images(read_manifest(args.manifest))
    label = args.label or f"KRNET{state.net.config.num_blocks}"
    report = EvalReport()
    for spec in specs:
        report.extend(evaluate(state.net, images, spec, args.seed, label))
    sys.stdout.write(report_render(report, args.format, timing=args.timing).decode("utf-8"))
    if args.figure:
        plotting.plot_psnr_report(report, args.figure)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    config = MINI_CONFIG
    if args.config:
        config = load_run_config(args.config).network
    n_params = Network(config).num_params
    if n_params >= GRADCHECK_MAX_PARAMS:
        raise ConfigError(f"gradcheck needs a mini config (< {GRADCHECK_MAX_PARAMS} params), "
                          f"this one has {n_params}")
    seeds = range(args.seed, args.seed + args.seeds)
    result = run_gradcheck(config, seeds, corrupt=args.corrupt_backward)
    for name in LAYER_CLASSES:
        err = result.worst[name]
        status = "ok" if err < args.tolerance else "FAIL"
        _emit(f"{name:<8} worst_rel_err={err:.3e} {status}")
    return EXIT_OK if result.passed(args.tolerance) else EXIT_CHECK_FAILED


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"--size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise ConfigError("--size dimensions must be positive")
    return h, w


def cmd_synth_data(args) -> int:
    if args.channels not in (1, 3):
        raise ConfigError("--channels must be 1 or 3")
    if args.count < 1:
        raise ConfigError("--count must be >= 1")
    try:
        manifest = synth_corpus(args.out, args.count, _parse_size(args.size), args.channels,
                                args.seed)
    except OSError as exc:
        raise DataError(f"cannot write to {args.out}: {exc.strerror}") from None
    _emit(str(manifest))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _overridden(load_run_config(args.config), args)
    try:
        variants = [KRBlockVariant(v) for v in args.variants.split(",")]
        blocks = [int(b) for b in args.blocks.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad --variants/--blocks: {exc}") from None
    data = AblationData(
        _patches(cfg), cfg.noise,
        load_images(read_manifest(cfg.data.require("val_manifest"))),
        load_images(read_manifest(cfg.data.require("test_manifest"))),
    )
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = ablation_run(cfg.network, variants, blocks, cfg.train, data)
    out_dir = cfg.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    for label, losses in result.val_losses.items():
        _write_series(out_dir, f"val_loss_{label}", losses)
    (out_dir / "ablation.txt").write_bytes(report_render(result.report, "text"))
    (out_dir / "ablation.csv").write_bytes(report_render(result.report, "csv"))
    plotting.plot_loss_curves(result.val_losses, out_dir / "val_loss.png")
    plotting.plot_psnr_report(result.report, out_dir / "psnr.png")
    sys.stdout.write(report_render(result.report, args.format).decode("utf-8"))
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="krnet", description="KRNET image denoiser.",
                                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a JSON run config", formatter_class=fmt)
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("denoise", help="denoise one PGM/PPM image", formatter_class=fmt)
    p.add_argument("--model", required=True, help="checkpoint (.krn)")
    p.add_argument("--in", dest="input", required=True, help="noisy input image (P5/P6)")
    p.add_argument("--out", dest="output", required=True, help="output image path")
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("eval", help="PSNR report on a manifest", formatter_class=fmt)
    p.add_argument("--model", required=True, help="checkpoint (.krn)")
    p.add_argument("--manifest", required=True, help="clean test images, one path per line")
    p.add_argument("--noise", action="append", default=None,
                   help='noise spec JSON or file, e.g. \'{"kind": "awgn", "sigma": 25}\'; '
                        "repeat for several rows (default: awgn sigma 25)")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--format", choices=["text", "csv"], default="text", help="report format")
    p.add_argument("--label", default=None, help="column label (default: KRNET<blocks>)")
    p.add_argument("--timing", action="store_true", help="append wall-time columns")
    p.add_argument("--figure", default=None, help="also write a PSNR bar chart (PNG)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of all backward passes",
                       formatter_class=fmt)
    p.add_argument("--config", default=None,
                   help="run config whose network section is checked (default: built-in mini)")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.add_argument("--seeds", type=int, default=20, help="number of consecutive seeds")
    p.add_argument("--tolerance", type=float, default=1e-4, help="max relative error")
    p.add_argument("--corrupt-backward", choices=LAYER_CLASSES, default=None,
                   help="negative control: scale this class's analytic gradient by 1.01")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth-data", help="write a synthetic clean-image corpus",
                       formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=24, help="number of images")
    p.add_argument("--size", default="32x32", help="image size HxW")
    p.add_argument("--channels", type=int, default=1, help="1 (P5) or 3 (P6)")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("ablate", help="train and compare KR-block variants / block counts",
                       formatter_class=fmt)
    p.add_argument("--config", required=True, help="run config JSON (needs val and test manifests)")
    p.add_argument("--variants", default="KR7_3,KR3_3,KR7_7", help="comma-separated variants")
    p.add_argument("--blocks", default="4", help="comma-separated block counts")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    p.add_argument("--format", choices=["text", "csv"], default="text", help="stdout format")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        code = EXIT_CONFIG
        msg = f"config error: {exc}"
    except DataError as exc:
        code = EXIT_DATA
        msg = f"data error: {exc}"
    except CheckpointError as exc:
        code = EXIT_CHECKPOINT
        msg = f"checkpoint error: {exc}"
    except OSError as exc:
        code = EXIT_DATA
        msg = f"data error: {exc}"
    sys.stderr.write(msg.replace("\n", " ") + "\n")
    return code


if __name__ == "__main__":
    sys.exit(main())
