"""End-to-end acceptance checks; each prints one PASS/FAIL line."""

import json
import math
import time

import numpy as np
import pytest
from scipy import stats

from krnet.cli import main
from krnet.data import (
    Awgn,
    Blind,
    MultiChannel,
    add_noise,
    crop_patches,
    load_images,
    parse_pnm,
    pnm_bytes,
    read_manifest,
)
from krnet.evaluate import (
    AblationData,
    EvalReport,
    ReportRow,
    ablation_run,
    evaluate,
    parse_csv_report,
    psnr,
    report_render,
)
from krnet.model import KRBlockVariant, Network, NetworkConfig, build_network
from krnet.nn import Param
from krnet.rng import Rng
from krnet.train import (
    LrSchedule,
    TrainConfig,
    checkpoint_bytes,
    checkpoint_parse,
    fit,
    lr_at,
    new_training_state,
    sgd_step,
)

# desk-scale training run; the fixed parts come from the criterion itself
DESK_NETWORK = dict(extract_filters=16, shrink_channels=8, num_blocks=1,
                    extract_kernel=3, block_channels_reduced=16, recon_filters=8, mini=True)
DESK_TRAIN = dict(lr_start=0.05, lr_end=0.05, batch_size=16, seed=7, patch_size=24)
DESK_PATCHES_PER_IMAGE = 4
DESK_STEPS = 300


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail
    return emit


def test_1_gradient_correctness(report, capsys):
    start = time.perf_counter()
    code = main(["gradcheck", "--seeds", "20", "--tolerance", "1e-4"])
    elapsed = time.perf_counter() - start
    lines = capsys.readouterr().out.split("\n")
    worst = {l.split()[0]: float(l.split()[1].split("=")[1]) for l in lines if l.strip()}
    ok = code == 0 and len(worst) == 6 and max(worst.values()) < 1e-4 and elapsed < 120
    report(1, ok, f"worst={max(worst.values()):.2e} over 6 classes x 20 seeds in {elapsed:.0f}s")


def test_2_zero_network_identity(report):
    net = Network(NetworkConfig(extract_filters=8, shrink_channels=4, block_channels_reduced=4,
                                num_blocks=2, recon_filters=8, mini=True))
    for p in net.params:
        p.value[...] = 0.0
    rng = np.random.default_rng(2)
    exact = 0
    for _ in range(50):
        h, w = rng.integers(8, 30, 2)
        y = rng.normal(0.5, 0.5, (int(rng.integers(1, 4)), 1, h, w))
        exact += net.forward(y).tobytes() == y.tobytes()
    report(2, exact == 50, f"{exact}/50 inputs reproduced bit-exactly")


def test_3_shape_preservation(report):
    rng = np.random.default_rng(3)
    good = 0
    for _ in range(30):
        cfg = NetworkConfig(in_channels=int(rng.choice([1, 3])), extract_filters=4,
                            extract_kernel=int(rng.choice([3, 5, 7])), shrink_channels=3,
                            block_channels_reduced=2, num_blocks=int(rng.integers(1, 6)),
                            variant=list(KRBlockVariant)[rng.integers(3)], recon_filters=3, mini=True)
        net = build_network(cfg, int(rng.integers(1 << 32)))
        h, w = (int(v) for v in rng.integers(8, 65, 2))
        y = rng.random((2, cfg.in_channels, h, w))
        good += net.forward(y).shape == y.shape
    report(3, good == 30, f"{good}/30 random configs preserved shape")


def test_4_optimizer_schedule(report):
    s = LrSchedule(0.1, 1e-4, 50)
    p = Param(np.array([1.0]), "v", "weight")
    for _ in range(2):
        p.grad[...] = 1.0
        sgd_step([p], 0.1, 0.9, 0.0)
    ok = lr_at(s, 0) == 0.1 and lr_at(s, 50) == 1e-4 and abs(p.value[0] - 0.71) < 1e-12
    report(4, ok, f"lr(0)={lr_at(s, 0)!r} lr(50)={lr_at(s, 50)!r} two-step v={float(p.value[0])!r}")


def test_5_noise_statistics(report):
    clean = np.full((1, 1000, 1000), 0.5)
    eta = add_noise(clean, Awgn(25), Rng(5))[0] - clean
    awgn_ok = abs(eta.std() / (25 / 255) - 1) < 0.01 and abs(eta.mean()) <= 5e-4
    clean3 = np.full((3, 512, 512), 0.5)
    eta3 = add_noise(clean3, MultiChannel(40, 20, 30), Rng(6))[0] - clean3
    ratios = [eta3[c].std() / (s / 255) for c, s in enumerate((40, 20, 30))]
    mc_ok = all(abs(r - 1) < 0.02 for r in ratios)
    rng = Rng(7)
    draws = np.concatenate([add_noise(np.zeros((1, 1, 1)), Blind(), rng)[1] for _ in range(10_000)])
    ks = stats.kstest(draws, "uniform", args=(0, 55))
    blind_ok = ks.pvalue > 0.01
    report(5, awgn_ok and mc_ok and blind_ok,
           f"awgn std ratio {eta.std() / (25 / 255):.4f}, mc ratios "
           f"{', '.join(f'{r:.4f}' for r in ratios)}, blind KS p={ks.pvalue:.3f}")


def test_6_desk_scale_gain(report, tmp_path, capsys):
    start = time.perf_counter()
    assert main(["synth-data", "--out", str(tmp_path), "--count", "24", "--size", "32x32",
                 "--seed", "7"]) == 0
    capsys.readouterr()
    images = load_images(read_manifest(tmp_path / "manifest.txt"))
    train_imgs, test_imgs = images[:16], images[16:]
    steps_per_epoch = math.ceil(16 * DESK_PATCHES_PER_IMAGE / DESK_TRAIN["batch_size"])
    ncfg = NetworkConfig(**DESK_NETWORK)
    tcfg = TrainConfig(epochs=DESK_STEPS // steps_per_epoch, **DESK_TRAIN)
    tcfg.check_patch_size(ncfg)
    patches = crop_patches(train_imgs, tcfg.patch_size, DESK_PATCHES_PER_IMAGE,
                           Rng(tcfg.seed).spawn(1))
    state = new_training_state(ncfg, tcfg)
    history = fit(state, patches, Awgn(25))
    losses = [v for h in history for v in h.step_losses]
    row = evaluate(state.net, test_imgs, Awgn(25), tcfg.seed).rows[0]
    elapsed = time.perf_counter() - start
    gain = row.psnr - row.input_psnr
    ratio = np.mean(losses[-10:]) / np.mean(losses[:10])
    ok = len(losses) == DESK_STEPS and gain >= 2.0 and ratio < 0.5 and elapsed < 600
    report(6, ok, f"{len(losses)} steps, noisy {row.input_psnr:.2f} dB -> denoised "
                  f"{row.psnr:.2f} dB (gain {gain:+.2f}), loss ratio {ratio:.3f}, {elapsed:.0f}s")


def _run_config(path, manifest, out, epochs):
    doc = {"network": dict(extract_filters=4, extract_kernel=3, shrink_channels=3,
                           block_channels_reduced=2, num_blocks=1, variant="KR3_3",
                           recon_filters=4, mini=True),
           "train": {"epochs": epochs, "batch_size": 4, "patch_size": 18, "seed": 11},
           "data": {"train_manifest": str(manifest), "count_per_image": 2},
           "out_dir": str(out)}
    path.write_text(json.dumps(doc))
    return str(path)


def test_7_determinism_and_resume(report, tmp_path, capsys):
    main(["synth-data", "--out", str(tmp_path / "d"), "--count", "4", "--size", "20x20"])
    manifest = tmp_path / "d" / "manifest.txt"
    a = _run_config(tmp_path / "a.json", manifest, tmp_path / "a", 2)
    b = _run_config(tmp_path / "b.json", manifest, tmp_path / "b", 2)
    assert main(["train", "--config", a]) == 0 and main(["train", "--config", b]) == 0
    same = (tmp_path / "a/model.krn").read_bytes() == (tmp_path / "b/model.krn").read_bytes()
    c = _run_config(tmp_path / "c.json", manifest, tmp_path / "c", 2)
    assert main(["train", "--config", c, "--epochs", "1"]) == 0
    assert main(["train", "--config", c, "--resume", str(tmp_path / "c/ckpt_epoch_1.krn")]) == 0
    resumed = (tmp_path / "a/model.krn").read_bytes() == (tmp_path / "c/model.krn").read_bytes()
    capsys.readouterr()
    report(7, same and resumed, f"same-seed identical={same}, split-run identical={resumed}")


def test_8_ablation_harness(report):
    rng = np.random.default_rng(8)
    imgs = [rng.uniform(0.1, 0.9, (1, 24, 24)) for _ in range(6)]
    base = NetworkConfig(extract_filters=4, extract_kernel=3, shrink_channels=3,
                         block_channels_reduced=2, num_blocks=1, recon_filters=4, mini=True)
    cfg = TrainConfig(epochs=3, batch_size=4, patch_size=22, seed=8, lr_start=0.02, lr_end=0.01)
    data = AblationData(crop_patches(imgs[:4], 22, 2, Rng(8)), Awgn(25), imgs[4:5], imgs[5:])
    res = ablation_run(base, list(KRBlockVariant), [1], cfg, data)
    lengths = {len(v) for v in res.val_losses.values()}
    table = report_render(res.report).decode().splitlines()
    ok = len(res.val_losses) == 3 and lengths == {3} and len(res.report.rows) == 3 and len(table) == 2
    report(8, ok, f"{len(res.val_losses)} series of length {sorted(lengths)}, "
                  f"{len(res.report.rows)} cells in one table")


def test_9_psnr_oracle(report):
    def brute(ref, test):
        total = 0.0
        h, w = ref.shape
        for i in range(h):
            for j in range(w):
                t = min(max(test[i, j], 0.0), 1.0)
                total += (ref[i, j] - t) ** 2
        return 10 * math.log10(1.0 / (total / (h * w)))

    rng = np.random.default_rng(9)
    worst = 0.0
    for _ in range(100):
        ref = rng.random((12, 9))
        test = ref + rng.normal(0, rng.uniform(0.01, 0.3), ref.shape)
        worst = max(worst, abs(psnr(ref[None], test[None]) - brute(ref, test)))
    example = psnr(np.zeros((1, 4, 4)), np.full((1, 4, 4), 1 / 255))
    ok = worst < 1e-10 and abs(example - 48.1308) < 5e-5
    report(9, ok, f"max |psnr - oracle| = {worst:.1e} over 100 pairs; example {example:.4f} dB")


def test_10_io_round_trips(report, tmp_path):
    rng = np.random.default_rng(10)
    canon = [b"P5\n3 2\n255\n" + rng.integers(0, 256, 6, dtype=np.uint8).tobytes(),
             b"P6\n2 2\n255\n" + rng.integers(0, 256, 12, dtype=np.uint8).tobytes()]
    pnm_ok = all(pnm_bytes(parse_pnm(c)) == c for c in canon)
    state = new_training_state(NetworkConfig(extract_filters=4, extract_kernel=3, shrink_channels=3,
                                             block_channels_reduced=2, num_blocks=1,
                                             recon_filters=4, mini=True), TrainConfig(seed=10))
    blob = checkpoint_bytes(state)
    ckpt_ok = checkpoint_bytes(checkpoint_parse(blob)) == blob
    rep = EvalReport([ReportRow("KRNET", "sigma=25", [20.17, 20.21], [27.5, math.inf], 0.5)])
    data = report_render(rep, "csv")
    csv_ok = report_render(parse_csv_report(data), "csv") == data
    report(10, pnm_ok and ckpt_ok and csv_ok, f"pnm={pnm_ok} checkpoint={ckpt_ok} csv={csv_ok}")
