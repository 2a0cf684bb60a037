import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from krnet.data import (
    Awgn,
    Blind,
    MultiChannel,
    PatchSet,
    add_noise,
    batch_iter,
    crop_patches,
    load_images,
    noise_from_dict,
    noise_to_dict,
    parse_pnm,
    pnm_bytes,
    read_manifest,
    read_pnm,
    synth_corpus,
    write_pnm,
)
from krnet.errors import (
    DataError,
    NoiseSpecError,
    PnmMagicError,
    PnmMaxvalError,
    PnmTruncatedError,
)
from krnet.rng import Rng


class TestPnm:
    def test_gray_scaling(self):
        img = parse_pnm(b"P5\n2 2\n255\n" + bytes([0, 128, 255, 64]))
        assert img.shape == (1, 2, 2)
        np.testing.assert_array_equal(img.ravel(), [0, 128 / 255, 1, 64 / 255])

    def test_red_pixel_channel_order(self):
        img = parse_pnm(b"P6 1 1 255\n" + bytes([255, 0, 0]))
        np.testing.assert_array_equal(img.ravel(), [1.0, 0.0, 0.0])

    def test_header_comments(self):
        img = parse_pnm(b"P5\n# a comment\n3 1\n# another\n255\n" + bytes([1, 2, 3]))
        np.testing.assert_array_equal(img.ravel() * 255, [1, 2, 3])

    def test_round_trip_quantization_bound(self, tmp_path):
        img = np.random.default_rng(0).random((3, 5, 7))
        write_pnm(img, tmp_path / "x.ppm")
        back = read_pnm(tmp_path / "x.ppm")
        assert np.max(np.abs(back - img)) <= 1 / 510 + 1e-15

    @settings(max_examples=30)
    @given(st.sampled_from([1, 3]), st.integers(1, 6), st.integers(1, 6), st.binary(min_size=108, max_size=108))
    def test_canonical_identity(self, c, h, w, payload):
        raw = (b"P5" if c == 1 else b"P6") + f"\n{w} {h}\n255\n".encode() + payload[: c * h * w]
        assert pnm_bytes(parse_pnm(raw)) == raw

    def test_clamping(self):
        img = np.array([[[-0.5, 0.5, 1.5]]])
        assert pnm_bytes(img)[-3:] == bytes([0, 128, 255])

    def test_bad_magic(self):
        with pytest.raises(PnmMagicError):
            parse_pnm(b"P2\n1 1\n255\n0")

    def test_bad_maxval(self):
        with pytest.raises(PnmMaxvalError):
            parse_pnm(b"P5\n1 1\n65535\n\0\0")

    @pytest.mark.parametrize("raw", [b"P5\n2 2\n255\n\0\0\0", b"P5\n2 2", b"P6\n1 1\n255\n\0\0"])
    def test_truncated(self, raw):
        with pytest.raises(PnmTruncatedError):
            parse_pnm(raw)

    def test_errors_distinct(self):
        assert len({PnmMagicError, PnmMaxvalError, PnmTruncatedError}) == 3

    def test_manifest(self, tmp_path):
        write_pnm(np.zeros((1, 2, 2)), tmp_path / "a.pgm")
        (tmp_path / "m.txt").write_text("# images\na.pgm\n\n")
        paths = read_manifest(tmp_path / "m.txt")
        assert paths == [tmp_path / "a.pgm"]
        assert load_images(paths)[0].shape == (1, 2, 2)

    def test_missing_image(self, tmp_path):
        with pytest.raises(DataError):
            load_images([tmp_path / "nope.pgm"])


class TestNoise:
    def test_zero_sigma_exact(self):
        img = np.random.default_rng(1).random((3, 8, 8))
        for spec in (Awgn(0), MultiChannel(0, 0, 0), Blind(0, 0)):
            noisy, _ = add_noise(img, spec, Rng(1))
            assert noisy.tobytes() == img.tobytes()

    def test_awgn_statistics(self):
        clean = np.full((1, 1000, 1000), 0.5)
        noisy, sig = add_noise(clean, Awgn(25), Rng(3))
        eta = noisy - clean
        assert abs(eta.mean()) <= 5e-4
        assert abs(eta.std() / (25 / 255) - 1) < 0.01
        assert list(sig) == [25.0]

    def test_multichannel_statistics(self):
        clean = np.full((3, 512, 512), 0.5)
        noisy, _ = add_noise(clean, MultiChannel(40, 20, 30), Rng(4))
        eta = noisy - clean
        for c, s in enumerate((40, 20, 30)):
            assert abs(eta[c].std() / (s / 255) - 1) < 0.02
        flat = eta.reshape(3, -1)
        corr = np.corrcoef(flat)
        assert np.all(np.abs(corr[np.triu_indices(3, 1)]) < 0.01)

    def test_channel_independence_large(self):
        clean = np.zeros((3, 1000, 1000))
        eta = add_noise(clean, MultiChannel(40, 20, 30), Rng(5))[0].reshape(3, -1)
        corr = np.corrcoef(eta)
        assert np.all(np.abs(corr[np.triu_indices(3, 1)]) < 0.01)

    def test_multichannel_on_gray(self):
        with pytest.raises(NoiseSpecError):
            add_noise(np.zeros((1, 4, 4)), MultiChannel(1, 2, 3), Rng(0))

    def test_blind_uniform(self):
        rng = Rng(6)
        draws = np.concatenate([add_noise(np.zeros((1, 1, 1)), Blind(), rng)[1] for _ in range(10_000)])
        res = stats.kstest(draws, "uniform", args=(0, 55))
        assert res.statistic < 1.63 / np.sqrt(len(draws))

    def test_blind_per_channel_sigmas_scale_noise(self):
        noisy, sig = add_noise(np.zeros((3, 400, 400)), Blind(), Rng(7))
        assert len(set(sig.tolist())) == 3
        for c in range(3):
            assert abs(noisy[c].std() / (sig[c] / 255) - 1) < 0.02

    def test_additivity(self):
        clean = np.random.default_rng(0).random((1, 6, 6))
        noisy, _ = add_noise(clean, Awgn(10), Rng(8))
        eta = Rng(8).normal(36).reshape(1, 6, 6) * (10 / 255)
        np.testing.assert_array_equal(noisy, clean + eta)

    @pytest.mark.parametrize("bad", [dict(kind="awgn", sigma=-1), dict(kind="blind", lo=10, hi=5),
                                     dict(kind="warp"), dict(kind="awgn", sigma=1, extra=2)])
    def test_invalid_specs(self, bad):
        with pytest.raises(NoiseSpecError):
            noise_from_dict(bad)

    @pytest.mark.parametrize("spec", [Awgn(15), MultiChannel(40, 20, 30), Blind(0, 55)])
    def test_dict_round_trip(self, spec):
        assert noise_from_dict(noise_to_dict(spec)) == spec


def _images(n=2, size=20, seed=0):
    r = np.random.default_rng(seed)
    return [r.random((1, size, size)) for _ in range(n)]


class TestCrop:
    def test_full_image_only(self):
        img = _images(1, 16)[0]
        ps = crop_patches([img], 16, 5, Rng(0))
        assert all((p.top, p.left) == (0, 0) for p in ps.patches)
        np.testing.assert_array_equal(ps.patches[0].clean, img)

    def test_coordinate_bounds(self):
        ps = crop_patches([np.zeros((1, 100, 100))], 75, 100, Rng(1))
        tops = [p.top for p in ps.patches]
        lefts = [p.left for p in ps.patches]
        assert len(ps) == 100
        assert min(tops) >= 0 and max(tops) <= 25 and min(lefts) >= 0 and max(lefts) <= 25

    def test_patches_match_source(self):
        imgs = _images(3, 12)
        for p in crop_patches(imgs, 5, 10, Rng(2)).patches:
            src = imgs[p.image_id]
            np.testing.assert_array_equal(p.clean, src[:, p.top:p.top + 5, p.left:p.left + 5])

    def test_deterministic(self):
        a = crop_patches(_images(), 8, 6, Rng(3))
        b = crop_patches(_images(), 8, 6, Rng(3))
        assert [(p.image_id, p.top, p.left) for p in a.patches] == [(p.image_id, p.top, p.left) for p in b.patches]

    def test_small_image_skipped(self, caplog):
        imgs = [np.zeros((1, 4, 4)), np.zeros((1, 10, 10))]
        with caplog.at_level(logging.WARNING):
            ps = crop_patches(imgs, 8, 2, Rng(0))
        assert ps.skipped == [0] and len(ps) == 2 and "skipped" in caplog.text

    def test_zero_patches(self):
        with pytest.raises(DataError):
            crop_patches([np.zeros((1, 4, 4))], 8, 2, Rng(0))


class TestBatches:
    def patches(self, n=10):
        return crop_patches(_images(2, 12), 6, n // 2, Rng(4))

    def test_one_batch_when_size_equals_count(self):
        ps = self.patches()
        assert len(list(batch_iter(ps, Awgn(25), len(ps), Rng(0)))) == 1

    def test_oversized_batch(self):
        ps = self.patches()
        batches = list(batch_iter(ps, Awgn(25), 64, Rng(0)))
        assert len(batches) == 1 and batches[0][0].shape == (10, 1, 6, 6)

    def test_partial_last_batch(self):
        sizes = [b[0].shape[0] for b in batch_iter(self.patches(), Awgn(25), 4, Rng(0))]
        assert sizes == [4, 4, 2]

    def test_fresh_noise_each_epoch(self):
        ps = self.patches()
        rng = Rng(5)
        (n1, c1), = batch_iter(ps, Awgn(25), 10, rng)
        (n2, c2), = batch_iter(ps, Awgn(25), 10, rng)
        key = lambda c: sorted(x.tobytes() for x in c)
        assert key(c1) == key(c2)
        assert not np.array_equal(np.sort((n1 - c1).ravel()), np.sort((n2 - c2).ravel()))

    def test_shuffle_is_permutation(self):
        ps = self.patches()
        (_, clean), = batch_iter(ps, Awgn(0), 10, Rng(6))
        assert sorted(x.tobytes() for x in clean) == sorted(p.clean.tobytes() for p in ps.patches)

    def test_deterministic(self):
        ps = self.patches()
        a = [n.tobytes() for n, _ in batch_iter(ps, Blind(), 3, Rng(7))]
        b = [n.tobytes() for n, _ in batch_iter(ps, Blind(), 3, Rng(7))]
        assert a == b

    def test_blind_sigma_shared_per_source_image(self):
        img = np.full((1, 40, 40), 0.5)
        ps = crop_patches([img, img], 20, 2, Rng(8))
        (noisy, clean), = batch_iter(ps, Blind(), 4, Rng(9))
        order = Rng(9).permutation(4)
        stds = {}
        for k, i in enumerate(order):
            stds.setdefault(ps.patches[i].image_id, []).append((noisy[k] - clean[k]).std())
        for s in stds.values():
            assert abs(s[0] / s[1] - 1) < 0.25

    def test_empty(self):
        with pytest.raises(DataError):
            batch_iter(PatchSet([], 4), Awgn(1), 2, Rng(0))


def test_synth_corpus(tmp_path):
    man = synth_corpus(tmp_path / "s", 3, (16, 20), 3, 1)
    imgs = load_images(read_manifest(man))
    assert len(imgs) == 3 and all(i.shape == (3, 16, 20) for i in imgs)
    assert all(i.min() >= 0 and i.max() <= 1 and i.std() > 0.01 for i in imgs)
    again = synth_corpus(tmp_path / "t", 3, (16, 20), 3, 1)
    assert [p.read_bytes() for p in read_manifest(man)] == [p.read_bytes() for p in read_manifest(again)]
