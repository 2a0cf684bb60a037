import warnings

import numpy as np
import pytest


def central_diff(f, arr, h=1e-6):
    """Independent finite-difference oracle: d f / d arr, all entries."""
    flat = arr.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(arr.shape)


def max_rel_err(a, n, floor_frac=1e-3):
    a = np.ravel(a)
    n = np.ravel(n)
    floor = max(floor_frac * np.max(np.abs(n)), 1e-300)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)))


def brute_conv(x, w, b):
    """Direct-loop same-padded correlation, no vectorization."""
    n, c, h, wd = x.shape
    o, _, f, _ = w.shape
    p = (f - 1) // 2
    out = np.zeros((n, o, h, wd))
    for bi in range(n):
        for oi in range(o):
            for y in range(h):
                for xx in range(wd):
                    s = b[oi]
                    for ci in range(c):
                        for i in range(f):
                            for j in range(f):
                                yy, xj = y + i - p, xx + j - p
                                if 0 <= yy < h and 0 <= xj < wd:
                                    s += w[oi, ci, i, j] * x[bi, ci, yy, xj]
                    out[bi, oi, y, xx] = s
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_receptive_field_warnings():
    with warnings.catch_warnings():
        warnings.filterwarnings("ignore", message="input .* smaller than the receptive field")
        yield
