"""Netpbm I/O, patch cropping, noise synthesis and batching.

Images are float64 arrays shaped (channels, height, width) with clean
values in [0, 1]. Noise levels are given on the 0-255 scale.
"""

from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Union

import numpy as np

from .errors import (
    DataError,
    NoiseSpecError,
    PnmMagicError,
    PnmMaxvalError,
    PnmTruncatedError,
)
from .rng import Rng

log = logging.getLogger(__name__)


# --------------------------------------------------------------------------
# Netpbm

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def parse_pnm(data: bytes) -> np.ndarray:
    magic = data[:2]
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise PnmMagicError(f"unsupported Netpbm magic {magic!r} (need P5 or P6)")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if m is None:
            raise PnmTruncatedError("Netpbm header is truncated")
        fields.append(m.group(1))
        pos = m.end()
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError:
        raise PnmMagicError(f"malformed Netpbm header fields {fields!r}") from None
    if maxval != 255:
        raise PnmMaxvalError(f"maxval must be 255, got {maxval}")
    if width < 1 or height < 1:
        raise PnmMagicError(f"invalid image size {width}x{height}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PnmTruncatedError("missing whitespace after Netpbm header")
    pos += 1
    need = width * height * channels
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise PnmTruncatedError(f"pixel payload truncated: {len(payload)} of {need} bytes")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return pixels.transpose(2, 0, 1).astype(np.float64) / 255.0


def read_pnm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return parse_pnm(fh.read())


def quantize(image: np.ndarray) -> np.ndarray:
    """Float image -> uint8 via round(clamp(v, 0, 1) * 255)."""
    return np.rint(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def pnm_bytes(image: np.ndarray) -> bytes:
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise DataError(f"expected a (1|3, h, w) image, got shape {image.shape}")
    c, h, w = image.shape
    magic = "P5" if c == 1 else "P6"
    header = f"{magic}\n{w} {h}\n255\n".encode("ascii")
    return header + quantize(image).transpose(1, 2, 0).tobytes()


def write_pnm(image: np.ndarray, path) -> None:
    with open(path, "wb") as fh:
        fh.write(pnm_bytes(image))


def read_manifest(path) -> list[Path]:
    """One image path per line; blank lines and ``#`` comments are ignored.
    Relative paths resolve against the manifest's directory."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from exc
    base = path.parent
    out = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            p = Path(line)
            out.append(p if p.is_absolute() else base / p)
    return out


def load_images(paths) -> list[np.ndarray]:
    images = []
    for p in paths:
        try:
            images.append(read_pnm(p))
        except OSError as exc:
            raise DataError(f"cannot read image {p}: {exc.strerror}") from exc
    return images


# --------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class Awgn:
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise NoiseSpecError("sigma must be >= 0")

    def label(self) -> str:
        return f"sigma={self.sigma:g}"


@dataclass(frozen=True)
class MultiChannel:
    sigma_r: float
    sigma_g: float
    sigma_b: float

    def __post_init__(self):
        if min(self.sigmas) < 0:
            raise NoiseSpecError("per-channel sigmas must be >= 0")

    @property
    def sigmas(self) -> tuple[float, float, float]:
        return (self.sigma_r, self.sigma_g, self.sigma_b)

    def label(self) -> str:
        return "sigma_rgb=({:g},{:g},{:g})".format(*self.sigmas)


@dataclass(frozen=True)
class Blind:
    lo: float = 0.0
    hi: float = 55.0
    per_patch: bool = False

    def __post_init__(self):
        if not 0 <= self.lo <= self.hi:
            raise NoiseSpecError("blind range needs 0 <= lo <= hi")

    def label(self) -> str:
        return f"blind[{self.lo:g},{self.hi:g}]"


NoiseSpec = Union[Awgn, MultiChannel, Blind]


def noise_from_dict(d: dict) -> NoiseSpec:
    d = dict(d)
    kind = d.pop("kind", None)
    cls = {"awgn": Awgn, "mc": MultiChannel, "blind": Blind}.get(kind)
    if cls is None:
        raise NoiseSpecError(f"noise.kind must be one of awgn, mc, blind; got {kind!r}")
    allowed = set(cls.__dataclass_fields__)
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise NoiseSpecError(f"noise: unknown key(s) {', '.join(unknown)} for kind {kind!r}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise NoiseSpecError(f"noise: {exc}") from None


def noise_to_dict(spec: NoiseSpec) -> dict:
    kind = {Awgn: "awgn", MultiChannel: "mc", Blind: "blind"}[type(spec)]
    return {"kind": kind, **spec.__dict__}


def draw_sigmas(spec: NoiseSpec, channels: int, rng: Rng) -> np.ndarray:
    """Per-channel sigma (0-255 scale); only Blind consumes randomness."""
    if isinstance(spec, Awgn):
        return np.full(channels, float(spec.sigma))
    if isinstance(spec, MultiChannel):
        if channels != 3:
            raise NoiseSpecError(f"multi-channel noise needs 3 channels, image has {channels}")
        return np.array(spec.sigmas, dtype=np.float64)
    if isinstance(spec, Blind):
        return rng.uniform(channels, spec.lo, spec.hi)
    raise NoiseSpecError(f"unknown noise spec {spec!r}")


def add_sigma_noise(clean: np.ndarray, sigmas: np.ndarray, rng: Rng) -> np.ndarray:
    """``clean + eta`` with eta ~ N(0, (sigma_c / 255)^2) per element; no clipping."""
    if not np.any(sigmas):
        return clean.copy()
    eta = rng.normal(clean.size).reshape(clean.shape)
    scale = (np.asarray(sigmas) / 255.0).reshape((-1,) + (1,) * (clean.ndim - 1))
    return clean + eta * scale


def add_noise(clean: np.ndarray, spec: NoiseSpec, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt a (c, h, w) image. Returns (noisy, sigmas used per channel)."""
    sigmas = draw_sigmas(spec, clean.shape[0], rng)
    return add_sigma_noise(clean, sigmas, rng), sigmas


# --------------------------------------------------------------------------
# patches and batches


@dataclass
class Patch:
    clean: np.ndarray
    image_id: int
    top: int
    left: int


@dataclass
class PatchSet:
    patches: list[Patch]
    patch_size: int
    skipped: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.patches)


def crop_patches(images, patch_size: int, count_per_image: int, rng: Rng) -> PatchSet:
    patches = []
    skipped = []
    for image_id, img in enumerate(images):
        _, h, w = img.shape
        if h < patch_size or w < patch_size:
            log.warning("image %d (%dx%d) smaller than patch size %d; skipped",
                        image_id, h, w, patch_size)
            skipped.append(image_id)
            continue
        tops = rng.integers(count_per_image, 0, h - patch_size)
        lefts = rng.integers(count_per_image, 0, w - patch_size)
        for top, left in zip(tops.tolist(), lefts.tolist()):
            crop = img[:, top:top + patch_size, left:left + patch_size].copy()
            patches.append(Patch(crop, image_id, top, left))
    if not patches:
        raise DataError(f"no image is at least {patch_size}x{patch_size}; zero patches")
    return PatchSet(patches, patch_size, skipped)


def batch_iter(patches: PatchSet, spec: NoiseSpec, batch_size: int,
               rng: Rng) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of (noisy, clean) NCHW batches.

    Patch order is shuffled and fresh noise drawn on every call. All random
    draws happen eagerly in serial order, so the stream advances identically
    whether or not the caller consumes every batch.
    """
    if not patches.patches:
        raise DataError("empty patch set")
    order = rng.permutation(len(patches.patches))
    image_sigmas = {}
    if isinstance(spec, Blind) and not spec.per_patch:
        channels = patches.patches[0].clean.shape[0]
        for image_id in sorted({p.image_id for p in patches.patches}):
            image_sigmas[image_id] = draw_sigmas(spec, channels, rng)
    batches = []
    for start in range(0, len(order), batch_size):
        chosen = [patches.patches[i] for i in order[start:start + batch_size]]
        clean = np.stack([p.clean for p in chosen])
        noisy = np.empty_like(clean)
        for k, p in enumerate(chosen):
            if p.image_id in image_sigmas:
                noisy[k] = add_sigma_noise(p.clean, image_sigmas[p.image_id], rng)
            else:
                noisy[k] = add_noise(p.clean, spec, rng)[0]
        batches.append((noisy, clean))
    return iter(batches)


# --------------------------------------------------------------------------
# synthetic corpus


def synth_image(h: int, w: int, channels: int, rng: Rng) -> np.ndarray:
    """Piecewise-smooth test image: a linear ramp, a low-frequency sinusoid
    and a few constant rectangles and discs with hard edges."""
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.empty((channels, h, w))
    p = rng.uniform(6 + 4 * 8)
    ramp_dir = 2 * math.pi * p[0]
    ramp = (np.cos(ramp_dir) * xx / w + np.sin(ramp_dir) * yy / h)
    period = 8.0 + 24.0 * p[1]
    wave_dir = 2 * math.pi * p[2]
    wave = np.sin(2 * math.pi * (np.cos(wave_dir) * xx + np.sin(wave_dir) * yy) / period
                  + 2 * math.pi * p[3])
    base_level = 0.2 + 0.6 * p[4]
    wave_amp = 0.05 + 0.1 * p[5]
    shapes = []
    for k in range(4):
        q = p[6 + 8 * k: 14 + 8 * k]
        cy, cx = q[0] * h, q[1] * w
        ry, rx = (0.15 + 0.25 * q[2]) * h, (0.15 + 0.25 * q[3]) * w
        if q[4] < 0.5:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        else:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        shapes.append((mask, q[5:8]))
    for c in range(channels):
        tint = rng.uniform(1, -0.1, 0.1)[0] if channels > 1 else 0.0
        plane = base_level + tint + 0.25 * ramp + wave_amp * wave
        for mask, levels in shapes:
            plane = np.where(mask, 0.1 + 0.8 * levels[c % 3], plane)
        img[c] = plane
    return np.clip(img, 0.0, 1.0)


def synth_corpus(out_dir, count: int, size: tuple[int, int], channels: int,
                 seed: int) -> Path:
    """Write ``count`` synthetic images plus ``manifest.txt``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = Rng(seed)
    ext = "pgm" if channels == 1 else "ppm"
    names = []
    for i in range(count):
        img = synth_image(size[0], size[1], channels, rng)
        name = f"synth_{i:04d}.{ext}"
        write_pnm(img, out / name)
        names.append(name)
    manifest = out / "manifest.txt"
    manifest.write_text("".join(f"{n}\n" for n in names))
    return manifest


def image_to_tensor(image: np.ndarray) -> np.ndarray:
    return image[None].astype(np.float64)
