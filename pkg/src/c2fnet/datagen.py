"""Deterministic synthetic camouflage data: textured backgrounds with a
low-contrast object whose mask coverage is driven into a configured range.

All randomness comes from counter-based 64-bit hashing of
(seed, index, stream tag), so samples are reproducible bit-for-bit and can
be generated in any order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .png_io import read_png, write_png

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)

TAG_BACKGROUND = 1
TAG_CHANNEL = 2
TAG_OBJECT = 3
TAG_CENTER = 4
TAG_SAMPLE = 5


class GenerationError(RuntimeError):
    """Sample generation could not satisfy its constraints."""


class DataError(RuntimeError):
    """A stored sample violates the dataset contract."""


def splitmix64(x):
    """Counter-based 64-bit hash; accepts scalars or uint64 arrays.

    Relies on modular uint64 wraparound, so overflow is expected.
    """
    with np.errstate(over="ignore"):
        z = np.asarray(x, dtype=np.uint64) + _GOLDEN
        z = (z ^ (z >> np.uint64(30))) * _MIX1
        z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))


def mix(*parts) -> np.uint64:
    h = np.uint64(0)
    for p in parts:
        h = splitmix64(h ^ np.uint64(int(p) & 0xFFFFFFFFFFFFFFFF))
    return np.uint64(h)


def _hash_unit(x) -> np.ndarray:
    """Map uint64 hashes to floats in [0, 1)."""
    return (splitmix64(x) >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def value_noise(size: int, cell: int, seed, octaves: int = 4, persistence: float = 0.5) -> np.ndarray:
    """Multi-octave value noise in [0, 1): bilinear interpolation of hashed
    integer lattices, cell size halving per octave."""
    out = np.zeros((size, size))
    total = 0.0
    amp = 1.0
    for octave in range(octaves):
        c = max(1, cell >> octave)
        gsize = size // c + 2
        gy, gx = np.meshgrid(np.arange(gsize, dtype=np.uint64), np.arange(gsize, dtype=np.uint64), indexing="ij")
        key = gy * np.uint64(0x100000001) + gx
        lattice = _hash_unit(key ^ np.uint64(mix(seed, octave)))
        pos = np.arange(size) / c
        i0 = pos.astype(int)
        frac = pos - i0
        fy = frac[:, None]
        fx = frac[None, :]
        y0 = i0[:, None]
        x0 = i0[None, :]
        v = (
            lattice[y0, x0] * (1 - fy) * (1 - fx)
            + lattice[y0, x0 + 1] * (1 - fy) * fx
            + lattice[y0 + 1, x0] * fy * (1 - fx)
            + lattice[y0 + 1, x0 + 1] * fy * fx
        )
        out += amp * v
        total += amp
        amp *= persistence
    return out / total


@dataclass(frozen=True)
class SynthConfig:
    image_size: int = 64
    contrast_delta: float = 0.35
    texture_scale: int = 16
    coverage: tuple[float, float] = (0.2, 0.3)
    seed: int = 0
    count: int = 8

    def __post_init__(self):
        if self.image_size % 32:
            raise ValueError(f"image_size must be divisible by 32, got {self.image_size}")
        if not (0.0 < self.contrast_delta <= 1.0):
            raise ValueError("contrast_delta must lie in (0, 1]")
        lo, hi = self.coverage
        if not (0.0 < lo < hi < 1.0):
            raise ValueError(f"coverage range {self.coverage} must satisfy 0 < lo < hi < 1")
        if self.texture_scale < 1 or self.count < 1:
            raise ValueError("texture_scale and count must be positive")


@dataclass
class Sample:
    id: str
    image: np.ndarray  # (h, w, 3) uint8
    mask: np.ndarray  # (h, w) uint8, values {0, 255}
    seed: int


def _object_field(size: int, scale: int, seed) -> np.ndarray:
    """Smooth blob potential: value noise shaped by a random radial bump."""
    noise = value_noise(size, scale * 2, mix(seed, TAG_OBJECT))
    cy = 0.3 + 0.4 * float(_hash_unit(mix(seed, TAG_CENTER, 0)))
    cx = 0.3 + 0.4 * float(_hash_unit(mix(seed, TAG_CENTER, 1)))
    yy, xx = np.meshgrid(np.arange(size) / size, np.arange(size) / size, indexing="ij")
    bump = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2)) / (2 * 0.22**2))
    return noise * bump


def _mask_for_coverage(field: np.ndarray, lo: float, hi: float, index: int) -> np.ndarray:
    t_lo, t_hi = 0.0, float(field.max())
    for _ in range(32):
        t = 0.5 * (t_lo + t_hi)
        cov = float((field >= t).mean())
        if cov > hi:
            t_lo = t
        elif cov < lo:
            t_hi = t
        else:
            return field >= t
    raise GenerationError(f"sample {index}: no threshold reaches coverage [{lo}, {hi}]")


def generate_sample(cfg: SynthConfig, index: int) -> Sample:
    sample_seed = mix(cfg.seed, index, TAG_SAMPLE)
    size = cfg.image_size

    lum = value_noise(size, cfg.texture_scale, mix(sample_seed, TAG_BACKGROUND))
    channels = []
    for ch in range(3):
        tint = value_noise(size, cfg.texture_scale, mix(sample_seed, TAG_CHANNEL, ch))
        channels.append(np.clip(0.15 + 0.7 * (0.85 * lum + 0.15 * tint), 0.0, 1.0))
    image = np.stack(channels, axis=-1)

    mask = _mask_for_coverage(_object_field(size, cfg.texture_scale, sample_seed), *cfg.coverage, index)

    direction = 1.0 if image[mask].mean() <= 0.5 else -1.0
    image[mask] = np.clip(image[mask] + direction * cfg.contrast_delta, 0.0, 1.0)

    return Sample(
        id=f"{index:04d}",
        image=np.round(image * 255.0).astype(np.uint8),
        mask=(mask.astype(np.uint8) * 255),
        seed=int(sample_seed),
    )


def write_dataset(cfg: SynthConfig, out_dir) -> str:
    """Write images/, masks/, and manifest.tsv under out_dir; returns the
    manifest path. Re-running with the same config is byte-idempotent."""
    out_dir = os.fspath(out_dir)
    img_dir = os.path.join(out_dir, "images")
    mask_dir = os.path.join(out_dir, "masks")
    try:
        os.makedirs(img_dir, exist_ok=True)
        os.makedirs(mask_dir, exist_ok=True)
        rows = []
        for index in range(cfg.count):
            sample = generate_sample(cfg, index)
            write_png(os.path.join(img_dir, sample.id + ".png"), sample.image)
            write_png(os.path.join(mask_dir, sample.id + ".png"), sample.mask)
            rows.append(f"{sample.id}\timages/{sample.id}.png\tmasks/{sample.id}.png\t{sample.seed}")
        manifest = os.path.join(out_dir, "manifest.tsv")
        with open(manifest, "w", encoding="utf-8", newline="\n") as f:
            f.write("id\timage\tmask\tseed\n")
            f.write("\n".join(rows) + "\n")
    except OSError as exc:
        raise DataError(f"writing dataset under {out_dir}: {exc}") from exc
    return manifest


def read_manifest(manifest_path):
    """Rows of (id, image_path, mask_path, seed) with paths resolved."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    rows = []
    with open(manifest_path, encoding="utf-8") as f:
        header = f.readline().rstrip("\n")
        if header != "id\timage\tmask\tseed":
            raise DataError(f"{manifest_path}: unexpected manifest header {header!r}")
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DataError(f"{manifest_path}: malformed row {line!r}")
            rows.append((parts[0], os.path.join(base, parts[1]), os.path.join(base, parts[2]), int(parts[3])))
    if not rows:
        raise DataError(f"{manifest_path}: empty manifest")
    return rows


def load_pairs(manifest_path):
    """Load (id, image (3,h,w) float in [0,1], mask (1,h,w) float {0,1})."""
    out = []
    for sid, img_path, mask_path, _ in read_manifest(manifest_path):
        img = read_png(img_path)
        mask = read_png(mask_path)
        if img.ndim != 3 or img.shape[2] != 3:
            raise DataError(f"sample {sid}: image must be RGB, got shape {img.shape}")
        if mask.ndim != 2:
            raise DataError(f"sample {sid}: mask must be grayscale, got shape {mask.shape}")
        if img.shape[:2] != mask.shape:
            raise DataError(f"sample {sid}: image {img.shape[:2]} and mask {mask.shape} sizes differ")
        image = img.astype(np.float64).transpose(2, 0, 1) / 255.0
        binary = (mask >= 128).astype(np.float64)[None, :, :]
        out.append((sid, image, binary))
    return out
