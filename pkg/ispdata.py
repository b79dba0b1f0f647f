"""
Synthetic raw corpus, a simplified ISP, the block-DCT JPEG surrogate, the
quantization-error map, and image file IO.

Images are (1, 3, H, W): raw as float64 in [0, 1], sRGB as uint8.
"""
import csv
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
from scipy.fft import dctn, idctn

from console import fields, log
from errors import CorpusError, ShapeError
from schemas import CorpusConfig, IspConfig

RECIPES = ("flat", "gradient", "perlin_texture", "overexposed_mix", "composite_halves")

# Per-recipe generation ranges
RECIPE_PROFILES = {
    "flat":             {"level": (0.05, 0.90)},
    "gradient":         {},
    "perlin_texture":   {"cells": (2, 6), "octaves": 4, "tint": (0.55, 1.0)},
    "overexposed_mix":  {"cells": (2, 4), "octaves": 3, "tint": (0.7, 1.0), "exposure": (1.5, 2.5)},
    "composite_halves": {"level": (0.15, 0.6), "cells": (8, 12), "octaves": 2, "tint": (0.55, 1.0)},
}

# Standard luminance quantization table (JPEG Annex K)
LUMA_TABLE = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99],
], dtype=np.float64)

BLOCK = 8
RAW_MAX = 65535


# ─────────────────────────────────────────────
# SYNTHETIC RAW
# ─────────────────────────────────────────────
def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6 - 15) + 10)


def _perlin(rng: np.random.Generator, h: int, w: int, cells: int) -> np.ndarray:
    """One octave of gradient noise on a (cells+1)^2 lattice, roughly in [-0.7, 0.7]."""
    angles = rng.uniform(0.0, 2 * np.pi, (cells + 1, cells + 1))
    gx, gy = np.cos(angles), np.sin(angles)
    ys = np.arange(h) * cells / h
    xs = np.arange(w) * cells / w
    yi, xi = ys.astype(int)[:, None], xs.astype(int)[None, :]
    fy, fx = (ys - np.floor(ys))[:, None], (xs - np.floor(xs))[None, :]

    def corner(a, b):
        return gx[yi + a, xi + b] * (fx - b) + gy[yi + a, xi + b] * (fy - a)

    u, v = _fade(fx), _fade(fy)
    top = corner(0, 0) * (1 - u) + corner(0, 1) * u
    bottom = corner(1, 0) * (1 - u) + corner(1, 1) * u
    return top * (1 - v) + bottom * v


def _texture(rng: np.random.Generator, h: int, w: int, base: int, octaves: int) -> np.ndarray:
    out = np.zeros((h, w))
    for o in range(octaves):
        out += 0.5 ** o * _perlin(rng, h, w, base * 2 ** o)
    lo, hi = out.min(), out.max()
    return (out - lo) / (hi - lo) if hi > lo else np.zeros_like(out)


def _tinted(rng: np.random.Generator, plane: np.ndarray, tint: tuple) -> np.ndarray:
    gains = rng.uniform(*tint, size=3)
    return gains[:, None, None] * plane[None]


def synth_raw(seed: int, width: int, height: int, recipe: str) -> np.ndarray:
    """Deterministic synthetic linear raw image for `recipe`."""
    if recipe not in RECIPE_PROFILES:
        raise ValueError(f"unknown recipe {recipe!r}; expected one of {RECIPES}")
    if width % 32 or height % 32 or width <= 0 or height <= 0:
        raise ShapeError(f"synthetic images need extents that are multiples of 32, got {width}x{height}", "image extents")
    profile = RECIPE_PROFILES[recipe]
    rng = np.random.default_rng([int(seed), RECIPES.index(recipe)])
    h, w = height, width

    if recipe == "flat":
        img = np.broadcast_to(rng.uniform(*profile["level"], size=3)[:, None, None], (3, h, w))

    elif recipe == "gradient":
        ramp = np.linspace(0.0, 1.0, w)[None, :].repeat(h, axis=0)
        ramp = np.rot90(ramp, k=int(rng.integers(4)))
        if ramp.shape != (h, w):
            ramp = np.linspace(0.0, 1.0, h)[:, None].repeat(w, axis=1)
        img = np.broadcast_to(ramp, (3, h, w))

    elif recipe == "perlin_texture":
        base = int(rng.integers(profile["cells"][0], profile["cells"][1] + 1))
        img = _tinted(rng, _texture(rng, h, w, base, profile["octaves"]), profile["tint"])

    elif recipe == "overexposed_mix":
        base = int(rng.integers(profile["cells"][0], profile["cells"][1] + 1))
        exposure = rng.uniform(*profile["exposure"])
        img = _tinted(rng, _texture(rng, h, w, base, profile["octaves"]) * exposure, profile["tint"])

    else:  # composite_halves: flat left, high-frequency texture right
        half = w // 2
        level = rng.uniform(*profile["level"], size=3)
        base = int(rng.integers(profile["cells"][0], profile["cells"][1] + 1))
        texture = _tinted(rng, _texture(rng, h, w - half, base, profile["octaves"]), profile["tint"])
        img = np.concatenate([np.broadcast_to(level[:, None, None], (3, h, half)), texture], axis=2)

    return np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)[None].copy()


# ─────────────────────────────────────────────
# ISP
# ─────────────────────────────────────────────
@dataclass(frozen=True)
class IspStages:
    balanced: np.ndarray     # W ⊙ x
    corrected: np.ndarray    # C · (W ⊙ x), clamped to [0, 1]
    toned: np.ndarray        # tone curve output in [0, 1], unquantized
    srgb: np.ndarray         # uint8


def render(x: np.ndarray, cfg: IspConfig) -> IspStages:
    """Run the ISP and keep every intermediate stage."""
    gains = np.asarray(cfg.gains, dtype=np.float64)[None, :, None, None]
    balanced = x * gains
    corrected = np.clip(np.einsum("ij,bjhw->bihw", np.asarray(cfg.ccm, dtype=np.float64), balanced), 0.0, 1.0)
    toned = corrected ** cfg.gamma
    top = cfg.levels - 1
    srgb = np.floor(top * toned + 0.5) * (255.0 / top)
    return IspStages(balanced, corrected, toned, np.floor(srgb + 0.5).astype(np.uint8))


def apply_isp(x: np.ndarray, cfg: IspConfig) -> np.ndarray:
    return render(x, cfg).srgb


def quant_error_map(x: np.ndarray, cfg: IspConfig) -> np.ndarray:
    """
    Information lost to sRGB quantization, as a (1, 1, H, W) map.

    With w = x / (y + eps) and e = |w * (ŷ + eps) - x|, computed as
    |x * (ŷ - y) / (y + eps)| so an unquantized pipeline gives exact zeros.
    y and ŷ are on the [0, 1] scale.
    """
    stages = render(x, cfg)
    y = stages.toned
    if cfg.quantize:
        top = cfg.levels - 1
        y_hat = np.floor(top * y + 0.5) / top
    else:
        y_hat = y
    e = np.abs(x * (y_hat - y) / (y + cfg.epsilon))
    return e.max(axis=1, keepdims=True)


# ─────────────────────────────────────────────
# JPEG SURROGATE
# ─────────────────────────────────────────────
def quality_table(quality: int) -> np.ndarray:
    """IJG quality scaling of the luminance table."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must be in [1, 100], got {quality}")
    scale = 5000 / quality if quality < 50 else 200 - 2 * quality
    return np.clip(np.floor((LUMA_TABLE * scale + 50) / 100), 1, 255)


def degrade_srgb(y: np.ndarray, quality: int) -> np.ndarray:
    """8x8 block DCT, per-channel quantization with the scaled table, inverse DCT, back to 8 bits."""
    table = quality_table(quality)
    b, c, h, w = y.shape
    ph, pw = (-h) % BLOCK, (-w) % BLOCK
    img = np.pad(y.astype(np.float64) - 128.0, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    H, W = img.shape[-2:]
    blocks = img.reshape(b, c, H // BLOCK, BLOCK, W // BLOCK, BLOCK).transpose(0, 1, 2, 4, 3, 5)
    coeffs = dctn(blocks, axes=(-2, -1), norm="ortho")
    coeffs = np.round(coeffs / table) * table
    blocks = idctn(coeffs, axes=(-2, -1), norm="ortho")
    img = blocks.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, H, W)[:, :, :h, :w]
    return np.clip(np.round(img + 128.0), 0, 255).astype(np.uint8)


# ─────────────────────────────────────────────
# IMAGE IO
# ─────────────────────────────────────────────
def _to_hwc(img: np.ndarray) -> np.ndarray:
    return cv2.cvtColor(np.ascontiguousarray(img[0].transpose(1, 2, 0)), cv2.COLOR_RGB2BGR)


def _from_hwc(img: np.ndarray) -> np.ndarray:
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).transpose(2, 0, 1)[None]


def _read(path: str | Path, dtype) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FileNotFoundError(f"cannot read image {path}")
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"{path} is not a 3-channel image", "channels")
    if img.dtype != dtype:
        raise ShapeError(f"{path} stores {img.dtype}, expected {np.dtype(dtype)}", "bit depth")
    return _from_hwc(img)


def write_raw(path: str | Path, x: np.ndarray):
    """16-bit-per-channel PNG."""
    q = np.floor(np.clip(x, 0.0, 1.0) * RAW_MAX + 0.5).astype(np.uint16)
    cv2.imwrite(str(path), _to_hwc(q))


def read_raw(path: str | Path) -> np.ndarray:
    return _read(path, np.uint16).astype(np.float64) / RAW_MAX


def write_srgb(path: str | Path, y: np.ndarray):
    cv2.imwrite(str(path), _to_hwc(y.astype(np.uint8)))


def read_srgb(path: str | Path) -> np.ndarray:
    return _read(path, np.uint8)


def write_pgm(path: str | Path, m: np.ndarray) -> float:
    """Write a non-negative map as a 16-bit PGM scaled to its maximum; returns the scale."""
    plane = np.asarray(m, dtype=np.float64).reshape(m.shape[-2:])
    peak = float(plane.max())
    scale = RAW_MAX / peak if peak > 0 else 0.0
    cv2.imwrite(str(path), np.floor(plane * scale + 0.5).astype(np.uint16))
    return scale


def write_csv(path: str | Path, header: list[str], rows: list[list]):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


# ─────────────────────────────────────────────
# CORPUS
# ─────────────────────────────────────────────
@dataclass(frozen=True)
class CorpusItem:
    name: str
    raw_path: Path
    srgb_path: Path

    def load(self) -> tuple[np.ndarray, np.ndarray]:
        return read_raw(self.raw_path), read_srgb(self.srgb_path)


def item_seed(corpus_seed: int, index: int) -> int:
    return corpus_seed * 1_000_003 + index


def write_corpus(out_dir: str | Path, cfg: CorpusConfig, isp: IspConfig) -> list[CorpusItem]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    items, manifest = [], []
    for i in range(cfg.count):
        recipe = cfg.recipes[i % len(cfg.recipes)]
        name = f"{i:04d}_{recipe}"
        x = synth_raw(item_seed(cfg.seed, i), cfg.width, cfg.height, recipe)
        y = apply_isp(x, isp)
        item = CorpusItem(name, out / f"{name}_raw.png", out / f"{name}_srgb.png")
        write_raw(item.raw_path, x)
        write_srgb(item.srgb_path, y)
        items.append(item)
        manifest.append([name, recipe, item_seed(cfg.seed, i), cfg.width, cfg.height])
        log("Data", fields(image=name, recipe=recipe, mean=float(x.mean())))
    write_csv(out / "manifest.csv", ["name", "recipe", "seed", "width", "height"], manifest)
    return items


def list_corpus(corpus_dir: str | Path) -> list[CorpusItem]:
    root = Path(corpus_dir)
    if not root.is_dir():
        raise CorpusError(f"corpus directory {root} does not exist")
    items = []
    for raw_path in sorted(root.glob("*_raw.png")):
        name = raw_path.name[: -len("_raw.png")]
        srgb_path = root / f"{name}_srgb.png"
        if srgb_path.exists():
            items.append(CorpusItem(name, raw_path, srgb_path))
    if not items:
        raise CorpusError(f"corpus directory {root} holds no raw/sRGB pairs")
    return items
