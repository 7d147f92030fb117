"""Deterministic synthetic change-detection scenes.

Sources are textured backgrounds with a few resident blocks. Changed pairs
jitter the source photometrically and paint opaque rectangles/disks of a
contrasting colour; the mask is exactly the painted footprint.
"""

from __future__ import annotations

import json
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .core import ImageGrid, PairSample, save_image, save_mask
from .errors import Collision, PackingError, ParamError
from .pseudopair import PhotometricParams, parametric_transform

TEXTURES = ("noise", "checker", "gradient")
BUCKETS = ("unchange", "small", "large")
LARGE_CHANGE_FRACTION = 0.30
AREA_TOLERANCE = 0.02


@dataclass
class SynthConfig:
    image_size: int = 64
    n_train_sources: int = 200
    n_val_sources: int = 16
    n_test_pairs: int = 90
    # per-bucket (lo, hi) requested area fractions; the margins around 0.30
    # keep the +-2% packing tolerance from crossing the bucket boundary
    change_area_fractions: tuple = ((0.0, 0.0), (0.05, 0.26), (0.34, 0.60))
    textures: tuple = TEXTURES
    seed: int = 0

    def __post_init__(self):
        self.change_area_fractions = tuple(tuple(float(v) for v in r) for r in self.change_area_fractions)
        self.textures = tuple(self.textures)
        if len(self.change_area_fractions) != len(BUCKETS):
            raise ParamError("need one fraction range per bucket")
        for lo, hi in self.change_area_fractions:
            if not (0.0 <= lo <= hi < 1.0):
                raise ParamError(f"bad fraction range ({lo}, {hi})")
        if self.image_size < 8 or self.image_size % 8:
            raise ParamError("image_size must be a positive multiple of 8")
        unknown = set(self.textures) - set(TEXTURES)
        if unknown or not self.textures:
            raise ParamError(f"unknown textures {sorted(unknown)}")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParamError(f"unknown synth config keys {sorted(unknown)}")
        return cls(**d)


def _rng(*keys) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in keys])


def _palette(rng, n=2):
    return rng.uniform(0.15, 0.85, size=(n, 3))


def _value_noise(rng, size) -> np.ndarray:
    acc = np.zeros((size, size))
    amp = 1.0
    for cells in (4, 8, 16):
        coarse = rng.random((cells + 1, cells + 1))
        acc += amp * ndimage.zoom(coarse, size / (cells + 1), order=1)[:size, :size]
        amp *= 0.5
    acc -= acc.min()
    return acc / max(acc.max(), 1e-9)


def _texture(kind, rng, size) -> np.ndarray:
    c = _palette(rng)
    if kind == "noise":
        t = _value_noise(rng, size)
    elif kind == "checker":
        period = int(rng.integers(6, 17))
        yy, xx = np.mgrid[:size, :size]
        t = (((yy // period) + (xx // period)) % 2).astype(float)
        t = 0.8 * t + 0.2 * _value_noise(rng, size)
    else:
        angle = rng.uniform(0, 2 * np.pi)
        yy, xx = np.mgrid[:size, :size] / (size - 1)
        t = np.cos(angle) * xx + np.sin(angle) * yy
        t = (t - t.min()) / max(np.ptp(t), 1e-9)
        t = 0.85 * t + 0.15 * _value_noise(rng, size)
    return c[0] + t[:, :, None] * (c[1] - c[0])


def _rect(size, y, x, h, w):
    m = np.zeros((size, size), dtype=bool)
    m[max(y, 0):y + h, max(x, 0):x + w] = True
    return m


def _disk(size, cy, cx, r):
    yy, xx = np.mgrid[:size, :size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def generate_source(config: SynthConfig, id: int) -> ImageGrid:
    """Textured scene with a few resident blocks, deterministic in (seed, id)."""
    rng = _rng(config.seed, 1, id)
    size = config.image_size
    kind = config.textures[int(rng.integers(len(config.textures)))]
    img = _texture(kind, rng, size)
    for _ in range(int(rng.integers(2, 5))):
        h, w = rng.integers(size // 10, size // 4, size=2)
        y, x = rng.integers(0, size - h), rng.integers(0, size - w)
        img[_rect(size, y, x, h, w)] = rng.uniform(0.15, 0.85, size=3)
    return ImageGrid(np.clip(img, 0.0, 1.0).astype(np.float32), "unit")


def _random_shape(rng, size, target_px):
    side = max(2.0, np.sqrt(max(target_px, 4)))
    if rng.random() < 0.5:
        aspect = rng.uniform(0.6, 1.6)
        h = int(np.clip(round(side * aspect), 2, size))
        w = int(np.clip(round(target_px / h), 2, size))
        y, x = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
        return _rect(size, y, x, h, w)
    r = max(1.5, np.sqrt(target_px / np.pi))
    cy, cx = rng.uniform(0, size, size=2)
    return _disk(size, cy, cx, r)


def _contrasting_colour(rng, region: np.ndarray) -> np.ndarray:
    mean = region.mean(axis=0)
    for _ in range(50):
        colour = np.where(mean < 0.5, rng.uniform(0.65, 0.95, 3), rng.uniform(0.05, 0.35, 3))
        if np.abs(region - colour).max(axis=1).min() >= 0.05:
            return colour
    raise PackingError("no contrasting colour found for inserted shape")


def make_changed_pair(src: ImageGrid, area_fraction: float, seed, name: str = "") -> PairSample:
    """Jitter ``src`` and paint opaque shapes covering ``area_fraction`` +- 2%."""
    if not (0.0 <= area_fraction < 1.0):
        raise ParamError(f"area_fraction {area_fraction} outside [0, 1)")
    rng = np.random.default_rng(seed)
    size = src.height
    total = src.height * src.width
    jitter = PhotometricParams.sample(rng, apply_prob=1.0)
    background = parametric_transform(src, jitter, int(rng.integers(2**63))).data.copy()

    mask = np.zeros((src.height, src.width), dtype=bool)
    if area_fraction > 0:
        target = area_fraction * total
        tol = AREA_TOLERANCE * total
        attempts = 0
        while mask.sum() < target - tol:
            attempts += 1
            if attempts > 2000:
                raise PackingError(f"could not pack {area_fraction:.3f} of the image")
            deficit = target - mask.sum()
            want = deficit if deficit < total * 0.15 else rng.uniform(0.3, 1.0) * min(deficit, total * 0.25)
            shape = _random_shape(rng, size, want)
            grown = mask | shape
            if grown.sum() > target + tol or grown.sum() == mask.sum():
                continue
            mask = grown
    t2 = background.copy()
    # paint per connected component so neighbouring shapes can differ in colour
    labels, n = ndimage.label(mask)
    for k in range(1, n + 1):
        comp = labels == k
        t2[comp] = _contrasting_colour(rng, background[comp])
    mask_grid = ImageGrid(mask.astype(np.float32), "unit")
    return PairSample(src, ImageGrid(t2.astype(np.float32), "unit"), mask_grid, "synthetic", name)


def bucket_of(fraction: float) -> str:
    if fraction <= 0.0:
        return "unchange"
    return "small" if fraction < LARGE_CHANGE_FRACTION else "large"


def test_plan(config: SynthConfig) -> list:
    """(bucket, requested fraction, pair seed) for every test pair."""
    per, extra = divmod(config.n_test_pairs, len(BUCKETS))
    rng = _rng(config.seed, 2)
    plan = []
    for b, bucket in enumerate(BUCKETS):
        lo, hi = config.change_area_fractions[b]
        for _ in range(per + (1 if b < extra else 0)):
            plan.append((bucket, float(rng.uniform(lo, hi)), int(rng.integers(2**63))))
    return plan


def generate_dataset(config: SynthConfig, out_dir, force: bool = False) -> dict:
    """Write train/val single sources and test pairs in the flat layout.

    Layout: ``train/A``, ``val/A`` (sources only), ``test/{A,B,label}``, plus
    ``manifest.json`` recording every seed and bucket.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise Collision(f"{out} is not empty (use force)")
        # only our own outputs are removed; unrelated files (run logs) stay
        for split in ("train", "val", "test"):
            if (out / split).exists():
                shutil.rmtree(out / split)
        (out / "manifest.json").unlink(missing_ok=True)
    manifest = {"config": asdict(config), "train": [], "val": [], "test": []}
    next_id = 0
    for split, count in (("train", config.n_train_sources), ("val", config.n_val_sources)):
        for _ in range(count):
            name = f"src_{next_id:05d}.png"
            save_image(generate_source(config, next_id), out / split / "A" / name)
            manifest[split].append({"name": name, "source_id": next_id})
            next_id += 1
    for j, (bucket, fraction, seed) in enumerate(test_plan(config)):
        name = f"pair_{j:05d}.png"
        pair = make_changed_pair(generate_source(config, next_id), fraction, seed, name)
        save_image(pair.t1, out / "test" / "A" / name)
        save_image(pair.t2, out / "test" / "B" / name)
        save_mask(pair.mask, out / "test" / "label" / name)
        manifest["test"].append({
            "name": name,
            "source_id": next_id,
            "bucket": bucket,
            "requested_fraction": fraction,
            "actual_fraction": float(pair.mask.data.mean()),
            "seed": seed,
        })
        next_id += 1
    (out / "test" / "provenance.json").write_text(json.dumps({"provenance": "synthetic"}))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def regenerate(manifest_path, out_dir, force: bool = False) -> dict:
    manifest = json.loads(Path(manifest_path).read_text())
    return generate_dataset(SynthConfig.from_dict(manifest["config"]), out_dir, force)
