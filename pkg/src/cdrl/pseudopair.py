"""Pseudo-unchanged pair synthesis from single images.

Two routes turn one image into a structurally identical but photometrically
different counterpart: parametric brightness/contrast/sharpen jitter, and a
reduced single-domain CycleGAN trained on a random split of one image
collection. Geometric augmentation is applied jointly to both images.
"""

from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from scipy import ndimage

from .core import DatasetIndex, ImageGrid, PairSample, load_image, save_image
from .errors import Collision, EmptyDataset, EmptyDomain, MissingModel, ParamError, ShapeError, TrainingDiverged
from .models import PatchDiscriminator, grid_to_tensor, tensor_to_grid

log = logging.getLogger(__name__)

BRIGHTNESS_RANGE = (-0.3, 0.3)
CONTRAST_RANGE = (0.7, 1.3)
SHARPEN_RANGE = (0.0, 1.0)
PSEUDO_MODES = ("parametric", "style", "both")


@dataclass(frozen=True)
class PhotometricParams:
    brightness_delta: float = 0.0
    contrast_scale: float = 1.0
    sharpen_strength: float = 0.0
    apply_prob: float = 0.3

    def __post_init__(self):
        checks = (
            ("brightness_delta", self.brightness_delta, BRIGHTNESS_RANGE),
            ("contrast_scale", self.contrast_scale, CONTRAST_RANGE),
            ("sharpen_strength", self.sharpen_strength, SHARPEN_RANGE),
            ("apply_prob", self.apply_prob, (0.0, 1.0)),
        )
        for name, value, (lo, hi) in checks:
            if not (lo <= value <= hi):
                raise ParamError(f"{name}={value} outside [{lo}, {hi}]")

    @classmethod
    def sample(cls, rng: np.random.Generator, apply_prob: float = 0.3) -> "PhotometricParams":
        return cls(
            float(rng.uniform(*BRIGHTNESS_RANGE)),
            float(rng.uniform(*CONTRAST_RANGE)),
            float(rng.uniform(*SHARPEN_RANGE)),
            apply_prob,
        )


def _unsharp(x: np.ndarray, strength: float) -> np.ndarray:
    blurred = ndimage.gaussian_filter(x, sigma=(1.0, 1.0, 0.0), mode="reflect")
    return x + strength * (x - blurred)


def parametric_transform(img: ImageGrid, params: PhotometricParams, rng_seed=None) -> ImageGrid:
    """Brightness/contrast then unsharp masking, each firing with ``apply_prob``.

    Computed in float64 so that identity parameters reproduce the input
    exactly after the cast back to float32.
    """
    if img.space != "unit":
        raise ParamError(f"parametric_transform expects a unit-space grid, got {img.space}")
    rng = np.random.default_rng(rng_seed)
    fire_bc = rng.random() < params.apply_prob
    fire_sharp = rng.random() < params.apply_prob
    x = img.data.astype(np.float64)
    if fire_bc:
        x = np.clip(params.contrast_scale * (x - 0.5) + 0.5 + params.brightness_delta, 0.0, 1.0)
    if fire_sharp and params.sharpen_strength > 0:
        x = np.clip(_unsharp(x, params.sharpen_strength), 0.0, 1.0)
    return ImageGrid(x.astype(np.float32), "unit")


def edge_map(img: ImageGrid, threshold: float = 1.0) -> np.ndarray:
    """Binary edge map: Sobel magnitude of the contrast-normalized luminance.

    Luminance is divided by its own standard deviation first, so pure
    brightness/contrast changes leave the map unchanged away from clipping.
    """
    lum = img.data.mean(axis=2).astype(np.float64)
    std = lum.std()
    if std < 1e-8:
        return np.zeros(lum.shape, dtype=bool)
    lum = (lum - lum.mean()) / std
    mag = np.hypot(ndimage.sobel(lum, axis=0, mode="reflect"), ndimage.sobel(lum, axis=1, mode="reflect"))
    return mag > threshold


# -- domain split ------------------------------------------------------------

@dataclass(frozen=True)
class DomainSplit:
    seed: int
    t1_ids: tuple
    t2_ids: tuple

    def __post_init__(self):
        if set(self.t1_ids) & set(self.t2_ids):
            raise ParamError("domain sides overlap")


def random_split_domain(index, seed: int) -> DomainSplit:
    """Shuffle a single collection and halve it (first side gets the odd one)."""
    n = len(index)
    if n == 0:
        raise EmptyDataset("cannot split an empty collection")
    perm = np.random.default_rng(seed).permutation(n)
    half = math.ceil(n / 2)
    return DomainSplit(seed, tuple(sorted(int(i) for i in perm[:half])), tuple(sorted(int(i) for i in perm[half:])))


# -- reduced CycleGAN ----------------------------------------------------------

class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch), nn.ReLU(),
            nn.ReflectionPad2d(1), nn.Conv2d(ch, ch, 3), nn.InstanceNorm2d(ch),
        )

    def forward(self, x):
        return x + self.body(x)


class StyleGenerator(nn.Module):
    """c7s1 -> two stride-2 downs -> residual blocks -> two ups -> c7s1.

    With ``identity_init`` the network predicts a residual added to the
    input and its last conv starts at zero, so it begins as the identity;
    otherwise it is squashed with tanh as usual. Output is always in [-1, 1].
    """

    def __init__(self, channels=3, base_width=64, n_blocks=3, identity_init=True):
        super().__init__()
        w = base_width
        self.identity_init = identity_init
        layers = [nn.ReflectionPad2d(3), nn.Conv2d(channels, w, 7), nn.InstanceNorm2d(w), nn.ReLU()]
        for m in (1, 2):
            layers += [nn.Conv2d(w * m, w * m * 2, 3, stride=2, padding=1), nn.InstanceNorm2d(w * m * 2), nn.ReLU()]
        layers += [ResBlock(w * 4) for _ in range(n_blocks)]
        for m in (4, 2):
            layers += [nn.Upsample(scale_factor=2, mode="nearest"), nn.Conv2d(w * m, w * m // 2, 3, padding=1),
                       nn.InstanceNorm2d(w * m // 2), nn.ReLU()]
        self.body = nn.Sequential(*layers)
        self.head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(w, channels, 7))
        if identity_init:
            nn.init.zeros_(self.head[1].weight)
            nn.init.zeros_(self.head[1].bias)

    def forward(self, x):
        out = self.head(self.body(x))
        if self.identity_init:
            return torch.clamp(x + out, -1.0, 1.0)
        return torch.tanh(out)


@dataclass
class StyleConfig:
    epochs: int = 5
    base_width: int = 64
    cycle_lambda: float = 10.0
    lr: float = 2e-4
    seed: int = 0
    n_blocks: int = 3
    identity_init: bool = True

    def __post_init__(self):
        if self.epochs < 0 or self.base_width < 1 or self.cycle_lambda <= 0 or self.lr <= 0:
            raise ParamError(f"invalid style config {self}")

    @classmethod
    def from_dict(cls, d: dict) -> "StyleConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ParamError(f"unknown style config keys {sorted(unknown)}")
        return cls(**d)


@dataclass
class StyleModel:
    G: StyleGenerator
    F: StyleGenerator
    D_t1: PatchDiscriminator
    D_t2: PatchDiscriminator
    cycle_lambda: float = 10.0
    channels: int = 3
    config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    steps: list = field(default_factory=list)

    @classmethod
    def create(cls, config: StyleConfig, channels: int = 3) -> "StyleModel":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            gen = lambda: StyleGenerator(channels, config.base_width, config.n_blocks, config.identity_init)
            disc = lambda: PatchDiscriminator(channels, config.base_width, 3)
            return cls(gen(), gen(), disc(), disc(), config.cycle_lambda, channels, asdict(config))

    def cycle_loss(self, x, y):
        """Mean absolute cycle error ||F(G(x)) - x|| + ||G(F(y)) - y||."""
        return (self.F(self.G(x)) - x).abs().mean() + (self.G(self.F(y)) - y).abs().mean()

    def save(self, path) -> None:
        payload = {
            "format": "cdrl-style",
            "version": 1,
            "channels": self.channels,
            "cycle_lambda": self.cycle_lambda,
            "config": self.config,
            "history": self.history,
            "G": self.G.state_dict(),
            "F": self.F.state_dict(),
            "D_t1": self.D_t1.state_dict(),
            "D_t2": self.D_t2.state_dict(),
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save(payload, path)

    @classmethod
    def load(cls, path) -> "StyleModel":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        if payload.get("format") != "cdrl-style" or payload.get("version") != 1:
            raise MissingModel(f"{path}: not a style model checkpoint")
        cfg = StyleConfig.from_dict(payload["config"])
        model = cls.create(cfg, payload["channels"])
        for name in ("G", "F", "D_t1", "D_t2"):
            getattr(model, name).load_state_dict(payload[name])
        model.history = list(payload["history"])
        model.eval()
        return model

    def eval(self):
        for net in (self.G, self.F, self.D_t1, self.D_t2):
            net.eval()
        return self


def _bce(logits, target: float):
    return F.binary_cross_entropy_with_logits(logits, torch.full_like(logits, target))


def _as_images(images) -> list:
    if isinstance(images, DatasetIndex):
        return [load_image(e.t1, "model") for e in images]
    return [im if im.space == "model" else im.to_space("model") for im in images]


def train_style_model(split: DomainSplit, images, config: Optional[StyleConfig] = None) -> StyleModel:
    """Fit G: t1-side -> t2-side and F: t2-side -> t1-side on one collection.

    Generator objective per step: gan_g + gan_f + cycle_lambda * cyc with
    non-saturating logistic GAN terms. ``model.history`` holds one record
    per epoch (means), ``model.steps`` one per step; in both ``total`` is the
    sum of the three recorded components ``gan_g``, ``gan_f``, ``cyc_weighted``.
    """
    config = config or StyleConfig()
    if not split.t1_ids or not split.t2_ids:
        raise EmptyDomain(f"domain sides have sizes {len(split.t1_ids)} and {len(split.t2_ids)}")
    pool = _as_images(images)
    xs = [grid_to_tensor(pool[i]) for i in split.t1_ids]
    ys = [grid_to_tensor(pool[i]) for i in split.t2_ids]
    channels = xs[0].shape[1]
    model = StyleModel.create(config, channels)
    lam = config.cycle_lambda
    gen_params = list(model.G.parameters()) + list(model.F.parameters())
    disc_params = list(model.D_t1.parameters()) + list(model.D_t2.parameters())
    opt_g = torch.optim.Adam(gen_params, lr=config.lr, betas=(0.5, 0.999))
    opt_d = torch.optim.Adam(disc_params, lr=config.lr, betas=(0.5, 0.999))
    rng = np.random.default_rng(config.seed)
    last_good = None

    for epoch in range(config.epochs):
        sums = {"gan_g": 0.0, "gan_f": 0.0, "cyc": 0.0, "cyc_weighted": 0.0, "d_t1": 0.0, "d_t2": 0.0}
        order = rng.permutation(len(xs))
        partners = rng.integers(0, len(ys), size=len(xs))
        for i, j in zip(order, partners):
            x, y = xs[i], ys[j]
            fake_y = model.G(x)
            fake_x = model.F(y)
            gan_g = _bce(model.D_t2(fake_y), 1.0)
            gan_f = _bce(model.D_t1(fake_x), 1.0)
            cyc = (model.F(fake_y) - x).abs().mean() + (model.G(fake_x) - y).abs().mean()
            opt_g.zero_grad()
            (gan_g + gan_f + lam * cyc).backward()
            opt_g.step()

            d_t2 = _bce(model.D_t2(y), 1.0) + _bce(model.D_t2(fake_y.detach()), 0.0)
            d_t1 = _bce(model.D_t1(x), 1.0) + _bce(model.D_t1(fake_x.detach()), 0.0)
            opt_d.zero_grad()
            (d_t1 + d_t2).backward()
            opt_d.step()

            rec = {"epoch": epoch, "gan_g": gan_g.item(), "gan_f": gan_f.item(), "cyc": cyc.item()}
            rec["cyc_weighted"] = lam * rec["cyc"]
            rec["total"] = rec["gan_g"] + rec["gan_f"] + rec["cyc_weighted"]
            rec["d_t1"], rec["d_t2"] = d_t1.item(), d_t2.item()
            if not all(math.isfinite(v) for v in rec.values()):
                raise TrainingDiverged(f"style training diverged at epoch {epoch}", last_good)
            model.steps.append(rec)
            for k in sums:
                sums[k] += rec[k]
        n = len(xs)
        summary = {"epoch": epoch, **{k: v / n for k, v in sums.items()}}
        summary["total"] = summary["gan_g"] + summary["gan_f"] + summary["cyc_weighted"]
        model.history.append(summary)
        last_good = {k: copy.deepcopy(getattr(model, k).state_dict()) for k in ("G", "F")}
        log.info("style epoch %d cyc=%.4f gan_g=%.4f gan_f=%.4f", epoch, summary["cyc"], summary["gan_g"], summary["gan_f"])
    return model.eval()


def apply_style(model: StyleModel, img: ImageGrid) -> ImageGrid:
    if img.space != "model":
        raise ShapeError(f"apply_style expects a model-space grid, got {img.space}")
    if img.channels != model.channels:
        raise ShapeError(f"style model trained on {model.channels} channels, got {img.channels}")
    with torch.no_grad():
        out = model.G(grid_to_tensor(img))
    return tensor_to_grid(out, "model")


# -- pair construction -------------------------------------------------------

def make_pseudo_pair(src: ImageGrid, mode: str = "both", seed=None, style_model: Optional[StyleModel] = None,
                     params: Optional[PhotometricParams] = None, name: str = "") -> PairSample:
    """Pair ``src`` with a photometrically transformed copy of itself.

    ``params`` pins the parametric jitter; otherwise it is sampled from
    ``seed``. The result never carries a mask.
    """
    if src.space != "unit":
        raise ParamError(f"make_pseudo_pair expects a unit-space grid, got {src.space}")
    if mode not in PSEUDO_MODES:
        raise ParamError(f"unknown pseudo-pair mode {mode!r}")
    if mode in ("style", "both") and style_model is None:
        raise MissingModel(f"mode {mode!r} needs a trained style model")
    rng = np.random.default_rng(seed)
    t2 = src
    if mode in ("style", "both"):
        t2 = apply_style(style_model, src.to_space("model")).to_space("unit")
    if mode in ("parametric", "both"):
        p = params if params is not None else PhotometricParams.sample(rng)
        t2 = parametric_transform(t2, p, int(rng.integers(2**63)))
    return PairSample(src, t2, None, "pseudo", name)


GEOMETRIC_OPS = ("rot90", "hflip", "vflip", "transpose")


def _geometric(arr: np.ndarray, op: str, k: int = 1) -> np.ndarray:
    if op == "rot90":
        return np.rot90(arr, k, axes=(0, 1))
    if op == "hflip":
        return arr[:, ::-1]
    if op == "vflip":
        return arr[::-1]
    return arr.transpose(1, 0, 2)


def augment_pair(pair: PairSample, seed=None, probs: Optional[dict] = None, jitter: bool = True,
                 p: float = 0.3) -> PairSample:
    """Joint geometric augmentation plus t2-only photometric jitter.

    Each op in ``GEOMETRIC_OPS`` fires with probability ``p`` unless
    overridden in ``probs``; rot90 uses a random quarter-turn count.
    """
    rng = np.random.default_rng(seed)
    probs = {**{op: p for op in GEOMETRIC_OPS}, **(probs or {})}
    arrays = [pair.t1.data, pair.t2.data] + ([pair.mask.data] if pair.mask is not None else [])
    for op in GEOMETRIC_OPS:
        fire = rng.random() < probs[op]
        k = int(rng.integers(1, 4))
        if fire:
            arrays = [_geometric(a, op, k) for a in arrays]
    t1 = ImageGrid(arrays[0].copy(), pair.t1.space)
    t2 = ImageGrid(arrays[1].copy(), pair.t2.space)
    mask = ImageGrid(arrays[2].copy(), pair.mask.space) if pair.mask is not None else None
    if jitter:
        params = PhotometricParams.sample(rng, apply_prob=p)
        seed2 = int(rng.integers(2**63))
        unit = t2 if t2.space == "unit" else t2.to_space("unit")
        t2 = parametric_transform(unit, params, seed2).to_space(t2.space)
    return PairSample(t1, t2, mask, pair.provenance, pair.name)


def build_pseudo_pairs(sources: DatasetIndex, out_dir, mode: str = "both", seed: int = 0,
                       style_model: Optional[StyleModel] = None, force: bool = False) -> Path:
    """Write pseudo pairs for every source into the flat layout ``out/{A,B}``.

    A ``provenance.json`` marker tags the directory as pseudo pairs.
    """
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise Collision(f"{out} is not empty (use force)")
    rng = np.random.default_rng(seed)
    for entry in sources:
        src = load_image(entry.t1, "unit")
        pair = make_pseudo_pair(src, mode, int(rng.integers(2**63)), style_model, name=entry.name)
        save_image(pair.t1, out / "A" / entry.name)
        save_image(pair.t2, out / "B" / entry.name)
    (out / "provenance.json").write_text(json.dumps({"provenance": "pseudo", "mode": mode, "seed": seed}))
    return out
