"""Reconstruction + adversarial training of the pair reconstructor."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import ImageGrid, PairSample
from .errors import ParamError, ProvenanceError, ShapeError, TrainingDiverged
from .models import (ATTENTION_VARIANTS, PatchDiscriminator, Reconstructor, build_discriminator,
                     build_reconstructor, grid_to_tensor, save_reconstructor)
from .pseudopair import augment_pair

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "l_mae", "l_gan_g", "l_gan_d", "l_total")
TRAIN_CHECKPOINT_FORMAT = "cdrl-train"


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    batch_size: int = 1
    lambda_mae: float = 100.0
    epochs: int = 3  # sized for a single CPU core; raise for real datasets
    seed: int = 0
    attention_variant: str = "pseudo_pair_cbam"
    use_discriminator: bool = True
    # architecture and data knobs
    depth: int = 4
    base_width: int = 32
    disc_width: int = 32
    augment: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ParamError(f"lr must be > 0, got {self.lr}")
        if not self.lambda_mae >= 0:
            raise ParamError(f"lambda_mae must be >= 0, got {self.lambda_mae}")
        if self.batch_size < 1:
            raise ParamError(f"batch_size must be >= 1, got {self.batch_size}")
        for b in (self.beta1, self.beta2):
            if not 0 <= b < 1:
                raise ParamError(f"betas must lie in [0, 1), got {b}")
        if self.epochs < 0:
            raise ParamError("epochs must be >= 0")
        if self.attention_variant not in ATTENTION_VARIANTS:
            raise ParamError(f"unknown attention variant {self.attention_variant!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ParamError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "TrainConfig":
        d = json.loads(Path(path).read_text())
        if not isinstance(d, dict):
            raise ParamError(f"{path}: config must be a flat JSON object")
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossBreakdown:
    step: int
    l_mae: float
    l_gan_g: float
    l_gan_d: float
    l_total: float
    d_real: float = 0.0
    d_fake: float = 0.0

    def row(self) -> dict:
        return {k: getattr(self, k) for k in HISTORY_COLUMNS}


# -- losses --------------------------------------------------------------------

def mae(recon: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if recon.shape != target.shape:
        raise ShapeError(f"shapes differ: {tuple(recon.shape)} vs {tuple(target.shape)}")
    return (recon - target).abs().mean()


def mae_loss(recon: ImageGrid, target: ImageGrid) -> float:
    """Mean absolute difference over all elements."""
    if recon.shape != target.shape:
        raise ShapeError(f"shapes differ: {recon.shape} vs {target.shape}")
    return float(np.abs(recon.data.astype(np.float64) - target.data.astype(np.float64)).mean())


def gan_losses_from_logits(real_logits: torch.Tensor, fake_logits: torch.Tensor):
    """(discriminator loss, non-saturating generator loss) from logit grids.

    -log sigmoid(z) == softplus(-z) and -log(1 - sigmoid(z)) == softplus(z),
    which stays finite for any logit.
    """
    l_d = F.softplus(-real_logits).mean() + F.softplus(fake_logits).mean()
    l_g = F.softplus(-fake_logits).mean()
    return l_d, l_g


def gan_losses(disc: PatchDiscriminator, real: torch.Tensor, fake: torch.Tensor):
    return gan_losses_from_logits(disc(real), disc(fake))


def total_loss(l_gan_g, l_mae, lambda_mae: float = 100.0):
    return l_gan_g + lambda_mae * l_mae


# -- training ----------------------------------------------------------------

def _to_model_tensor(grid: ImageGrid) -> torch.Tensor:
    return grid_to_tensor(grid if grid.space == "model" else grid.to_space("model"))


def state_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


class Trainer:
    """Holds the reconstructor, discriminator, their optimizers and the data RNG."""

    def __init__(self, config: TrainConfig, channels: int = 3):
        self.config = config
        self.R: Reconstructor = build_reconstructor(
            config.seed, channels=channels, depth=config.depth, base_width=config.base_width,
            attention_variant=config.attention_variant)
        self.D: PatchDiscriminator = build_discriminator(config.seed + 1, channels=channels, base_width=config.disc_width)
        betas = (config.beta1, config.beta2)
        self.opt_r = torch.optim.Adam(self.R.parameters(), lr=config.lr, betas=betas)
        self.opt_d = torch.optim.Adam(self.D.parameters(), lr=config.lr, betas=betas)
        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        self.epoch = 0
        self.history: list = []
        self.val_history: list = []

    # one optimisation step -------------------------------------------------
    def train_step(self, pairs) -> LossBreakdown:
        """One discriminator update then one reconstructor update.

        ``l_mae`` and ``l_gan_d`` are measured before either update;
        ``l_gan_g`` is the generator loss that is backpropagated (against the
        freshly updated discriminator). ``l_total`` is recomputed from the
        recorded floats so the identity holds bit-for-bit.
        """
        if isinstance(pairs, PairSample):
            pairs = [pairs]
        for p in pairs:
            if p.provenance != "pseudo":
                raise ProvenanceError(f"training accepts only pseudo pairs, got {p.provenance!r} ({p.name})")
        cfg = self.config
        x1 = torch.cat([_to_model_tensor(p.t1) for p in pairs])
        x2 = torch.cat([_to_model_tensor(p.t2) for p in pairs])
        self.R.train()
        recon = self.R(x1, x2)
        l_mae = mae(recon, x1)

        if cfg.use_discriminator:
            real_logits = self.D(x1)
            fake_logits = self.D(recon.detach())
            l_d, _ = gan_losses_from_logits(real_logits, fake_logits)
            self.opt_d.zero_grad()
            l_d.backward()
            self.opt_d.step()
            d_real = torch.sigmoid(real_logits.detach()).mean().item()
            d_fake = torch.sigmoid(fake_logits.detach()).mean().item()

            self.D.requires_grad_(False)
            l_g = F.softplus(-self.D(recon)).mean()
            self.D.requires_grad_(True)
            loss = total_loss(l_g, l_mae, cfg.lambda_mae)
            l_gan_g, l_gan_d = l_g.item(), l_d.item()
        else:
            loss = cfg.lambda_mae * l_mae
            l_gan_g = l_gan_d = d_real = d_fake = 0.0

        self.opt_r.zero_grad()
        loss.backward()
        self.opt_r.step()

        l_mae_f = l_mae.item()
        rec = LossBreakdown(self.step, l_mae_f, l_gan_g, l_gan_d,
                            total_loss(l_gan_g, l_mae_f, cfg.lambda_mae), d_real, d_fake)
        self.step += 1
        return rec

    # epochs ----------------------------------------------------------------
    def _batches(self, pairs: Sequence[PairSample]):
        cfg = self.config
        order = self.rng.permutation(len(pairs))
        for start in range(0, len(order), cfg.batch_size):
            batch = []
            for i in order[start:start + cfg.batch_size]:
                pair = pairs[int(i)]
                if cfg.augment:
                    pair = augment_pair(pair, int(self.rng.integers(2**63)))
                batch.append(pair)
            yield batch

    def validate(self, pairs: Sequence[PairSample]) -> float:
        self.R.eval()
        total = 0.0
        with torch.no_grad():
            for p in pairs:
                x1, x2 = _to_model_tensor(p.t1), _to_model_tensor(p.t2)
                total += float(mae(self.R(x1, x2), x1))
        return total / max(len(pairs), 1)

    def run_epoch(self, pairs: Sequence[PairSample]) -> list:
        records = []
        for batch in self._batches(pairs):
            rec = self.train_step(batch)
            if not all(math.isfinite(v) for v in (rec.l_mae, rec.l_gan_g, rec.l_gan_d, rec.l_total)):
                raise TrainingDiverged(f"non-finite loss at step {rec.step}")
            records.append(rec)
        self.history.extend(records)
        self.epoch += 1
        return records

    # persistence -------------------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "format": TRAIN_CHECKPOINT_FORMAT,
            "version": 1,
            "config": self.config.to_dict(),
            "arch": self.R.arch(),
            "R": self.R.state_dict(),
            "D": self.D.state_dict(),
            "opt_r": self.opt_r.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "rng": json.dumps(self.rng.bit_generator.state),
            "step": self.step,
            "epoch": self.epoch,
            "history": [asdict(r) for r in self.history],
            "val_history": list(self.val_history),
        }

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), path)

    @classmethod
    def load(cls, path) -> "Trainer":
        state = torch.load(path, map_location="cpu", weights_only=True)
        if state.get("format") != TRAIN_CHECKPOINT_FORMAT:
            raise ParamError(f"{path}: not a training checkpoint")
        trainer = cls(TrainConfig.from_dict(state["config"]), state["arch"]["channels"])
        trainer.R.load_state_dict(state["R"])
        trainer.D.load_state_dict(state["D"])
        trainer.opt_r.load_state_dict(state["opt_r"])
        trainer.opt_d.load_state_dict(state["opt_d"])
        trainer.rng.bit_generator.state = json.loads(state["rng"])
        trainer.step = state["step"]
        trainer.epoch = state["epoch"]
        trainer.history = [LossBreakdown(**r) for r in state["history"]]
        trainer.val_history = list(state["val_history"])
        return trainer


def train_loop(pairs: Sequence[PairSample], config: TrainConfig, val_pairs: Sequence[PairSample] = (),
               out_dir=None, resume=None) -> Trainer:
    """Train for ``config.epochs`` epochs (or the remainder after ``resume``).

    With ``out_dir``: writes ``epoch_XXX.pt`` training checkpoints each
    epoch, ``best.pt`` (reconstructor with lowest validation MAE, or the
    latest one without validation pairs), ``final.pt`` and ``history.csv``.
    """
    if not pairs:
        raise ParamError("no training pairs")
    for p in pairs:
        if p.provenance != "pseudo":
            raise ProvenanceError(f"training accepts only pseudo pairs, got {p.provenance!r} ({p.name})")
    trainer = Trainer.load(resume) if resume else Trainer(config, pairs[0].t1.channels)
    out = Path(out_dir) if out_dir else None
    last_ckpt = Path(resume) if resume else None
    best = min(trainer.val_history) if trainer.val_history else math.inf

    while trainer.epoch < trainer.config.epochs:
        try:
            recs = trainer.run_epoch(pairs)
        except TrainingDiverged as exc:
            raise TrainingDiverged(str(exc), str(last_ckpt) if last_ckpt else None) from None
        val = trainer.validate(val_pairs) if val_pairs else float(np.mean([r.l_mae for r in recs]))
        trainer.val_history.append(val)
        log.info("epoch %d: l_mae=%.4f val=%.4f", trainer.epoch - 1, np.mean([r.l_mae for r in recs]), val)
        if out is not None:
            last_ckpt = out / f"epoch_{trainer.epoch - 1:03d}.pt"
            trainer.save(last_ckpt)
            if val <= best:
                save_reconstructor(trainer.R, out / "best.pt", {"epoch": trainer.epoch - 1, "val_mae": val})
        best = min(best, val)
    if out is not None:
        save_reconstructor(trainer.R, out / "final.pt", {"epoch": trainer.epoch - 1})
        write_history(trainer.history, out / "history.csv")
    trainer.R.eval()
    return trainer


def write_history(history: Sequence[LossBreakdown], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for rec in history:
            w.writerow([rec.step] + [repr(float(getattr(rec, k))) for k in HISTORY_COLUMNS[1:]])


def read_history(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [LossBreakdown(int(r["step"]), float(r["l_mae"]), float(r["l_gan_g"]),
                          float(r["l_gan_d"]), float(r["l_total"])) for r in rows]
