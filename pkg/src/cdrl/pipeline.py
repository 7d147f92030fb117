"""End-to-end runs: sources -> pseudo pairs -> reconstructor -> reports.

Used by the ``ablate`` command and the acceptance suite; the individual CLI
commands call the same building blocks through files on disk.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import DatasetIndex, ImageGrid, PairSample, index_dataset, load_image
from .metrics import EvalReport, LossAnalysisReport, evaluate, loss_analysis
from .models import ATTENTION_VARIANTS
from .pseudopair import StyleConfig, StyleModel, make_pseudo_pair, random_split_domain, train_style_model
from .training import Trainer, TrainConfig, train_loop

log = logging.getLogger(__name__)


def load_sources(index: DatasetIndex) -> list:
    """First-timestamp images of an index, in unit space."""
    return [load_image(e.t1, "unit") for e in index]


def load_pairs(index: DatasetIndex) -> list:
    return [index.load_pair(i) for i in range(len(index))]


def fit_style(sources: Sequence[ImageGrid], config: StyleConfig) -> StyleModel:
    split = random_split_domain(sources, config.seed)
    return train_style_model(split, sources, config)


def pseudo_pairs(sources: Sequence[ImageGrid], mode: str, seed: int, style_model: Optional[StyleModel] = None,
                 names: Sequence[str] | None = None) -> list:
    rng = np.random.default_rng(seed)
    names = names or [f"src_{i:05d}" for i in range(len(sources))]
    return [make_pseudo_pair(src, mode, int(rng.integers(2**63)), style_model, name=n) for src, n in zip(sources, names)]


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    pseudo_mode: str = "both"
    style: Optional[StyleConfig] = field(default_factory=StyleConfig)
    threshold: str = "otsu"
    threshold_param: Optional[float] = None
    smooth_sigma: float = 2.0
    top_fraction: float = 0.01


@dataclass
class ExperimentResult:
    config: dict
    loss_report: LossAnalysisReport
    eval_report: EvalReport
    history: list
    seconds: float
    trainer: Optional[Trainer] = None

    def summary(self) -> dict:
        lr = self.loss_report.buckets
        return {
            "attention_variant": self.config["train"]["attention_variant"],
            "use_discriminator": self.config["train"]["use_discriminator"],
            "seed": self.config["train"]["seed"],
            "auc": self.eval_report.auc,
            "precision": self.eval_report.precision,
            "recall": self.eval_report.recall,
            "iou": self.eval_report.iou,
            "loss_un": lr["unchange"]["mean_loss"],
            "loss_small": lr["small"]["mean_loss"],
            "loss_large": lr["large"]["mean_loss"],
            "seconds": self.seconds,
        }


def run_experiment(train_pairs: Sequence[PairSample], test_pairs: Sequence[PairSample], config: ExperimentConfig,
                   val_pairs: Sequence[PairSample] = (), out_dir=None) -> ExperimentResult:
    start = time.perf_counter()
    trainer = train_loop(train_pairs, config.train, val_pairs, out_dir)
    loss_report = loss_analysis(trainer.R, test_pairs)
    eval_report = evaluate(trainer.R, test_pairs, config.threshold, config.threshold_param,
                           config.smooth_sigma, config.top_fraction)
    return ExperimentResult(
        {"train": config.train.to_dict(), "pseudo_mode": config.pseudo_mode,
         "style": asdict(config.style) if config.style else None,
         "threshold": config.threshold, "smooth_sigma": config.smooth_sigma, "top_fraction": config.top_fraction},
        loss_report, eval_report, list(trainer.history), time.perf_counter() - start, trainer,
    )


def prepare_synth_run(data_root, config: ExperimentConfig):
    """Load a synthworld dataset and build the pseudo pairs it trains on.

    Returns (train_pairs, val_pairs, test_pairs, style_model).
    """
    root = Path(data_root)
    sources = load_sources(index_dataset(root, "flat", "train"))
    val_sources = load_sources(index_dataset(root, "flat", "val")) if (root / "val" / "A").is_dir() else []
    test_pairs = load_pairs(index_dataset(root, "flat", "test"))
    style_model = None
    if config.pseudo_mode in ("style", "both"):
        style_model = fit_style(sources, replace(config.style, seed=config.train.seed))
    seed = config.train.seed
    train_pairs = pseudo_pairs(sources, config.pseudo_mode, seed, style_model)
    val_pairs = pseudo_pairs(val_sources, config.pseudo_mode, seed + 10_000, style_model) if val_sources else []
    return train_pairs, val_pairs, test_pairs, style_model


ABLATION_GRID = tuple((a, d) for a in ATTENTION_VARIANTS for d in (True, False))


def ablate(data_root, base: ExperimentConfig, seeds: Sequence[int], grid=ABLATION_GRID, on_result=None) -> dict:
    """Train every (attention, discriminator) variant for every seed.

    Pseudo pairs (and the style model) are built once per seed and shared
    by all variants of that seed.
    """
    rows = []
    for seed in seeds:
        cfg = replace(base, train=replace(base.train, seed=seed))
        train_pairs, val_pairs, test_pairs, _ = prepare_synth_run(data_root, cfg)
        for attention, disc in grid:
            run_cfg = replace(cfg, train=replace(cfg.train, attention_variant=attention, use_discriminator=disc))
            res = run_experiment(train_pairs, test_pairs, run_cfg, val_pairs)
            row = res.summary()
            rows.append(row)
            log.info("ablate seed=%d attention=%s disc=%s auc=%.4f", seed, attention, disc, row["auc"] or float("nan"))
            if on_result:
                on_result(row, res)
    return {"rows": rows, "summary": summarise_ablation(rows)}


def summarise_ablation(rows: Sequence[dict]) -> list:
    out = []
    keys = sorted({(r["attention_variant"], r["use_discriminator"]) for r in rows},
                  key=lambda k: (ATTENTION_VARIANTS.index(k[0]), not k[1]))
    for attention, disc in keys:
        aucs = np.array([r["auc"] for r in rows
                         if r["attention_variant"] == attention and r["use_discriminator"] == disc and r["auc"] is not None])
        out.append({
            "attention_variant": attention,
            "use_discriminator": disc,
            "n": int(aucs.size),
            "auc_mean": float(aucs.mean()) if aucs.size else None,
            "auc_std": float(aucs.std(ddof=1)) if aucs.size > 1 else 0.0,
        })
    return out


def format_ablation(summary: Sequence[dict]) -> str:
    lines = [f"{'attention':<18} {'disc':<5} {'n':>2}  AUC (mean +- std)"]
    for s in summary:
        auc = "n/a" if s["auc_mean"] is None else f"{100 * s['auc_mean']:.2f} +- {100 * s['auc_std']:.2f}"
        lines.append(f"{s['attention_variant']:<18} {'on' if s['use_discriminator'] else 'off':<5} {s['n']:>2}  {auc}")
    return "\n".join(lines)
