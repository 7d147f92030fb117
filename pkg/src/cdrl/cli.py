"""``cdrl`` command line: one subcommand per pipeline stage.

Every command writes its artifacts under ``--out`` and appends one run
manifest line to ``<out>/manifests.jsonl``. Exit codes: 0 success,
1 validation error (bad flags/config, missing upstream artifact),
2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path


from . import core, inference, metrics, pipeline, pseudopair, synthworld, training
from .errors import CDRLError, Collision, NotFound, ParamError, TrainingDiverged

log = logging.getLogger("cdrl")

MANIFEST_FILE = "manifests.jsonl"


class UpstreamMissing(CDRLError):
    """A required artifact from an earlier pipeline stage does not exist."""


def require(path, producer: str, what: str) -> Path:
    path = Path(path) if path else None
    if path is None or not path.exists():
        raise UpstreamMissing(f"no {what} at {path}; run `cdrl {producer}` first")
    return path


def prepare_out(out, force: bool) -> Path:
    out = Path(out)
    if out.exists():
        leftovers = [p for p in out.iterdir() if p.name != MANIFEST_FILE]
        if leftovers and not force:
            raise Collision(f"{out} already holds artifacts; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def artifact_hashes(out: Path) -> dict:
    return {str(p.relative_to(out)): sha256_file(p)
            for p in sorted(out.rglob("*")) if p.is_file() and p.name != MANIFEST_FILE}


def write_manifest(out: Path, command: str, config: dict, seeds: dict, inputs: dict, started: float) -> dict:
    record = {
        "command": command,
        "config": config,
        "seeds": seeds,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": str(out),
        "artifact_hashes": artifact_hashes(out),
        "started_at": datetime.fromtimestamp(started, timezone.utc).isoformat(),
        "duration_s": time.time() - started,
    }
    with open(out / MANIFEST_FILE, "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    return record


def load_json(path) -> dict:
    if not path:
        return {}
    path = Path(path)
    if not path.is_file():
        raise NotFound(f"no config file at {path}")
    data = json.loads(path.read_text())
    if not isinstance(data, dict):
        raise ParamError(f"{path}: config must be a JSON object")
    return data


def layout_of(dataset: str) -> str:
    return "flat" if dataset == "synth" else dataset


def parse_threshold(spec: str):
    if spec == "otsu":
        return "otsu", None
    method, _, value = spec.partition(":")
    if method not in ("fixed", "quantile") or not value:
        raise ParamError(f"bad --threshold {spec!r}; use otsu, fixed:T or quantile:Q")
    try:
        return method, float(value)
    except ValueError:
        raise ParamError(f"bad --threshold value {value!r}") from None


def train_config_from(args) -> training.TrainConfig:
    d = load_json(getattr(args, "config", None))
    cfg = training.TrainConfig.from_dict(d)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        overrides["epochs"] = args.epochs
    if getattr(args, "attention", None):
        overrides["attention_variant"] = args.attention
    if getattr(args, "no_discriminator", False):
        overrides["use_discriminator"] = False
    if getattr(args, "base_width", None):
        overrides["base_width"] = args.base_width
    return training.TrainConfig.from_dict({**cfg.to_dict(), **overrides})


def style_config_from(args, config_path) -> pseudopair.StyleConfig:
    d = load_json(config_path)
    cfg = pseudopair.StyleConfig.from_dict(d)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "style_epochs", None) is not None:
        overrides["epochs"] = args.style_epochs
    if getattr(args, "style_width", None):
        overrides["base_width"] = args.style_width
    return pseudopair.StyleConfig.from_dict({**asdict(cfg), **overrides})


def maybe_tile(pairs, tile: int) -> list:
    if not tile:
        return pairs
    out = []
    for pair in pairs:
        t1s = core.tile_image(pair.t1, tile, tile)
        t2s = core.tile_image(pair.t2, tile, tile)
        ms = core.tile_image(pair.mask, tile, tile) if pair.mask is not None else [(None, c) for _, c in t1s]
        for (a, (y, x)), (b, _), (m, _) in zip(t1s, t2s, ms):
            out.append(core.PairSample(a, b, m, pair.provenance, f"{pair.name}@{y},{x}"))
    return out


# -- commands ----------------------------------------------------------------

def cmd_synth(args) -> None:
    started = time.time()
    cfg = synthworld.SynthConfig.from_dict(load_json(args.config))
    overrides = {k: v for k, v in (("seed", args.seed), ("n_train_sources", args.n_train),
                                   ("n_test_pairs", args.n_test), ("image_size", args.image_size)) if v is not None}
    cfg = synthworld.SynthConfig.from_dict({**asdict(cfg), **overrides})
    out = prepare_out(args.out, args.force)
    manifest = synthworld.generate_dataset(cfg, out, force=True)
    counts = {b: sum(1 for t in manifest["test"] if t["bucket"] == b) for b in synthworld.BUCKETS}
    print(f"synthworld: {len(manifest['train'])} train sources, {len(manifest['val'])} val sources, "
          f"test buckets {counts} -> {out}")
    write_manifest(out, "synth", asdict(cfg), {"seed": cfg.seed}, {}, started)


def cmd_split(args) -> None:
    started = time.time()
    index = core.index_dataset(args.data, layout_of(args.dataset), args.split)
    seed = args.seed if args.seed is not None else 0
    split = pseudopair.random_split_domain(index, seed)
    out = prepare_out(args.out, args.force)
    names = [e.name for e in index]
    payload = {"seed": seed, "split": args.split, "t1_ids": list(split.t1_ids), "t2_ids": list(split.t2_ids),
               "t1_names": [names[i] for i in split.t1_ids], "t2_names": [names[i] for i in split.t2_ids]}
    (out / "split.json").write_text(json.dumps(payload, indent=2))
    print(f"split {len(index)} images into {len(split.t1_ids)} / {len(split.t2_ids)} (seed {seed})")
    write_manifest(out, "split", {"dataset": args.dataset, "split": args.split}, {"seed": seed}, {"data": args.data}, started)


def cmd_train_style(args) -> None:
    started = time.time()
    cfg = style_config_from(args, args.config)
    index = core.index_dataset(args.data, layout_of(args.dataset), args.split)
    if args.split_file:
        sp = json.loads(require(args.split_file, "split", "domain split").read_text())
        split = pseudopair.DomainSplit(sp["seed"], tuple(sp["t1_ids"]), tuple(sp["t2_ids"]))
    else:
        split = pseudopair.random_split_domain(index, cfg.seed)
    out = prepare_out(args.out, args.force)
    sources = pipeline.load_sources(index)
    model = pseudopair.train_style_model(split, sources, cfg)
    model.save(out / "style.pt")
    (out / "style_history.json").write_text(json.dumps(model.history, indent=2))
    last = model.history[-1] if model.history else {}
    print(f"style model trained for {cfg.epochs} epochs; final cycle loss {last.get('cyc', float('nan')):.4f}")
    write_manifest(out, "train-style", asdict(cfg), {"seed": cfg.seed}, {"data": args.data}, started)


def cmd_build_pairs(args) -> None:
    started = time.time()
    style_model = None
    if args.mode in ("style", "both"):
        style_model = pseudopair.StyleModel.load(require(args.style, "train-style", "style model"))
    seed = args.seed if args.seed is not None else 0
    out = prepare_out(args.out, args.force)
    layout = layout_of(args.dataset)
    written = {}
    for k, split in enumerate(("train", "val")):
        try:
            index = core.index_dataset(args.data, layout, split)
        except (CDRLError, FileNotFoundError):
            if split == "train":
                raise
            continue
        pseudopair.build_pseudo_pairs(index, out / split, args.mode, seed + k * 10_000, style_model, force=True)
        written[split] = len(index)
    print(f"pseudo pairs ({args.mode}): {written} -> {out}")
    write_manifest(out, "build-pairs", {"mode": args.mode, "dataset": args.dataset}, {"seed": seed},
                   {"data": args.data, "style": args.style}, started)


def _pseudo_index(pairs_dir, split):
    index = core.index_dataset(require(pairs_dir, "build-pairs", "pseudo-pair directory"), "flat", split)
    if index.provenance != "pseudo":
        raise ParamError(f"{pairs_dir}: training needs pseudo pairs (found {index.provenance!r}); run `cdrl build-pairs`")
    return index


def cmd_train(args) -> None:
    started = time.time()
    cfg = train_config_from(args)
    pairs_root = require(args.pairs, "build-pairs", "pseudo-pair directory")
    train_pairs = pipeline.load_pairs(_pseudo_index(pairs_root, "train"))
    val_pairs = pipeline.load_pairs(_pseudo_index(pairs_root, "val")) if (pairs_root / "val" / "A").is_dir() else []
    resume = require(args.resume, "train", "training checkpoint") if args.resume else None
    out = Path(args.out) if resume else prepare_out(args.out, args.force)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    trainer = training.train_loop(train_pairs, cfg, val_pairs, out, resume)
    print(f"trained {trainer.step} steps over {trainer.epoch} epochs; best val MAE {min(trainer.val_history):.5f}")
    write_manifest(out, "train", cfg.to_dict(), {"seed": cfg.seed}, {"pairs": pairs_root, "resume": resume}, started)


def _eval_inputs(args):
    ckpt = require(args.checkpoint, "train", "trained checkpoint")
    model = training_model(ckpt)
    index = core.index_dataset(args.data, layout_of(args.dataset), args.split)
    pairs = maybe_tile(pipeline.load_pairs(index), args.tile)
    return ckpt, model, pairs


def training_model(ckpt):
    from .models import load_reconstructor
    return load_reconstructor(ckpt)


def cmd_infer(args) -> None:
    started = time.time()
    method, param = parse_threshold(args.threshold)
    ckpt = require(args.checkpoint, "train", "trained checkpoint")
    model = training_model(ckpt)
    index = core.index_dataset(args.data, layout_of(args.dataset), args.split)
    out = prepare_out(args.out, args.force)
    records = []
    for i in range(len(index)):
        pair = index.load_pair(i)
        t1, t2 = pair.t1.to_space("model"), pair.t2.to_space("model")
        tiles = [(t1, t2, (0, 0))]
        if args.tile:
            tiles = [(a, b, c) for (a, c), (b, _) in zip(core.tile_image(t1, args.tile, args.tile),
                                                         core.tile_image(t2, args.tile, args.tile))]
        raw_tiles, smooth_tiles = [], []
        for a, b, c in tiles:
            raw_tiles.append((inference.error_map(model, a, b).grid, c))
            smooth_tiles.append((inference.error_map(model, a, b, args.smooth).grid, c))
        raw = core.ErrorMap(core.reassemble(raw_tiles, t1.height, t1.width))
        smoothed = core.ErrorMap(core.reassemble(smooth_tiles, t1.height, t1.width))
        mask = inference.threshold_map(smoothed, method, param)
        stem = Path(pair.name).stem
        core.write_error_map(raw, out / "maps" / f"{stem}.cdrlmap")
        core.save_mask(mask.grid, out / "masks" / f"{stem}.png")
        core.save_image(inference.overlay(mask, pair.t2), out / "overlays" / f"{stem}.png")
        for grid, (y, x) in smooth_tiles:
            sub = mask.values[y:y + grid.height, x:x + grid.width]
            sub_mask = inference.ChangeMask(core.ImageGrid(sub, "unit"), mask.threshold_used, method)
            records.append({
                "id": f"{stem}@{y},{x}" if args.tile else stem,
                "score": inference.patch_score(core.ErrorMap(grid), args.top_fraction),
                "decision": inference.patch_decision(sub_mask),
                "threshold_used": mask.threshold_used,
            })
    with open(out / "patches.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    print(f"inferred {len(index)} pairs, {len(records)} patches -> {out}")
    write_manifest(out, "infer", {"threshold": args.threshold, "smooth": args.smooth, "tile": args.tile,
                                  "top_fraction": args.top_fraction}, {}, {"checkpoint": ckpt, "data": args.data}, started)


def cmd_evaluate(args) -> None:
    started = time.time()
    method, param = parse_threshold(args.threshold)
    ckpt, model, pairs = _eval_inputs(args)
    out = prepare_out(args.out, args.force)
    report = metrics.evaluate(model, pairs, method, param, args.smooth, args.top_fraction)
    (out / "eval_report.json").write_text(report.to_json())
    auc = "n/a" if report.auc is None else f"{report.auc:.4f}"
    print(f"precision {report.precision:.4f}  recall {report.recall:.4f}  IoU {report.iou:.4f}  patch AUC {auc}")
    write_manifest(out, "evaluate", {"threshold": args.threshold, "smooth": args.smooth, "tile": args.tile,
                                     "top_fraction": args.top_fraction}, {}, {"checkpoint": ckpt, "data": args.data}, started)


def cmd_loss_analysis(args) -> None:
    started = time.time()
    ckpt, model, pairs = _eval_inputs(args)
    out = prepare_out(args.out, args.force)
    report = metrics.loss_analysis(model, pairs)
    (out / "loss_analysis.json").write_text(json.dumps(report.to_dict(), indent=2))
    table = report.table(dataset=args.dataset)
    (out / "loss_analysis.txt").write_text(table + "\n")
    print(table)
    write_manifest(out, "loss-analysis", {"tile": args.tile}, {}, {"checkpoint": ckpt, "data": args.data}, started)


def cmd_ablate(args) -> None:
    started = time.time()
    root = require(args.data, "synth", "dataset")
    tcfg = train_config_from(args)
    scfg = style_config_from(args, args.style_config)
    method, param = parse_threshold(args.threshold)
    base = pipeline.ExperimentConfig(tcfg, args.mode, scfg, method, param, args.smooth, args.top_fraction)
    out = prepare_out(args.out, args.force)
    seeds = [tcfg.seed + i for i in range(args.seeds)]
    result = pipeline.ablate(root, base, seeds)
    (out / "ablation.json").write_text(json.dumps(result, indent=2))
    table = pipeline.format_ablation(result["summary"])
    (out / "ablation.txt").write_text(table + "\n")
    print(table)
    write_manifest(out, "ablate", {"train": tcfg.to_dict(), "style": asdict(scfg), "mode": args.mode,
                                   "threshold": args.threshold, "seeds": args.seeds}, {"seeds": seeds},
                   {"data": root}, started)


# -- argument parsing --------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cdrl", description="Unsupervised change detection by reconstruction loss.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True, config=True):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing artifacts")
        p.add_argument("--seed", type=int, default=None)
        if config:
            p.add_argument("--config", default=None, help="JSON config file")
        if data:
            p.add_argument("--data", required=True, help="dataset root")
            p.add_argument("--dataset", choices=("levir", "whu", "flat", "synth"), default="synth")

    def train_flags(p):
        p.add_argument("--attention", choices=("none", "plain_cbam", "pseudo_pair_cbam"), default=None)
        p.add_argument("--no-discriminator", action="store_true")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--base-width", type=int, default=None)

    def eval_flags(p):
        p.add_argument("--checkpoint", default=None, help="reconstructor checkpoint (best.pt from `cdrl train`)")
        p.add_argument("--split", default="test", choices=core.SPLITS)
        p.add_argument("--threshold", default="otsu", help="otsu | fixed:T | quantile:Q")
        p.add_argument("--smooth", type=float, default=2.0, help="Gaussian sigma before thresholding (0 = off)")
        p.add_argument("--top-fraction", type=float, default=0.01)
        p.add_argument("--tile", type=int, default=0, help="tile size (0 = whole image)")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    common(p, data=False)
    p.add_argument("--n-train", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.add_argument("--image-size", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="randomly halve a single-image collection")
    common(p, config=False)
    p.add_argument("--split", default="train", choices=core.SPLITS)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-style", help="train the single-domain style model")
    common(p)
    p.add_argument("--split", default="train", choices=core.SPLITS)
    p.add_argument("--split-file", default=None, help="split.json from `cdrl split`")
    p.add_argument("--style-epochs", type=int, default=None)
    p.add_argument("--style-width", type=int, default=None)
    p.set_defaults(func=cmd_train_style)

    p = sub.add_parser("build-pairs", help="write pseudo-unchanged pairs")
    common(p, config=False)
    p.add_argument("--mode", choices=pseudopair.PSEUDO_MODES, default="both")
    p.add_argument("--style", default=None, help="style.pt from `cdrl train-style`")
    p.set_defaults(func=cmd_build_pairs)

    p = sub.add_parser("train", help="train the reconstructor on pseudo pairs")
    common(p, data=False)
    p.add_argument("--pairs", required=True, help="directory written by `cdrl build-pairs`")
    p.add_argument("--resume", default=None, help="epoch_XXX.pt checkpoint to continue from")
    train_flags(p)
    p.set_defaults(func=cmd_train)

    for name, func, help_ in (("infer", cmd_infer, "error maps, masks and patch records"),
                              ("evaluate", cmd_evaluate, "pixel metrics and patch AUC"),
                              ("loss-analysis", cmd_loss_analysis, "reconstruction loss by change bucket")):
        p = sub.add_parser(name, help=help_)
        common(p, config=False)
        eval_flags(p)
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="attention x discriminator ablation over seeds")
    common(p)
    train_flags(p)
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--mode", choices=pseudopair.PSEUDO_MODES, default="both")
    p.add_argument("--style-config", default=None)
    p.add_argument("--style-epochs", type=int, default=None)
    p.add_argument("--style-width", type=int, default=None)
    p.add_argument("--threshold", default="otsu")
    p.add_argument("--smooth", type=float, default=2.0)
    p.add_argument("--top-fraction", type=float, default=0.01)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except TrainingDiverged as exc:
        print(f"error: {exc} (last finite checkpoint: {exc.checkpoint})", file=sys.stderr)
        return 2
    except (CDRLError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.exception("command failed")
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
