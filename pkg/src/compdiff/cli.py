"""Command-line entry point: ``compdiff {prepare,train,compose,eval}``.

Exit codes: 0 success, 1 internal error, 2 configuration/validation error,
3 missing state (checkpoint, dataset).
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import jsonschema
import numpy as np
import torch
from PIL import Image

from . import data_pipeline as dp
from .diffusion import SamplerConfig, sample, train
from .errors import CompDiffError, ConfigError, GeometryError, RankDeficientError, ShapeError, StateError, ValidationError
from .evaluation import (PairwiseTable, average_rank, bt_fit, format_rank_table, make_report, masked_background_ssim,
                         masked_fg_similarity)
from .experiments import pretrain_autoencoder
from .generator import ALL_INDICATORS, Ablation, BoundingBox, Indicator
from .model import PRESETS, CompositionModel, ModelConfig, load_checkpoint, save_checkpoint

log = logging.getLogger("compdiff")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_STATE = 0, 1, 2, 3
THREADS_ENV = "CONTROLCOM_MICRO_THREADS"
RESOLVED_CONFIG = "run_config.json"


@dataclass
class TrainSettings:
    epochs: int = 100
    lr: float = 1e-4
    batch: int = 8
    ae_steps: int = 400


@dataclass
class PrepareSettings:
    sources: int = 100
    image_size: int | None = None
    fg_size: int | None = None


@dataclass
class RunConfig:
    seed: int = 0
    preset: str = "tiny"
    ablation: str = Ablation.FULL.value
    model: dict | None = None
    paths: dict = field(default_factory=dict)
    train: TrainSettings = field(default_factory=TrainSettings)
    prepare: PrepareSettings = field(default_factory=PrepareSettings)
    sampler: dict = field(default_factory=lambda: asdict(SamplerConfig()))

    def model_config(self) -> ModelConfig:
        if self.model is not None:
            cfg = ModelConfig.from_dict(self.model)
        elif self.preset in PRESETS:
            cfg = PRESETS[self.preset]()
        else:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        return cfg.with_ablation(self.ablation)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(**self.sampler)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model_resolved"] = self.model_config().to_dict()
        return d


RUN_CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "preset": {"type": "string"},
        "ablation": {"enum": [a.value for a in Ablation]},
        "model": {"type": ["object", "null"]},
        "paths": {"type": "object", "additionalProperties": {"type": ["string", "null"]}},
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "batch": {"type": "integer", "minimum": 1},
                "ae_steps": {"type": "integer", "minimum": 0},
            },
        },
        "prepare": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sources": {"type": "integer", "minimum": 1},
                "image_size": {"type": ["integer", "null"], "minimum": 16},
                "fg_size": {"type": ["integer", "null"], "minimum": 4},
            },
        },
        "sampler": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ddim_steps": {"type": "integer", "minimum": 1},
                "guidance_scale": {"type": "number"},
                "eta": {"type": "number", "minimum": 0},
            },
        },
        "model_resolved": {"type": "object"},
    },
}


def _deep_update(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(path: str | None, overrides: dict) -> RunConfig:
    """Defaults, then the JSON file, then command-line flags (flags win)."""
    raw = asdict(RunConfig())
    if path:
        try:
            file_cfg = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        raw = _deep_update(raw, file_cfg)
    raw = _deep_update(raw, overrides)
    raw.pop("model_resolved", None)
    try:
        jsonschema.validate(raw, RUN_CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid config: {exc.message}") from exc
    cfg = RunConfig(seed=raw["seed"], preset=raw["preset"], ablation=raw["ablation"], model=raw["model"],
                    paths=raw["paths"], train=TrainSettings(**raw["train"]), prepare=PrepareSettings(**raw["prepare"]),
                    sampler=raw["sampler"])
    cfg.model_config()
    cfg.sampler_config()
    return cfg


def write_resolved(cfg: RunConfig, directory: Path) -> None:
    (directory / RESOLVED_CONFIG).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))


def _ensure_dir(path: str | None, what: str) -> Path:
    if not path:
        raise ConfigError(f"missing {what} directory")
    p = Path(path)
    if p.exists() and not p.is_dir():
        raise ConfigError(f"{what} path {p} exists and is not a directory")
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create {what} directory {p}: {exc}") from exc
    if not os.access(p, os.W_OK):
        raise ConfigError(f"{what} directory {p} is not writable")
    return p


def _overrides(args: argparse.Namespace, mapping: dict[str, tuple[str, ...]]) -> dict:
    out: dict = {}
    for attr, keys in mapping.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return out


COMMON = {"seed": ("seed",), "preset": ("preset",), "ablation": ("ablation",)}


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------


def cmd_prepare(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config, _overrides(args, {
        **COMMON, "sources": ("prepare", "sources"), "image_size": ("prepare", "image_size"),
        "fg_size": ("prepare", "fg_size"), "out": ("paths", "data")}))
    out = _ensure_dir(cfg.paths.get("data"), "output")
    enc = cfg.model_config().encoder
    image_size = cfg.prepare.image_size or enc.image_size
    fg_size = cfg.prepare.fg_size or enc.fg_size
    manifest = dp.build_dataset(cfg.prepare.sources, cfg.seed, out, image_size, fg_size)
    write_resolved(cfg, out)
    print(f"{len(manifest['tuples'])} tuples in {out}")
    for S in ALL_INDICATORS:
        print(f"  {S} {S.task:<15} {manifest['counts'][str(S)]}")
    print(f"manifest sha256 {dp.manifest_hash(out)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config, _overrides(args, {
        **COMMON, "epochs": ("train", "epochs"), "lr": ("train", "lr"), "batch": ("train", "batch"),
        "ae_steps": ("train", "ae_steps"), "data": ("paths", "data"), "out": ("paths", "checkpoint"),
        "resume": ("paths", "resume")}))
    data_dir = cfg.paths.get("data")
    if not data_dir or not (Path(data_dir) / "manifest.json").is_file():
        raise StateError(f"no dataset manifest under {data_dir}")
    out = _ensure_dir(cfg.paths.get("checkpoint"), "checkpoint")

    def adam(m: CompositionModel) -> torch.optim.Optimizer:
        return torch.optim.Adam(list(m.trainable_parameters().values()), lr=cfg.train.lr)

    resume = cfg.paths.get("resume")
    if resume:
        model, opt = load_checkpoint(resume, optimizer_factory=adam)
        if model.ablation != Ablation(cfg.ablation):
            raise ConfigError(f"checkpoint ablation {model.ablation.value} != requested {cfg.ablation}")
    else:
        model = CompositionModel(cfg.model_config(), seed=cfg.seed)
        opt = None
    plain = not model.ablation.uses_augmentation
    tuples = dp.load_dataset(data_dir, plain=plain)
    if tuples[0].I_c.shape[-1] != model.cfg.encoder.image_size or tuples[0].I_f.shape[-1] != model.cfg.encoder.fg_size:
        raise ConfigError("dataset image/foreground size does not match the model config")
    if not resume:
        pretrain_autoencoder(model, tuples, cfg.train.ae_steps, cfg.seed)
        opt = adam(model)
    start = model.step
    result = train(model, tuples, epochs=cfg.train.epochs, lr=cfg.train.lr, batch=cfg.train.batch, seed=cfg.seed,
                   log_path=out / "train_log.jsonl", optimizer=opt)
    with open(out / "epoch_loss.json", "a") as fh:
        for i, v in enumerate(result.loss_curve):
            fh.write(json.dumps({"epoch_index": i, "first_step": start, "loss": v}) + "\n")
    save_checkpoint(model, out, optimizer=opt, extra={"seed": cfg.seed, "ablation": model.ablation.value})
    write_resolved(cfg, out)
    print(f"trained steps {start}..{model.step - 1}; last epoch loss {result.loss_curve[-1]:.5f}; checkpoint {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# compose
# ---------------------------------------------------------------------------


def _load_image(path: str, size: int) -> torch.Tensor:
    p = Path(path)
    if not p.is_file():
        raise StateError(f"image not found: {p}")
    img = dp.read_png(p)
    if img.shape[-2:] != (size, size):
        img = torch.from_numpy(dp.resize_image(img.numpy(), (size, size)))
    return img


def cmd_compose(args: argparse.Namespace) -> int:
    cfg = resolve_config(args.config, _overrides(args, {
        "seed": ("seed",), "steps": ("sampler", "ddim_steps"), "guidance": ("sampler", "guidance_scale"),
        "eta": ("sampler", "eta"), "checkpoint": ("paths", "checkpoint"), "out": ("paths", "out")}))
    if args.all_indicators == (args.indicator is not None):
        raise ConfigError("give exactly one of --indicator or --all-indicators")
    try:
        box = BoundingBox.parse(args.box)
        indicators = list(ALL_INDICATORS) if args.all_indicators else [Indicator.parse(args.indicator)]
    except (ValueError, GeometryError) as exc:
        raise ConfigError(str(exc)) from exc
    model = load_checkpoint(cfg.paths.get("checkpoint") or "")
    out = _ensure_dir(cfg.paths.get("out"), "output")
    enc = model.cfg.encoder
    bg = _load_image(args.background, enc.image_size)
    bg = torch.from_numpy(dp.mask_out_box(bg.numpy(), box, 0.0))  # mid-grey fill in [-1, 1]
    fg = _load_image(args.foreground, enc.fg_size)
    records = []
    for S in indicators:
        trace: dict = {}
        img = sample(model, bg, fg, box, S, cfg.sampler_config(), seed=cfg.seed, trace=trace)
        path = out / f"composite_{S.illumination}{S.pose}_{S.task}.png"
        dp.write_png(path, img)
        records.append({"indicator": list(S.as_tuple()), "task": S.task, "seed": cfg.seed, "path": path.name, **trace})
        log.info("indicator %s noise sha256 %s", S, trace["noise_sha256"])
        print(f"{S} {S.task:<15} {path} noise={trace['noise_sha256'][:16]}")
    (out / "compose.json").write_text(json.dumps({"box": list(box.as_tuple()), "images": records}, indent=2))
    write_resolved(cfg, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def _read01(path: Path) -> np.ndarray:
    if not path.is_file():
        raise StateError(f"image not found: {path}")
    return (dp.read_png(path).numpy() + 1.0) / 2.0


def cmd_eval_metrics(args: argparse.Namespace) -> int:
    """Items file: JSON list of {id, background, composite, box[, foreground, object_mask]}."""
    items_path = Path(args.items)
    if not items_path.is_file():
        raise StateError(f"items file not found: {items_path}")
    try:
        items = json.loads(items_path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"items file is not valid JSON: {exc}") from exc
    root = items_path.parent
    encoder = load_checkpoint(args.checkpoint).fg_encoder.eval() if args.checkpoint else None
    ssim_rows, fg_rows = [], []
    for it in items:
        box = BoundingBox(*it["box"])
        comp = _read01(root / it["composite"])
        ssim_rows.append((it["id"], masked_background_ssim(_read01(root / it["background"]), comp, box)))
        if encoder is not None and "foreground" in it:
            fg = _read01(root / it["foreground"])
            mask = np.asarray(Image.open(root / it["object_mask"]).convert("L")) >= 128
            fg_rows.append((it["id"], masked_fg_similarity(comp, fg, box, mask, encoder)))
    reports = [make_report("masked_background_ssim", ssim_rows)]
    if fg_rows:
        reports.append(make_report("masked_fg_similarity", fg_rows, {
            "note": "toy-encoder similarity; not comparable with CLIP-based foreground scores"}))
    _emit(reports, args.out)
    return EXIT_OK


def cmd_eval_bt(args: argparse.Namespace) -> int:
    path = Path(args.csv)
    if not path.is_file():
        raise StateError(f"CSV not found: {path}")
    scores = bt_fit(PairwiseTable.from_csv(path), tol=args.tol, max_iter=args.max_iter)
    print(scores.format())
    report = make_report("bradley_terry", list(scores.as_dict().items()), {
        "normalization": "mean-zero natural-log strengths", "iterations": scores.iterations,
        "converged": scores.converged, "clamped": scores.clamped})
    _emit([report], args.out)
    return EXIT_OK


def cmd_eval_rank(args: argparse.Namespace) -> int:
    """CSV columns: rater, criterion, method, rank."""
    path = Path(args.csv)
    if not path.is_file():
        raise StateError(f"CSV not found: {path}")
    table: dict[str, dict[str, dict[str, int]]] = {}
    methods: list[str] = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                table.setdefault(row["criterion"], {}).setdefault(row["rater"], {})[row["method"]] = int(row["rank"])
            except (KeyError, ValueError) as exc:
                raise ValidationError(f"bad ranking row {row}: {exc}") from exc
            if row["method"] not in methods:
                methods.append(row["method"])
    columns = {}
    for crit, raters in table.items():
        vectors = []
        for rater, ranks in raters.items():
            if set(ranks) != set(methods):
                raise ValidationError(f"rater {rater} did not rank every method for {crit}")
            vectors.append([ranks[m] for m in methods])
        columns[crit] = average_rank(vectors)
    print(format_rank_table(methods, columns))
    reports = [make_report(f"average_rank/{c}", list(zip(methods, v.tolist()))) for c, v in columns.items()]
    _emit(reports, args.out)
    return EXIT_OK


def _emit(reports: list[dict], out: str | None) -> None:
    text = json.dumps(reports if len(reports) > 1 else reports[0], indent=2)
    if out:
        p = Path(out)
        _ensure_dir(str(p.parent), "report")
        p.write_text(text)
    else:
        print(text)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="compdiff", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, model: bool = True) -> None:
        p.add_argument("--config", help="JSON run config; flags override its values")
        p.add_argument("--seed", type=int)
        if model:
            p.add_argument("--preset", choices=sorted(PRESETS))
            p.add_argument("--ablation", choices=[a.value for a in Ablation])

    p = sub.add_parser("prepare", help="build a synthetic four-task dataset")
    common(p)
    p.add_argument("--sources", type=int)
    p.add_argument("--image-size", type=int)
    p.add_argument("--fg-size", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train a model on a prepared dataset")
    common(p)
    p.add_argument("--data")
    p.add_argument("--out", help="checkpoint directory")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--ae-steps", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compose", help="sample composites from a checkpoint")
    common(p, model=False)
    p.add_argument("--checkpoint")
    p.add_argument("--background", required=True)
    p.add_argument("--foreground", required=True)
    p.add_argument("--box", required=True, help="normalized x0,y0,x1,y1")
    p.add_argument("--indicator", help="illumination,pose bits, e.g. 1,0")
    p.add_argument("--all-indicators", action="store_true")
    p.add_argument("--steps", type=int)
    p.add_argument("--guidance", type=float)
    p.add_argument("--eta", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("eval", help="metrics and subjective-score tables")
    esub = p.add_subparsers(dest="eval_command", required=True)
    q = esub.add_parser("metrics", help="masked background SSIM / foreground similarity")
    q.add_argument("--items", required=True)
    q.add_argument("--checkpoint")
    q.add_argument("--out")
    q.set_defaults(func=cmd_eval_metrics)
    q = esub.add_parser("bt", help="Bradley-Terry scores from pairwise wins")
    q.add_argument("--csv", required=True)
    q.add_argument("--tol", type=float, default=1e-10)
    q.add_argument("--max-iter", type=int, default=10000)
    q.add_argument("--out")
    q.set_defaults(func=cmd_eval_bt)
    q = esub.add_parser("rank", help="average ranks per criterion")
    q.add_argument("--csv", required=True)
    q.add_argument("--out")
    q.set_defaults(func=cmd_eval_rank)
    return ap


def _apply_thread_cap() -> None:
    value = os.environ.get(THREADS_ENV)
    if value:
        try:
            n = int(value)
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from exc
        if n < 1:
            raise ConfigError(f"{THREADS_ENV} must be >= 1")
        torch.set_num_threads(n)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        _apply_thread_cap()
        return args.func(args)
    except StateError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STATE
    except (ConfigError, ValidationError, GeometryError, ShapeError, RankDeficientError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CompDiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001 - last-resort exit code contract
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
