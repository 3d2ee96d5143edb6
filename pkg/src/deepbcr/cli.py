"""``deepbcr`` command line.

    deepbcr <subcommand> --config run.json [--seed N] [--out DIR] [--force]

Subcommands follow the pipeline order: synth, tissue, bulk, filter, train,
crossval, predict, eval, report. Exit codes: 0 ok, 1 runtime failure,
2 configuration error, 3 missing upstream artifact.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import __version__
from . import bagio, bulkmask, evalstats, tileproc, trainer
from . import gradcore as gc
from . import milmodels as mm
from .errors import DeepBcrError, EmptyTumorBulk

log = logging.getLogger("deepbcr")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISSING = 0, 1, 2, 3
SUBCOMMANDS = ("synth", "tissue", "bulk", "filter", "train", "crossval", "predict", "eval", "report")


class ConfigError(Exception):
    pass


class MissingArtifact(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration schema


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SynthSection(_Section):
    n_low: int = Field(ge=0)
    n_high: int = Field(ge=0)
    feature_dim: int = Field(ge=1)
    instances_per_bag: tuple[int, int] = (64, 128)
    planted_fraction: float = Field(0.1, ge=0, le=1)
    effect_size: float = Field(1.0, ge=0)
    n_test_low: int = Field(0, ge=0)
    n_test_high: int = Field(0, ge=0)
    n_nontarget_low: int = Field(0, ge=0)
    n_nontarget_high: int = Field(0, ge=0)
    second_slide_fraction: float = Field(0.0, ge=0, le=1)
    tumor_fraction: float = Field(0.75, ge=0, le=1)


class GridSection(_Section):
    patch_size_px: int = Field(896, ge=1)
    stride_px: Optional[int] = Field(None, ge=1)
    min_tissue_fraction: float = Field(0.5, ge=0, le=1)


class TissueSection(_Section):
    images: str
    downsample: int = Field(8, ge=1)
    sat_threshold: float = 0.05
    median_radius: int = Field(2, ge=0)
    grid: GridSection = GridSection()
    normalize_target: Optional[str] = None
    write_patches: bool = False


class RefineSection(_Section):
    closing_radius: int = Field(1, ge=0)
    min_component_patches: int = Field(16, ge=0)
    n_keep: int = Field(2, ge=1)
    connectivity: Literal[4, 8] = 8
    prob_threshold: float = 0.5


class BulkSection(_Section):
    cohort: str
    probs: Optional[str] = None
    refine: RefineSection = RefineSection()


class FilterSection(_Section):
    cohort: str
    masks: str


class HyperSection(_Section):
    d_h: int = Field(512, ge=1)
    n_prototypes: int = Field(4, ge=1)
    h_a: int = Field(128, ge=1)
    dropout: float = Field(0.25, ge=0, lt=1)


class TrainSection(_Section):
    lr: float = Field(gt=0)
    weight_decay: float = Field(ge=0)
    max_epochs: int = Field(ge=1)
    patience: int = Field(ge=1)
    val_fraction: float = Field(gt=0, lt=1)
    model: Literal["deep_bcr", "gated_attention"]
    hyper: HyperSection = HyperSection()


class DataSection(_Section):
    cohort: str


class CrossvalSection(_Section):
    k: int = Field(3, ge=2)


class PredictSection(_Section):
    cohort: str
    run: Optional[str] = None
    checkpoint: Optional[str] = None
    save_attention: bool = False


class EvalSection(_Section):
    predictions: str
    compare: dict[str, str] = {}
    cohort: Optional[str] = None
    targets: list[float] = [0.70, 0.80, 0.90]
    n_bootstrap: int = Field(1000, ge=1)
    threshold: Optional[float] = None
    tune_fraction: Optional[float] = Field(None, gt=0, lt=1)
    loess_span: float = Field(0.75, gt=0, le=1)


class ReportSection(_Section):
    runs: list[str]


class RunConfig(_Section):
    seed: int = 0
    out: Optional[str] = None
    synth: Optional[SynthSection] = None
    tissue: Optional[TissueSection] = None
    bulk: Optional[BulkSection] = None
    filter: Optional[FilterSection] = None
    train: Optional[TrainSection] = None
    data: Optional[DataSection] = None
    crossval: Optional[CrossvalSection] = None
    predict: Optional[PredictSection] = None
    eval: Optional[EvalSection] = None
    report: Optional[ReportSection] = None


REQUIRED_SECTIONS = {
    "synth": ("synth",),
    "tissue": ("tissue",),
    "bulk": ("bulk",),
    "filter": ("filter",),
    "train": ("train", "data"),
    "crossval": ("train", "data"),
    "predict": ("predict",),
    "eval": ("eval",),
    "report": ("report",),
}


def load_config(path: Path, command: str) -> RunConfig:
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        problems = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"])
            problems.append(f"{loc}: {err['msg']}")
        raise ConfigError("; ".join(problems)) from None
    for section in REQUIRED_SECTIONS[command]:
        if getattr(cfg, section) is None:
            raise ConfigError(f"{section}: section required by '{command}'")
    return cfg


def train_config(section: TrainSection, seed: int) -> trainer.TrainConfig:
    return trainer.TrainConfig(
        lr=section.lr,
        weight_decay=section.weight_decay,
        max_epochs=section.max_epochs,
        patience=section.patience,
        val_fraction=section.val_fraction,
        seed=seed,
        model=section.model,
        hyper=mm.Hyper(**section.hyper.model_dump()),
    )


# ---------------------------------------------------------------------------
# run directory bookkeeping


class Run:
    def __init__(self, out: Path, config_dir: Path, cfg: RunConfig, command: str):
        self.out = out
        self.config_dir = config_dir
        self.cfg = cfg
        self.command = command
        self.timings: dict[str, float] = {}

    def path(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else (self.config_dir / q)

    def require(self, p: Path, what: str) -> Path:
        if not p.exists():
            raise MissingArtifact(f"{what} not found: {p}")
        return p

    @contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        yield
        self.timings[name] = round(time.perf_counter() - t0, 3)

    def write_json(self, rel: str, doc) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        return p

    def finish(self):
        checksums = {}
        for f in sorted(self.out.rglob("*")):
            if f.is_file() and f.name != "run_manifest.json":
                checksums[f.relative_to(self.out).as_posix()] = hashlib.sha256(f.read_bytes()).hexdigest()
        manifest = {
            "tool": "deepbcr",
            "version": __version__,
            "command": self.command,
            "config": self.cfg.model_dump(mode="json"),
            "checksums": checksums,
            "timings_s": self.timings,
        }
        tmp = self.out / ".run_manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.out / "run_manifest.json")


# ---------------------------------------------------------------------------
# stages


def cmd_synth(run: Run):
    s = run.cfg.synth
    common = dict(
        feature_dim=s.feature_dim,
        instances_per_bag=tuple(s.instances_per_bag),
        planted_fraction=s.planted_fraction,
        effect_size=s.effect_size,
        seed=run.cfg.seed,
        second_slide_fraction=s.second_slide_fraction,
        tumor_fraction=s.tumor_fraction,
    )
    with run.stage("synth_train"):
        spec = bagio.SyntheticSpec(
            n_low=s.n_low, n_high=s.n_high, draw=0,
            n_nontarget_low=s.n_nontarget_low, n_nontarget_high=s.n_nontarget_high, **common,
        )
        bagio.save_synthetic(bagio.generate_synthetic_cohort(spec), run.out / "train")
    if s.n_test_low or s.n_test_high:
        with run.stage("synth_test"):
            spec = bagio.SyntheticSpec(n_low=s.n_test_low, n_high=s.n_test_high, draw=1, **common)
            bagio.save_synthetic(bagio.generate_synthetic_cohort(spec), run.out / "test")


def cmd_tissue(run: Run):
    t = run.cfg.tissue
    src = run.require(run.path(t.images), "image directory")
    images = sorted(src.glob("*.ppm"))
    if not images:
        raise MissingArtifact(f"no .ppm images in {src}")
    target = None
    if t.normalize_target:
        target = tileproc.load_lab_stats(run.require(run.path(t.normalize_target), "LabStats target"))
    spec = tileproc.TileGridSpec(**t.grid.model_dump())
    outdir = run.out / "tissue"
    outdir.mkdir(parents=True, exist_ok=True)
    summary = {}
    with run.stage("tissue"):
        for path in images:
            img = tileproc.read_ppm(path)
            mask = tileproc.tissue_mask(img, t.downsample, t.sat_threshold, t.median_radius)
            tileproc.write_pgm(outdir / f"{path.stem}_tissue.pgm", np.where(mask, 255, 0).astype(np.uint8))
            grid = tileproc.patch_grid(img.width, img.height, spec, mask, t.downsample)
            with open(outdir / f"{path.stem}_patches.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["col", "row"])
                w.writerows(grid.coords)
            summary[path.stem] = {"patches": len(grid.coords), "too_small": grid.too_small}
            if t.write_patches:
                pdir = run.out / "patches" / path.stem
                pdir.mkdir(parents=True, exist_ok=True)
                for col, row in grid.coords:
                    patch = tileproc.crop_patch(img, col, row, spec)
                    if target is not None:
                        patch = tileproc.reinhard_normalize(patch, target)
                    tileproc.write_ppm(pdir / f"{col}_{row}.ppm", patch)
    run.write_json("tissue/summary.json", summary)


def cmd_bulk(run: Run):
    b = run.cfg.bulk
    root = run.require(run.path(b.cohort), "cohort")
    cohort = bagio.load_cohort(root)
    probs_dir = run.require(run.path(b.probs) if b.probs else root / "probs", "probability directory")
    r = b.refine
    params = bulkmask.RefineParams(
        closing_radius=r.closing_radius, min_component_patches=r.min_component_patches,
        n_keep=r.n_keep, connectivity=r.connectivity, prob_threshold=r.prob_threshold,
    )
    (run.out / "masks").mkdir(parents=True, exist_ok=True)
    summary = {}
    with run.stage("bulk"):
        for bag in cohort.bags:
            coords, probs = bagio.read_probabilities(run.require(probs_dir / f"{bag.slide_id}.csv", "probability file"))
            cols, rows = bulkmask.grid_dims(np.vstack([coords, bag.coords]))
            raw = bulkmask.predictions_to_mask(coords, probs, cols, rows, params.prob_threshold)
            res = bulkmask.refine_mask(raw, params)
            bulkmask.write_mask_pgm(run.out / "masks" / f"{bag.slide_id}.pgm", res.mask)
            summary[bag.slide_id] = {
                "raw_cells": raw.count(), "bulk_cells": res.mask.count(),
                "components": res.n_components, "empty": res.empty,
            }
    run.write_json("masks/summary.json", summary)


def cmd_filter(run: Run):
    f = run.cfg.filter
    cohort = bagio.load_cohort(run.require(run.path(f.cohort), "cohort"))
    masks = run.require(run.path(f.masks), "mask directory")
    kept, flagged = [], []
    with run.stage("filter"):
        for bag in cohort.bags:
            mask = bulkmask.read_mask_pgm(run.require(masks / f"{bag.slide_id}.pgm", "mask"))
            try:
                kept.append(bulkmask.filter_bag(bag, mask))
            except EmptyTumorBulk:
                flagged.append(bag.slide_id)
        bagio.save_cohort(cohort.with_bags(kept), run.out / "cohort")
    run.write_json("flagged.json", {"empty_tumor_bulk": flagged})


def _write_predictions(path: Path, bags, scores):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["slide_id", "patient_id", "label", "score"])
        for bag, s in zip(bags, scores):
            w.writerow([bag.slide_id, bag.patient_id, bag.label, repr(float(s))])


def _read_predictions(path: Path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["slide_id", "patient_id", "label", "score"]:
            raise ConfigError(f"{path}: unexpected predictions header {reader.fieldnames}")
        rows = list(reader)
    return (
        [r["slide_id"] for r in rows],
        np.array([int(r["label"]) for r in rows]),
        np.array([float(r["score"]) for r in rows]),
    )


def cmd_train(run: Run):
    cfg = train_config(run.cfg.train, run.cfg.seed)
    cohort = bagio.load_cohort(run.require(run.path(run.cfg.data.cohort), "cohort"))
    run.write_json("config.json", run.cfg.model_dump(mode="json"))
    with run.stage("train"):
        train, val = bagio.carve_validation(cohort.bags, cfg.val_fraction, cfg.seed)
        result = trainer.train_model(train, val, cfg)
    result.save(run.out, cfg)


def cmd_crossval(run: Run):
    cfg = train_config(run.cfg.train, run.cfg.seed)
    k = run.cfg.crossval.k if run.cfg.crossval else 3
    cohort = bagio.load_cohort(run.require(run.path(run.cfg.data.cohort), "cohort"))
    run.write_json("config.json", run.cfg.model_dump(mode="json"))
    with run.stage("crossval"):
        results = trainer.crossval(cohort, k, cfg)
    pooled_bags, pooled_scores = [], []
    for r in results:
        fold_dir = run.out / f"fold_{r.fold}"
        r.result.save(fold_dir, trainer._with_seed(cfg, cfg.seed + r.fold))
        _write_predictions(fold_dir / "predictions.csv", r.test_bags, r.scores)
        pooled_bags.extend(r.test_bags)
        pooled_scores.extend(r.scores.tolist())
    _write_predictions(run.out / "predictions.csv", pooled_bags, pooled_scores)
    best = trainer.select_best(results)
    run.write_json("selection.json", {
        "best_fold": best.fold,
        "metric": "auroc",
        "fold_auroc": {str(r.fold): r.auroc for r in results},
        "checkpoint": f"fold_{best.fold}/checkpoint.dbcp",
    })


def _resolve_checkpoint(run: Run) -> Path:
    p = run.cfg.predict
    if p.checkpoint:
        return run.require(run.path(p.checkpoint), "checkpoint")
    if not p.run:
        raise ConfigError("predict.run: either predict.run or predict.checkpoint is required")
    run_dir = run.require(run.path(p.run), "crossval run")
    sel = json.loads(run.require(run_dir / "selection.json", "fold selection").read_text())
    return run.require(run_dir / sel["checkpoint"], "checkpoint")


def cmd_predict(run: Run):
    ckpt = _resolve_checkpoint(run)
    arrays, meta = gc.load_checkpoint(ckpt)
    params = mm.params_from_arrays(meta, arrays)
    cohort = bagio.load_cohort(run.require(run.path(run.cfg.predict.cohort), "cohort"))
    with run.stage("predict"):
        preds = [mm.predict(params, b.features) for b in cohort.bags]
    _write_predictions(run.out / "predictions.csv", cohort.bags, [p.probability for p in preds])
    run.write_json("predict_meta.json", {
        "checkpoint": str(ckpt), "model": meta["kind"], "threshold": meta.get("threshold"),
    })
    if run.cfg.predict.save_attention:
        run.write_json("attention.json", {b.slide_id: p.attention.tolist() for b, p in zip(cohort.bags, preds)})


def _stratified_halves(labels: np.ndarray, fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    tune = np.zeros(labels.size, dtype=bool)
    for lab in (0, 1):
        idx = np.flatnonzero(labels == lab)
        n = min(idx.size - 1, max(1, int(round(fraction * idx.size))))
        tune[rng.permutation(idx)[:n]] = True
    return tune


def cmd_eval(run: Run):
    e = run.cfg.eval
    pred_path = run.require(run.path(e.predictions), "predictions.csv")
    slides, labels, scores = _read_predictions(pred_path)
    compare = {}
    for name, p in e.compare.items():
        other_slides, other_labels, other_scores = _read_predictions(run.require(run.path(p), f"predictions for {name}"))
        lookup = dict(zip(other_slides, other_scores))
        missing = [s for s in slides if s not in lookup]
        if missing:
            raise ConfigError(f"eval.compare.{name}: {len(missing)} slides missing, e.g. {missing[0]}")
        compare[name] = np.array([lookup[s] for s in slides])

    groups, odx = None, None
    if e.cohort:
        cohort = bagio.load_cohort(run.require(run.path(e.cohort), "cohort"))
        meta = {b.slide_id: b for b in cohort.bags}
        rows = [meta[s] for s in slides]
        groups = {
            "race": [b.race or "missing" for b in rows],
            "age_band": [evalstats.age_band(b.age_years) for b in rows],
        }
        odx = [np.nan if b.odx_score is None else b.odx_score for b in rows]

    threshold, source = 0.5, "default"
    meta_path = pred_path.parent / "predict_meta.json"
    if e.threshold is not None:
        threshold, source = e.threshold, "config"
    elif meta_path.exists() and json.loads(meta_path.read_text()).get("threshold") is not None:
        threshold, source = json.loads(meta_path.read_text())["threshold"], "checkpoint_validation_f1"

    eval_mask = np.ones(labels.size, dtype=bool)
    if e.tune_fraction:
        tune = _stratified_halves(labels, e.tune_fraction, run.cfg.seed)
        threshold, _ = evalstats.f1_optimal_threshold(scores[tune], labels[tune])
        source = "tuning_split_f1"
        eval_mask = ~tune

    with run.stage("eval"):
        report = evalstats.evaluate(
            scores, labels, threshold=threshold, targets=tuple(e.targets),
            n_bootstrap=e.n_bootstrap, seed=run.cfg.seed, loess_span=e.loess_span,
            compare=compare, groups=groups, odx_scores=odx,
        )
        if e.tune_fraction:
            report.confusion = evalstats.confusion(scores[eval_mask], labels[eval_mask], threshold)
            if odx is not None:
                report.histogram = evalstats.error_histogram(
                    np.asarray(odx)[eval_mask], scores[eval_mask], labels[eval_mask], threshold)
    report.notes.append(f"threshold source: {source}")
    emit_report(run.out, report)


def emit_report(out: Path, report: evalstats.EvalReport):
    """metrics.json plus plot-ready CSVs (ROC rows by decreasing threshold)."""
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    _write_csv(out / "curves.csv", ["fpr", "tpr", "threshold"],
               zip(report.roc.fpr, report.roc.tpr, report.roc.thresholds))
    _write_csv(out / "pr_curve.csv", ["recall", "precision", "threshold"],
               zip(report.pr.recall, report.pr.precision, report.pr.thresholds))
    if report.calibration is not None:
        _write_csv(out / "calibration.csv", ["pred", "observed"],
                   zip(report.calibration.curve_x, report.calibration.curve_y))
    if report.histogram is not None:
        edges, counts = report.histogram
        _write_csv(out / "odx_histogram.csv", ["bin_lo", "bin_hi", "count"],
                   zip(edges[:-1], edges[1:], counts))


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def _write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def format_ci(block: dict) -> str:
    lo, hi = block["ci"]
    return f"{block['point']:.3f} [{lo:.3f}, {hi:.3f}]"


def cmd_report(run: Run):
    lines = ["| run | AUROC [95% CI] | AUPRC [95% CI] | p (DeLong) |", "|---|---|---|---|"]
    details = []
    for r in run.cfg.report.runs:
        metrics = json.loads(run.require(run.path(r) / "metrics.json", "metrics.json").read_text())
        p = ", ".join(f"{d['vs']}: {d['p']:.3f}" for d in metrics.get("delong", [])) or "-"
        lines.append(f"| {r} | {format_ci(metrics['auroc'])} | {format_ci(metrics['auprc'])} | {p} |")
        details.append(f"\n## {r}\n\n| sensitivity target | threshold | sensitivity | specificity | PPV | NPV |")
        details.append("|---|---|---|---|---|---|")
        for op in metrics["operating_points"]:
            cells = [op["target"], op["threshold"], op["sensitivity"], op["specificity"], op["ppv"], op["npv"]]
            details.append("| " + " | ".join("-" if c is None else f"{c:.3f}" for c in cells) + " |")
    (run.out / "report.md").write_text("\n".join(lines + details) + "\n")


COMMANDS = {
    "synth": cmd_synth,
    "tissue": cmd_tissue,
    "bulk": cmd_bulk,
    "filter": cmd_filter,
    "train": cmd_train,
    "crossval": cmd_crossval,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="deepbcr", description="Deep-BCR-Auto recurrence-risk pipeline")
    ap.add_argument("command", choices=SUBCOMMANDS)
    ap.add_argument("--config", required=True, type=Path, help="run configuration (JSON)")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--out", type=Path, help="override the output directory")
    ap.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run_command(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.command)
        if args.seed is not None:
            cfg = cfg.model_copy(update={"seed": args.seed})
        config_dir = args.config.resolve().parent
        if args.out is not None:
            out = args.out
        elif cfg.out is not None:
            out = Path(cfg.out) if Path(cfg.out).is_absolute() else config_dir / cfg.out
        else:
            raise ConfigError("out: output directory required (config 'out' or --out)")
        if args.out is not None:
            cfg = cfg.model_copy(update={"out": str(out)})
        if out.exists() and any(out.iterdir()) and not args.force:
            raise ConfigError(f"out: {out} is not empty; use a new directory or --force")
        out.mkdir(parents=True, exist_ok=True)
        run = Run(out, config_dir, cfg, args.command)
        COMMANDS[args.command](run)
        run.finish()
    except ConfigError as exc:
        print(f"deepbcr: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"deepbcr: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DeepBcrError, OSError, ValueError) as exc:
        print(f"deepbcr: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main():
    sys.exit(run_command())
