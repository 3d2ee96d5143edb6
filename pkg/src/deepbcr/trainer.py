"""Training loop, weighted sampling, early stopping and cross-validation."""

from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import gradcore as gc
from . import milmodels as mm
from .bagio import (
    CohortManifest,
    FeatureBag,
    augment_training_fold,
    carve_validation,
    stratified_kfold,
)
from .errors import EmptyValidation, SingleClassDataset

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-5
    max_epochs: int = 50
    patience: int = 5
    val_fraction: float = 0.10
    seed: int = 0
    model: str = "deep_bcr"
    hyper: mm.Hyper = field(default_factory=mm.Hyper)

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must be in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.model not in mm.MODEL_KINDS:
            raise ValueError(f"model must be one of {mm.MODEL_KINDS}")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    epochs_run: int = 0
    stop_reason: str = "max_epochs"
    best_epoch: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    params: mm.MilParams
    history: TrainHistory
    threshold: float  # F1-optimal on the validation slice

    def checkpoint_meta(self, cfg: TrainConfig) -> dict:
        return {
            **self.params.meta(),
            "best_epoch": self.history.best_epoch,
            "val_loss": self.history.val_loss[self.history.best_epoch],
            "seed": cfg.seed,
            "threshold": self.threshold,
        }

    def save(self, directory, cfg: TrainConfig):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        gc.save_checkpoint(directory / "checkpoint.dbcp", self.params.arrays(), self.checkpoint_meta(cfg))
        (directory / "history.json").write_text(json.dumps(self.history.to_dict(), indent=2) + "\n")


def weighted_epoch_sampler(labels: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    """Draw ``len(labels)`` indices with replacement, P(i) proportional to 1/count(class(i))."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=2)
    if (counts[:2] == 0).any():
        raise SingleClassDataset("weighted sampling needs both risk classes")
    w = 1.0 / counts[labels]
    return rng.choice(labels.size, size=labels.size, replace=True, p=w / w.sum())


def bag_loss(params: mm.MilParams, bag: FeatureBag, train: bool = False, rng=None) -> gc.Tensor:
    prob, _, _ = mm.forward_graph(params, bag.features, train, rng)
    return gc.bce_loss(prob, float(bag.label))


def mean_loss(params: mm.MilParams, bags: Sequence[FeatureBag]) -> float:
    return float(np.mean([bag_loss(params, b).item() for b in bags]))


def predict_scores(params: mm.MilParams, bags: Sequence[FeatureBag]) -> np.ndarray:
    return np.array([mm.predict(params, b.features).probability for b in bags])


def train_model(train_bags: Sequence[FeatureBag], val_bags: Sequence[FeatureBag], cfg: TrainConfig) -> TrainResult:
    """Batch-size-1 Adam training with early stopping on validation loss.

    The returned parameters are those of the epoch with the lowest validation
    loss. Runs are bit-reproducible for a given ``cfg.seed``.
    """
    from .evalstats import f1_optimal_threshold

    if not val_bags:
        raise EmptyValidation("validation set is empty")
    val_labels = [b.label for b in val_bags]
    if len(set(val_labels)) < 2:
        raise SingleClassDataset("validation set needs both risk classes")
    labels = [b.label for b in train_bags]
    if len(set(labels)) < 2:
        raise SingleClassDataset("training set needs both risk classes")

    d = train_bags[0].feature_dim
    params = mm.init_params(cfg.model, d, cfg.hyper, seed=cfg.seed)
    ss = np.random.SeedSequence([cfg.seed, 0x7A1])
    sample_rng, dropout_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    state = gc.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)

    hist = TrainHistory()
    best_val = np.inf
    best = params.arrays()
    stale = 0
    for epoch in range(cfg.max_epochs):
        losses = []
        for i in weighted_epoch_sampler(labels, sample_rng):
            loss = bag_loss(params, train_bags[i], train=True, rng=dropout_rng)
            grads = gc.backward(loss, params.tensors)
            gc.adam_step(params.tensors, grads, state)
            losses.append(loss.item())
        val = mean_loss(params, val_bags)
        hist.train_loss.append(float(np.mean(losses)))
        hist.val_loss.append(val)
        hist.epochs_run = epoch + 1
        log.debug("epoch %d train %.4f val %.4f", epoch, hist.train_loss[-1], val)
        if val < best_val:
            best_val, stale = val, 0
            best = params.arrays()
            hist.best_epoch = epoch
        else:
            stale += 1
            if stale >= cfg.patience:
                hist.stop_reason = "early_stop"
                break
    params.load_arrays(best)
    threshold, _ = f1_optimal_threshold(predict_scores(params, val_bags), val_labels)
    return TrainResult(params, hist, float(threshold))


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class FoldResult:
    fold: int
    result: TrainResult
    test_bags: list[FeatureBag]
    scores: np.ndarray
    auroc: float
    n_train: int
    n_val: int


def _run_fold(cohort: CohortManifest, split, fold: int, cfg: TrainConfig) -> FoldResult:
    from .evalstats import roc_auc

    train_all, test = augment_training_fold(cohort, split, fold)
    fold_cfg = _with_seed(cfg, cfg.seed + fold)
    train, val = carve_validation(train_all, cfg.val_fraction, seed=fold_cfg.seed)
    result = train_model(train, val, fold_cfg)
    scores = predict_scores(result.params, test)
    auc = roc_auc(scores, [b.label for b in test]).auroc
    log.info("fold %d: %d train / %d val / %d test, AUROC %.3f", fold, len(train), len(val), len(test), auc)
    return FoldResult(fold, result, test, scores, auc, len(train), len(val))


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    d = {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}
    d["seed"] = seed
    return TrainConfig(**d)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("DEEPBCR_THREADS", "1")))
    except ValueError:
        return 1


def crossval(cohort: CohortManifest, k: int, cfg: TrainConfig, workers: int | None = None) -> list[FoldResult]:
    """Stratified k-fold over target patients; fold ``i`` trains with seed ``cfg.seed + i``."""
    split = stratified_kfold(cohort, k, cfg.seed)
    workers = worker_count() if workers is None else workers
    if workers > 1 and k > 1:
        with ProcessPoolExecutor(max_workers=min(workers, k)) as pool:
            futures = [pool.submit(_run_fold, cohort, split, f, cfg) for f in range(k)]
            return [f.result() for f in futures]
    return [_run_fold(cohort, split, f, cfg) for f in range(k)]


def select_best(results: Sequence[FoldResult]) -> FoldResult:
    """Fold with the highest test AUROC; ties go to the lowest fold index."""
    if not results:
        raise ValueError("no fold results")
    return max(sorted(results, key=lambda r: r.fold), key=lambda r: r.auroc)
