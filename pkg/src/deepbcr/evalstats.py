"""Evaluation statistics: ROC/PR, bootstrap CIs, DeLong, operating points,
calibration, subgroup AUROCs and misclassification histograms.

Positive class is high risk (label 1). A case is called positive when its
score is ``>=`` the threshold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import norm

from .errors import DegenerateLabels, DegenerateLogits, SubgroupTooSmall, UnachievableTarget

PROB_CLIP = 1e-7


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).astype(bool).reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    return s, y


def _need_both(y):
    if y.all() or not y.any():
        raise DegenerateLabels("need at least one positive and one negative case")


def midranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    starts = np.r_[0, np.flatnonzero(np.diff(xs)) + 1]
    ends = np.r_[starts[1:], xs.size]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(x.size)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


# ---------------------------------------------------------------------------
# curves


@dataclass
class RocResult:
    auroc: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray  # decreasing; first entry is +inf


@dataclass
class PrResult:
    auprc: float
    recall: np.ndarray
    precision: np.ndarray
    thresholds: np.ndarray  # decreasing


def _threshold_counts(s, y):
    """Cumulative TP/FP when predicting positive for score >= each unique threshold."""
    order = np.argsort(-s, kind="mergesort")
    ss, ys = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(ss)), ss.size - 1]
    tp = np.cumsum(ys)[last]
    fp = np.cumsum(~ys)[last]
    return ss[last], tp.astype(np.float64), fp.astype(np.float64)


def roc_auc(scores, labels) -> RocResult:
    """Mann-Whitney AUROC (ties count one half) and the ROC curve over unique thresholds."""
    s, y = _as_arrays(scores, labels)
    _need_both(y)
    n_pos, n_neg = y.sum(), (~y).sum()
    r = midranks(s)
    auc = (r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    thr, tp, fp = _threshold_counts(s, y)
    return RocResult(
        auroc=float(auc),
        fpr=np.r_[0.0, fp / n_neg],
        tpr=np.r_[0.0, tp / n_pos],
        thresholds=np.r_[np.inf, thr],
    )


def pr_auc(scores, labels) -> PrResult:
    """Average precision: sum over thresholds of (recall step) x precision."""
    s, y = _as_arrays(scores, labels)
    if not y.any():
        raise DegenerateLabels("average precision needs at least one positive")
    thr, tp, fp = _threshold_counts(s, y)
    recall = tp / y.sum()
    precision = tp / (tp + fp)
    ap = float(np.sum(np.diff(np.r_[0.0, recall]) * precision))
    return PrResult(ap, recall, precision, thr)


def trapezoid_area(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0))


# ---------------------------------------------------------------------------
# bootstrap


def stratified_resample(y: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    pos, neg = np.flatnonzero(y), np.flatnonzero(~y)
    return np.concatenate([rng.choice(pos, pos.size), rng.choice(neg, neg.size)])


def bootstrap_replicates(scores, labels, metric: Callable, n: int = 1000, seed: int = 0) -> np.ndarray:
    """Metric over ``n`` class-stratified resamples; replicate ``r`` draws from seed ``seed + r``."""
    s, y = _as_arrays(scores, labels)
    _need_both(y)
    out = np.empty(n)
    for r in range(n):
        idx = stratified_resample(y, np.random.default_rng(seed + r))
        out[r] = metric(s[idx], y[idx])
    return out


def bootstrap_ci(scores, labels, metric: Callable, n: int = 1000, seed: int = 0,
                 level: float = 0.95) -> tuple[float, float]:
    reps = bootstrap_replicates(scores, labels, metric, n, seed)
    tail = 100.0 * (1.0 - level) / 2.0
    lo, hi = np.percentile(reps, [tail, 100.0 - tail])
    return float(lo), float(hi)


def auroc_metric(s, y) -> float:
    return roc_auc(s, y).auroc


def auprc_metric(s, y) -> float:
    return pr_auc(s, y).auprc


# ---------------------------------------------------------------------------
# DeLong


@dataclass
class DelongResult:
    auc_a: float
    auc_b: float
    z: float
    p: float
    cov: np.ndarray  # 2 x 2 covariance of (auc_a, auc_b)
    v10: np.ndarray  # (n_pos, 2) structural components per positive
    v01: np.ndarray  # (n_neg, 2) structural components per negative


def structural_components(scores, labels):
    """Per-positive share of negatives beaten (V10) and per-negative share of
    positives beating it (V01); ties count one half. Midrank formulation."""
    s, y = _as_arrays(scores, labels)
    _need_both(y)
    m, n = y.sum(), (~y).sum()
    r_all = midranks(s)
    r_pos = midranks(s[y])
    r_neg = midranks(s[~y])
    v10 = (r_all[y] - r_pos) / n
    v01 = 1.0 - (r_all[~y] - r_neg) / m
    return v10, v01


def delong_test(scores_a, scores_b, labels) -> DelongResult:
    """Two-sided DeLong test for two correlated AUROCs on the same cases.

    Zero variance of the difference gives ``z = 0, p = 1`` by convention.
    """
    sa, y = _as_arrays(scores_a, labels)
    sb, _ = _as_arrays(scores_b, labels)
    a10, a01 = structural_components(sa, y)
    b10, b01 = structural_components(sb, y)
    v10 = np.column_stack([a10, b10])
    v01 = np.column_stack([a01, b01])
    m, n = v10.shape[0], v01.shape[0]
    aucs = v10.mean(axis=0)
    s10 = np.cov(v10, rowvar=False, ddof=1) if m > 1 else np.zeros((2, 2))
    s01 = np.cov(v01, rowvar=False, ddof=1) if n > 1 else np.zeros((2, 2))
    cov = s10 / m + s01 / n
    var = cov[0, 0] + cov[1, 1] - 2.0 * cov[0, 1]
    diff = aucs[0] - aucs[1]
    if var <= 0.0:
        z, p = 0.0, 1.0
    else:
        z = diff / math.sqrt(var)
        p = float(2.0 * norm.sf(abs(z)))
    return DelongResult(float(aucs[0]), float(aucs[1]), float(z), p, cov, v10, v01)


def delong_variance(scores, labels) -> float:
    v10, v01 = structural_components(scores, labels)
    m, n = v10.size, v01.size
    s10 = v10.var(ddof=1) if m > 1 else 0.0
    s01 = v01.var(ddof=1) if n > 1 else 0.0
    return float(s10 / m + s01 / n)


def unpaired_auc_test(scores_a, labels_a, scores_b, labels_b) -> tuple[float, float]:
    """z-test for AUROCs of two independent samples using DeLong variances."""
    auc_a = roc_auc(scores_a, labels_a).auroc
    auc_b = roc_auc(scores_b, labels_b).auroc
    var = delong_variance(scores_a, labels_a) + delong_variance(scores_b, labels_b)
    if var <= 0.0 or auc_a == auc_b:
        return 0.0, 1.0
    z = (auc_a - auc_b) / math.sqrt(var)
    return float(z), float(2.0 * norm.sf(abs(z)))


# ---------------------------------------------------------------------------
# thresholds and confusion


@dataclass
class Confusion:
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def sensitivity(self) -> float:
        return _ratio(self.tp, self.tp + self.fn)

    @property
    def specificity(self) -> float:
        return _ratio(self.tn, self.tn + self.fp)

    @property
    def ppv(self) -> float:
        return _ratio(self.tp, self.tp + self.fp)

    @property
    def npv(self) -> float:
        return _ratio(self.tn, self.tn + self.fn)

    @property
    def accuracy(self) -> float:
        return _ratio(self.tp + self.tn, self.tp + self.tn + self.fp + self.fn)

    @property
    def f1(self) -> float:
        return _ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn)

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
            "accuracy": self.accuracy,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "ppv": self.ppv,
            "npv": self.npv,
            "f1": self.f1,
        }


def _ratio(a, b) -> float:
    return a / b if b else float("nan")


def confusion(scores, labels, threshold: float) -> Confusion:
    s, y = _as_arrays(scores, labels)
    pred = s >= threshold
    return Confusion(
        threshold=float(threshold),
        tp=int((pred & y).sum()),
        fp=int((pred & ~y).sum()),
        tn=int((~pred & ~y).sum()),
        fn=int((~pred & y).sum()),
    )


def operating_points(scores, labels, targets=(0.70, 0.80, 0.90)) -> list[dict]:
    """For each target sensitivity, the largest observed score threshold that reaches it."""
    s, y = _as_arrays(scores, labels)
    _need_both(y)
    thr, tp, _ = _threshold_counts(s, y)
    sens = tp / y.sum()
    out = []
    for t in targets:
        if t > 1.0:
            raise UnachievableTarget(f"sensitivity target {t} exceeds 1")
        # sens is nondecreasing as thresholds decrease; first hit is the largest threshold
        i = int(np.argmax(sens >= t))
        c = confusion(s, y, thr[i])
        out.append({"target": float(t), **c.to_dict()})
    return out


def f1_optimal_threshold(scores, labels) -> tuple[float, float]:
    """Observed score maximising F1; ties go to the larger threshold."""
    s, y = _as_arrays(scores, labels)
    _need_both(y)
    thr, tp, fp = _threshold_counts(s, y)
    f1 = 2 * tp / (tp + y.sum() + fp)
    i = int(np.argmax(f1))  # thr is decreasing, so the first max is the largest threshold
    return float(thr[i]), float(f1[i])


# ---------------------------------------------------------------------------
# calibration


def loess(x, y, at=None, span: float = 0.75) -> np.ndarray:
    """Tricube-weighted local-linear smoother (no robustness iterations).

    Each fit uses the ``ceil(span * n)`` nearest points; weights fall to zero
    at the farthest of them. Where the local design is degenerate (one
    distinct x value in the window) the weighted mean is returned.
    """
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    at = x if at is None else np.asarray(at, dtype=np.float64)
    n = x.size
    k = min(n, max(2, int(math.ceil(span * n))))
    out = np.empty(at.size)
    for j, x0 in enumerate(at):
        d = np.abs(x - x0)
        h = np.partition(d, k - 1)[k - 1]
        if h <= 0.0:
            w = (d <= 0.0).astype(np.float64)
        else:
            u = np.minimum(d / h, 1.0)
            w = (1.0 - u**3) ** 3
        sw = w.sum()
        xm = (w * x).sum() / sw
        ym = (w * y).sum() / sw
        sxx = (w * (x - xm) ** 2).sum()
        if sxx <= 1e-14 * max(1.0, sw):
            out[j] = ym
        else:
            beta = (w * (x - xm) * (y - ym)).sum() / sxx
            out[j] = ym + beta * (x0 - xm)
    return out


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLIP, 1.0 - PROB_CLIP)
    return np.log(p) - np.log1p(-p)


@dataclass
class CalibrationResult:
    slope: float
    intercept: float
    c_statistic: float
    curve_x: np.ndarray
    curve_y: np.ndarray
    converged: bool = True


def logistic_recalibration(probabilities, labels, max_iter: int = 100, tol: float = 1e-12):
    """Maximum-likelihood fit of ``logit P(y=1) = intercept + slope * logit(p)`` by Newton's method."""
    z = logit(probabilities)
    y = np.asarray(labels, dtype=np.float64)
    if z.size < 2 or np.ptp(z) == 0.0:
        raise DegenerateLogits("logits have zero variance; calibration slope undefined")
    X = np.column_stack([np.ones_like(z), z])
    beta = np.zeros(2)
    converged = False
    for _ in range(max_iter):
        eta = X @ beta
        mu = 1.0 / (1.0 + np.exp(-eta))
        w = mu * (1.0 - mu)
        grad = X.T @ (y - mu)
        hess = X.T @ (X * w[:, None])
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            break
        beta = beta + step
        if not np.isfinite(beta).all():
            break
        if np.max(np.abs(step)) < tol * (1.0 + np.max(np.abs(beta))):
            converged = True
            break
    return float(beta[1]), float(beta[0]), converged


def calibration(probabilities, labels, loess_span: float = 0.75) -> CalibrationResult:
    p, y = _as_arrays(probabilities, labels)
    _need_both(y)
    p = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    slope, intercept, ok = logistic_recalibration(p, y)
    xs = np.unique(p)
    curve = loess(p, y.astype(np.float64), at=xs, span=loess_span)
    return CalibrationResult(slope, intercept, roc_auc(p, y).auroc, xs, curve, ok)


# ---------------------------------------------------------------------------
# subgroups and error analysis


@dataclass
class SubgroupReport:
    aurocs: dict[str, float | None]
    counts: dict[str, tuple[int, int]]  # (n_pos, n_neg)
    pairwise: list[dict] = field(default_factory=list)


def subgroup_auroc(scores, labels, groups: Sequence, min_per_class: int = 2) -> SubgroupReport:
    """AUROC per group plus pairwise unpaired z-test p-values between evaluable groups.

    Groups with fewer than ``min_per_class`` cases of either class are
    reported with AUROC ``None``.
    """
    s, y = _as_arrays(scores, labels)
    g = np.asarray([str(v) for v in groups])
    names = sorted(set(g.tolist()))
    aurocs: dict[str, float | None] = {}
    counts: dict[str, tuple[int, int]] = {}
    for name in names:
        m = g == name
        counts[name] = (int(y[m].sum()), int((~y[m]).sum()))
        try:
            _check_group(y[m], min_per_class, name)
        except SubgroupTooSmall:
            aurocs[name] = None
            continue
        aurocs[name] = roc_auc(s[m], y[m]).auroc
    ok = [n for n in names if aurocs[n] is not None]
    pairwise = []
    for i, a in enumerate(ok):
        for b in ok[i + 1 :]:
            ma, mb = g == a, g == b
            z, p = unpaired_auc_test(s[ma], y[ma], s[mb], y[mb])
            pairwise.append({"a": a, "b": b, "z": z, "p": p})
    return SubgroupReport(aurocs, counts, pairwise)


def _check_group(y, min_per_class, name):
    if y.sum() < min_per_class or (~y).sum() < min_per_class:
        raise SubgroupTooSmall(f"group {name!r} has fewer than {min_per_class} cases of a class")


def age_band(age: int | None, cut: int = 50) -> str:
    if age is None:
        return "missing"
    return f"<{cut}" if age < cut else f">={cut}"


def error_histogram(odx_scores, scores, labels, threshold: float, width: float = 5.0,
                    lo: float = 0.0, hi: float = 100.0) -> tuple[np.ndarray, np.ndarray]:
    """Counts of misclassified cases by ODX score in ``[lo, hi]`` bins of ``width``.

    Bins are half-open ``[a, a + width)`` except the last, which includes ``hi``.
    Returns ``(bin_edges, counts)``.
    """
    s, y = _as_arrays(scores, labels)
    odx = np.asarray(odx_scores, dtype=np.float64)
    wrong = (s >= threshold) != y
    edges = np.arange(lo, hi + width / 2, width)
    counts, _ = np.histogram(odx[wrong & np.isfinite(odx)], bins=edges)
    return edges, counts


# ---------------------------------------------------------------------------
# full report


@dataclass
class EvalReport:
    roc: RocResult
    pr: PrResult
    auroc_ci: tuple[float, float]
    auprc_ci: tuple[float, float]
    operating_points: list[dict]
    confusion: Confusion
    calibration: CalibrationResult | None
    delong: list[dict] = field(default_factory=list)
    subgroups: dict[str, SubgroupReport] = field(default_factory=dict)
    histogram: tuple[np.ndarray, np.ndarray] | None = None
    n_bootstrap: int = 1000
    notes: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        cal = None
        if self.calibration is not None:
            cal = {
                "slope": self.calibration.slope,
                "intercept": self.calibration.intercept,
                "c": self.calibration.c_statistic,
                "converged": self.calibration.converged,
            }
        return _clean({
            "auroc": {"point": self.roc.auroc, "ci": list(self.auroc_ci)},
            "auprc": {"point": self.pr.auprc, "ci": list(self.auprc_ci)},
            "n_bootstrap": self.n_bootstrap,
            "delong": self.delong,
            "operating_points": self.operating_points,
            "confusion": self.confusion.to_dict(),
            "calibration": cal,
            "subgroups": {
                k: {
                    "auroc": v.aurocs,
                    "counts": {g: {"pos": c[0], "neg": c[1]} for g, c in v.counts.items()},
                    "pairwise": v.pairwise,
                }
                for k, v in self.subgroups.items()
            },
            "notes": self.notes,
        })


def _clean(obj):
    """JSON-safe copy: NaN/inf become None, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def evaluate(
    scores,
    labels,
    *,
    threshold: float = 0.5,
    targets=(0.70, 0.80, 0.90),
    n_bootstrap: int = 1000,
    seed: int = 0,
    loess_span: float = 0.75,
    compare: Mapping[str, Sequence[float]] | None = None,
    groups: Mapping[str, Sequence] | None = None,
    odx_scores: Sequence[float] | None = None,
) -> EvalReport:
    s, y = _as_arrays(scores, labels)
    notes = []
    roc = roc_auc(s, y)
    pr = pr_auc(s, y)
    auroc_ci = bootstrap_ci(s, y, auroc_metric, n_bootstrap, seed)
    auprc_ci = bootstrap_ci(s, y, auprc_metric, n_bootstrap, seed)
    try:
        cal = calibration(s, y, loess_span)
    except DegenerateLogits as exc:
        cal = None
        notes.append(f"calibration skipped: {exc}")
    delong = []
    for name, other in (compare or {}).items():
        r = delong_test(s, other, y)
        delong.append({"vs": name, "auc": r.auc_a, "auc_vs": r.auc_b, "z": r.z, "p": r.p})
    subgroups = {k: subgroup_auroc(s, y, v) for k, v in (groups or {}).items()}
    hist = None
    if odx_scores is not None:
        hist = error_histogram(odx_scores, s, y, threshold)
    return EvalReport(
        roc=roc, pr=pr, auroc_ci=auroc_ci, auprc_ci=auprc_ci,
        operating_points=operating_points(s, y, targets),
        confusion=confusion(s, y, threshold),
        calibration=cal, delong=delong, subgroups=subgroups,
        histogram=hist, n_bootstrap=n_bootstrap, notes=notes,
    )
