"""Bags of patch features, the on-disk bag container, cohort manifests and splits.

Bag binary layout (little-endian)::

    "DBCR" | version u32 = 1 | N u32 | D u32
    N x (col u32, row u32)
    N x D float32, row-major

Everything else about a slide (ids, labels, demographics) lives in the cohort
manifest, a JSON file next to a ``bags/`` directory.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    InsufficientClass,
    InvalidBag,
    InvalidSpec,
    MagicMismatch,
    NonFiniteFeature,
    TruncatedFile,
    VersionUnsupported,
    BagFormatError,
)

MAGIC = b"DBCR"
VERSION = 1
HEADER = struct.Struct("<4sIII")
ODX_CUTOFF = 25.0
RISK_LABELS = ("low", "high")
RACES = ("asian", "black", "white", "other", "missing")
LABEL_SOURCES = ("clinical_odx", "research_odx", "synthetic")
MANIFEST_FORMAT = "deepbcr-cohort"


def risk_from_odx(score: float) -> str:
    """High risk iff the ODX recurrence score is strictly above 25."""
    return "high" if score > ODX_CUTOFF else "low"


@dataclass(frozen=True, eq=False)
class FeatureBag:
    slide_id: str
    patient_id: str
    coords: np.ndarray  # (N, 2) int64, columns (col, row)
    features: np.ndarray  # (N, D) float64
    risk_label: str | None = None
    odx_score: float | None = None
    hr_positive: bool = True
    her2_negative: bool = True
    race: str | None = None
    age_years: int | None = None

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.int64).reshape(-1, 2)
        feats = np.asarray(self.features, dtype=np.float64)
        object.__setattr__(self, "coords", coords)
        object.__setattr__(self, "features", feats)
        if feats.ndim != 2 or feats.shape[1] == 0:
            raise InvalidBag(f"{self.slide_id}: features must be N x D with D > 0, got {feats.shape}")
        if coords.shape[0] != feats.shape[0]:
            raise InvalidBag(f"{self.slide_id}: {coords.shape[0]} coords for {feats.shape[0]} feature rows")
        if (coords < 0).any():
            raise InvalidBag(f"{self.slide_id}: negative grid coordinate")
        if len({(int(c), int(r)) for c, r in coords}) != coords.shape[0]:
            raise InvalidBag(f"{self.slide_id}: duplicate coordinates")
        if not np.isfinite(feats).all():
            raise NonFiniteFeature(f"{self.slide_id}: non-finite feature value")
        if self.risk_label is not None and self.risk_label not in RISK_LABELS:
            raise InvalidBag(f"{self.slide_id}: risk_label must be one of {RISK_LABELS}")
        if self.odx_score is not None:
            if not 0.0 <= self.odx_score <= 100.0:
                raise InvalidBag(f"{self.slide_id}: odx_score {self.odx_score} outside [0, 100]")
            if self.risk_label is not None and self.risk_label != risk_from_odx(self.odx_score):
                raise InvalidBag(
                    f"{self.slide_id}: label {self.risk_label} disagrees with ODX {self.odx_score}"
                )
        if self.race is not None and self.race not in RACES:
            raise InvalidBag(f"{self.slide_id}: race must be one of {RACES}")
        if self.age_years is not None and self.age_years < 0:
            raise InvalidBag(f"{self.slide_id}: negative age")

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def is_target(self) -> bool:
        """HR+/HER2- slides form the target cohort."""
        return bool(self.hr_positive and self.her2_negative)

    @property
    def label(self) -> int:
        if self.risk_label is None:
            raise InvalidBag(f"{self.slide_id} has no risk label")
        return int(self.risk_label == "high")

    def metadata(self) -> dict:
        return {
            "slide_id": self.slide_id,
            "patient_id": self.patient_id,
            "risk_label": self.risk_label,
            "odx_score": self.odx_score,
            "hr_positive": self.hr_positive,
            "her2_negative": self.her2_negative,
            "race": self.race,
            "age_years": self.age_years,
        }

    def subset(self, rows) -> "FeatureBag":
        rows = np.asarray(rows)
        return replace(self, coords=self.coords[rows], features=self.features[rows])

    def __eq__(self, other):
        if not isinstance(other, FeatureBag):
            return NotImplemented
        return (
            self.metadata() == other.metadata()
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.features, other.features)
        )

    __hash__ = None


# ---------------------------------------------------------------------------
# binary codec


def encode_bag(bag: FeatureBag) -> bytes:
    n, d = bag.features.shape
    with np.errstate(over="ignore"):
        feats32 = bag.features.astype("<f4")
    if not np.isfinite(feats32).all():
        raise NonFiniteFeature(f"{bag.slide_id}: feature overflows float32")
    coords = bag.coords.astype("<u4")
    return HEADER.pack(MAGIC, VERSION, n, d) + coords.tobytes() + feats32.tobytes()


def decode_bag(data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Parse a bag payload into ``(coords, features)``; features come back as float64."""
    if len(data) < 4 or data[:4] != MAGIC:
        raise MagicMismatch("bag payload does not start with 'DBCR'")
    if len(data) < HEADER.size:
        raise TruncatedFile(f"header needs {HEADER.size} bytes, got {len(data)}")
    _, version, n, d = HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionUnsupported(f"bag format version {version} (supported: {VERSION})")
    expected = bag_nbytes(n, d)
    if len(data) < expected:
        raise TruncatedFile(f"expected {expected} bytes for N={n}, D={d}, got {len(data)}")
    if len(data) > expected:
        raise BagFormatError(f"{len(data) - expected} trailing bytes after bag payload")
    off = HEADER.size
    coords = np.frombuffer(data, dtype="<u4", count=2 * n, offset=off).reshape(n, 2).astype(np.int64)
    feats = np.frombuffer(data, dtype="<f4", count=n * d, offset=off + 8 * n).reshape(n, d)
    if not np.isfinite(feats).all():
        raise NonFiniteFeature("non-finite feature value in bag payload")
    return coords, feats.astype(np.float64)


def bag_nbytes(n: int, d: int) -> int:
    return HEADER.size + 8 * n + 4 * n * d


def write_bag(path, bag: FeatureBag):
    Path(path).write_bytes(encode_bag(bag))


def read_bag(path, meta: dict) -> FeatureBag:
    coords, feats = decode_bag(Path(path).read_bytes())
    return FeatureBag(coords=coords, features=feats, **meta)


# ---------------------------------------------------------------------------
# cohorts


@dataclass
class CohortManifest:
    bags: list[FeatureBag]
    feature_dim: int
    patch_size_px: int = 896
    magnification: str = "40x"
    label_source: str = "synthetic"

    def __post_init__(self):
        if self.label_source not in LABEL_SOURCES:
            raise InvalidBag(f"label_source must be one of {LABEL_SOURCES}")
        seen = set()
        for bag in self.bags:
            if bag.feature_dim != self.feature_dim:
                raise InvalidBag(f"{bag.slide_id}: D={bag.feature_dim}, cohort D={self.feature_dim}")
            if bag.slide_id in seen:
                raise InvalidBag(f"duplicate slide_id {bag.slide_id}")
            seen.add(bag.slide_id)

    def by_patient(self) -> dict[str, list[FeatureBag]]:
        groups: dict[str, list[FeatureBag]] = {}
        for bag in self.bags:
            groups.setdefault(bag.patient_id, []).append(bag)
        return groups

    def target_bags(self) -> list[FeatureBag]:
        return [b for b in self.bags if b.is_target]

    def non_target_bags(self) -> list[FeatureBag]:
        return [b for b in self.bags if not b.is_target]

    def with_bags(self, bags: Sequence[FeatureBag]) -> "CohortManifest":
        return replace(self, bags=list(bags))


def save_cohort(cohort: CohortManifest, root) -> Path:
    """Write ``root/manifest.json`` and one ``root/bags/<slide_id>.dbcr`` per bag."""
    root = Path(root)
    (root / "bags").mkdir(parents=True, exist_ok=True)
    entries = []
    for bag in cohort.bags:
        rel = f"bags/{bag.slide_id}.dbcr"
        write_bag(root / rel, bag)
        entries.append({**bag.metadata(), "path": rel, "n_instances": bag.n_instances})
    doc = {
        "format": MANIFEST_FORMAT,
        "version": VERSION,
        "feature_dim": cohort.feature_dim,
        "patch_size_px": cohort.patch_size_px,
        "magnification": cohort.magnification,
        "label_source": cohort.label_source,
        "bags": entries,
    }
    path = root / "manifest.json"
    path.write_text(json.dumps(doc, indent=2) + "\n")
    return path


def load_cohort(root) -> CohortManifest:
    root = Path(root)
    doc = json.loads((root / "manifest.json").read_text())
    if doc.get("format") != MANIFEST_FORMAT:
        raise BagFormatError(f"{root}/manifest.json is not a cohort manifest")
    bags = []
    for entry in doc["bags"]:
        meta = {k: entry[k] for k in (
            "slide_id", "patient_id", "risk_label", "odx_score",
            "hr_positive", "her2_negative", "race", "age_years")}
        bag = read_bag(root / entry["path"], meta)
        if bag.n_instances != entry.get("n_instances", bag.n_instances):
            raise BagFormatError(f"{entry['slide_id']}: manifest N disagrees with bag file")
        bags.append(bag)
    return CohortManifest(
        bags=bags,
        feature_dim=doc["feature_dim"],
        patch_size_px=doc.get("patch_size_px", 896),
        magnification=doc.get("magnification", "40x"),
        label_source=doc.get("label_source", "synthetic"),
    )


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class SplitAssignment:
    k: int
    fold_of_patient: dict[str, int]

    def test_patients(self, fold: int) -> set[str]:
        return {p for p, f in self.fold_of_patient.items() if f == fold}


def patient_labels(bags: Iterable[FeatureBag]) -> dict[str, int]:
    """One label per patient: high if any of the patient's slides is high."""
    out: dict[str, int] = {}
    for bag in bags:
        out[bag.patient_id] = max(out.get(bag.patient_id, 0), bag.label)
    return out


def stratified_kfold(cohort: CohortManifest, k: int, seed: int) -> SplitAssignment:
    """Patient-level stratified folds over the target (HR+/HER2-) slides.

    Patients of each label are shuffled with a seeded generator and dealt
    round-robin; dealing continues across labels so fold sizes stay balanced.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    labels = patient_labels(cohort.target_bags())
    rng = np.random.default_rng(seed)
    folds: dict[str, int] = {}
    cursor = 0
    for lab in (0, 1):
        patients = sorted(p for p, y in labels.items() if y == lab)
        if len(patients) < k:
            raise InsufficientClass(
                f"{RISK_LABELS[lab]}-risk class has {len(patients)} patients, need >= {k}"
            )
        for idx in rng.permutation(len(patients)):
            folds[patients[idx]] = cursor % k
            cursor += 1
    return SplitAssignment(k, folds)


def augment_training_fold(cohort: CohortManifest, split: SplitAssignment, fold: int):
    """Return ``(train_bags, test_bags)`` for one fold.

    Training gets the target slides of the other folds plus every non-target
    slide; the test set is target slides only.
    """
    test_patients = split.test_patients(fold)
    train, test = [], []
    for bag in cohort.target_bags():
        (test if bag.patient_id in test_patients else train).append(bag)
    train.extend(b for b in cohort.non_target_bags() if b.patient_id not in test_patients)
    return train, test


def carve_validation(bags: Sequence[FeatureBag], fraction: float, seed: int):
    """Hold out a label-stratified, patient-level slice of ``bags``.

    Only target slides are eligible for validation. At least one patient of
    each label is held out. Returns ``(train_bags, val_bags)``.
    """
    if not 0.0 < fraction < 1.0:
        raise ValueError("validation fraction must be in (0, 1)")
    labels = patient_labels(b for b in bags if b.is_target)
    rng = np.random.default_rng(seed)
    held: set[str] = set()
    for lab in (0, 1):
        patients = sorted(p for p, y in labels.items() if y == lab)
        if len(patients) < 2:
            continue
        n_val = min(len(patients) - 1, max(1, int(round(fraction * len(patients)))))
        held.update(patients[i] for i in rng.permutation(len(patients))[:n_val])
    train = [b for b in bags if b.patient_id not in held]
    val = [b for b in bags if b.patient_id in held]
    return train, val


# ---------------------------------------------------------------------------
# synthetic cohorts


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-signal cohort.

    ``effect_size`` is the per-feature mean shift of planted instances in
    units of the background standard deviation (RMS over features): planted
    instances are offset by ``effect_size * sqrt(D)`` along a unit direction
    fixed by ``seed``. ``draw`` selects an independent sample of bags that
    shares that direction, so ``draw=1`` gives a fresh test set.
    """

    n_low: int = 150
    n_high: int = 50
    feature_dim: int = 32
    instances_per_bag: tuple[int, int] = (64, 128)
    planted_fraction: float = 0.1
    effect_size: float = 1.0
    seed: int = 0
    draw: int = 0
    n_nontarget_low: int = 0
    n_nontarget_high: int = 0
    second_slide_fraction: float = 0.0
    tumor_fraction: float = 0.75

    def validate(self):
        lo, hi = self.instances_per_bag
        if lo < 1 or hi < lo:
            raise InvalidSpec(f"instances_per_bag must satisfy 1 <= min <= max, got {self.instances_per_bag}")
        if min(self.n_low, self.n_high, self.n_nontarget_low, self.n_nontarget_high) < 0:
            raise InvalidSpec("bag counts must be non-negative")
        if self.feature_dim < 1:
            raise InvalidSpec("feature_dim must be >= 1")
        for name in ("planted_fraction", "second_slide_fraction", "tumor_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidSpec(f"{name} must be in [0, 1]")
        if self.effect_size < 0:
            raise InvalidSpec("effect_size must be >= 0")


@dataclass
class SyntheticCohort:
    cohort: CohortManifest
    planted: dict[str, np.ndarray] = field(default_factory=dict)  # slide_id -> bool per instance
    tumor_probs: dict[str, np.ndarray] = field(default_factory=dict)  # slide_id -> prob per instance
    direction: np.ndarray | None = None


def _planted_direction(seed: int, d: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD1]))
    u = rng.normal(size=d)
    return u / np.linalg.norm(u)


def _layout(rng, n: int, planted: np.ndarray, tumor_fraction: float):
    """Place instances on a compact grid; tumor cells are those nearest a random center.

    Planted instances always sit on tumor cells. Returns ``(coords, probs)``.
    """
    width = max(1, math.ceil(math.sqrt(n)))
    cells = np.array([(i % width, i // width) for i in range(n)], dtype=np.int64)
    center = rng.uniform(0, width, size=2)
    dist = np.hypot(cells[:, 0] + 0.5 - center[0], cells[:, 1] + 0.5 - center[1])
    by_dist = np.argsort(dist, kind="stable")
    n_tumor = max(int(planted.sum()), int(round(tumor_fraction * n)))
    tumor_cells, other_cells = by_dist[:n_tumor], by_dist[n_tumor:]
    order = np.empty(n, dtype=np.int64)
    planted_idx = np.flatnonzero(planted)
    rest_idx = np.flatnonzero(~planted)
    tumor_perm = rng.permutation(tumor_cells)
    order[planted_idx] = tumor_perm[: planted_idx.size]
    remaining = rng.permutation(np.concatenate([tumor_perm[planted_idx.size :], other_cells]))
    order[rest_idx] = remaining
    is_tumor = np.zeros(n, dtype=bool)
    is_tumor[tumor_cells] = True
    cell_probs = np.where(is_tumor, rng.uniform(0.6, 1.0, n), rng.uniform(0.0, 0.4, n))
    return cells[order], cell_probs[order]


def generate_synthetic_cohort(spec: SyntheticSpec) -> SyntheticCohort:
    spec.validate()
    d = spec.feature_dim
    direction = _planted_direction(spec.seed, d)
    shift = spec.effect_size * math.sqrt(d) * direction
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, spec.draw, 0xBA6]))
    plan = (
        [("low", True)] * spec.n_low
        + [("high", True)] * spec.n_high
        + [("low", False)] * spec.n_nontarget_low
        + [("high", False)] * spec.n_nontarget_high
    )
    bags, planted, probs = [], {}, {}
    patient_no = 0
    prefix = f"s{spec.seed}d{spec.draw}"
    for label, target in plan:
        n_slides = 2 if rng.random() < spec.second_slide_fraction else 1
        patient = f"{prefix}-p{patient_no:05d}"
        patient_no += 1
        if label == "low":
            odx = float(np.round(rng.uniform(0.0, 25.0), 1))
        else:
            odx = float(np.round(min(100.0, 25.1 + rng.gamma(2.0, 6.0)), 1))
        if target:
            hr, her2neg = True, True
        else:
            hr, her2neg = [(False, True), (True, False), (False, False)][rng.integers(3)]
        race = RACES[rng.choice(5, p=[0.05, 0.12, 0.65, 0.03, 0.15])]
        age = int(np.clip(np.round(rng.normal(62.0, 11.0)), 25, 95))
        for s in range(n_slides):
            n = int(rng.integers(spec.instances_per_bag[0], spec.instances_per_bag[1] + 1))
            feats = rng.normal(size=(n, d))
            flags = np.zeros(n, dtype=bool)
            if label == "high":
                flags = rng.random(n) < spec.planted_fraction
                feats[flags] += shift
            coords, p = _layout(rng, n, flags, spec.tumor_fraction)
            slide = f"{patient}-s{s}"
            # stored at float32 precision, so round here to keep the codec exact
            feats = feats.astype(np.float32).astype(np.float64)
            bags.append(
                FeatureBag(
                    slide_id=slide, patient_id=patient, coords=coords, features=feats,
                    risk_label=label, odx_score=odx, hr_positive=hr, her2_negative=her2neg,
                    race=race, age_years=age,
                )
            )
            planted[slide] = flags
            probs[slide] = p
    cohort = CohortManifest(bags=bags, feature_dim=d, label_source="synthetic")
    return SyntheticCohort(cohort, planted, probs, direction)


def save_synthetic(synth: SyntheticCohort, root) -> Path:
    """Cohort files plus ``probs/<slide>.csv`` (col,row,prob) and ``planted.json``."""
    root = Path(root)
    save_cohort(synth.cohort, root)
    (root / "probs").mkdir(exist_ok=True)
    for bag in synth.cohort.bags:
        write_probabilities(root / "probs" / f"{bag.slide_id}.csv", bag.coords, synth.tumor_probs[bag.slide_id])
    planted = {k: v.astype(int).tolist() for k, v in synth.planted.items()}
    (root / "planted.json").write_text(json.dumps(planted) + "\n")
    return root


def write_probabilities(path, coords, probs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["col", "row", "prob"])
        for (c, r), p in zip(np.asarray(coords), np.asarray(probs)):
            w.writerow([int(c), int(r), repr(float(p))])


def read_probabilities(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["col", "row", "prob"]:
            raise BagFormatError(f"{path}: expected header col,row,prob, got {reader.fieldnames}")
        rows = [(int(r["col"]), int(r["row"]), float(r["prob"])) for r in reader]
    coords = np.array([(c, r) for c, r, _ in rows], dtype=np.int64).reshape(-1, 2)
    probs = np.array([p for _, _, p in rows], dtype=np.float64)
    return coords, probs
