"""Tumor-bulk masks on the patch grid.

Per-patch tumor probabilities are thresholded into a :class:`GridMask`, then
refined by closing, small-component removal, per-component convex-hull fill
and keep-the-largest selection. Bags are finally restricted to mask cells.

Grids are indexed ``bits[row, col]``; coordinates elsewhere are ``(col, row)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bagio import FeatureBag
from .errors import CoordOutOfBounds, DuplicateCoord, EmptyTumorBulk


@dataclass(eq=False)
class GridMask:
    bits: np.ndarray  # (rows, cols) bool

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2 or min(self.bits.shape) < 1:
            raise ValueError(f"mask must be a non-empty 2-D grid, got shape {self.bits.shape}")

    @classmethod
    def empty(cls, cols: int, rows: int) -> "GridMask":
        return cls(np.zeros((rows, cols), dtype=bool))

    @property
    def cols(self) -> int:
        return self.bits.shape[1]

    @property
    def rows(self) -> int:
        return self.bits.shape[0]

    def count(self) -> int:
        return int(self.bits.sum())

    def __eq__(self, other):
        return isinstance(other, GridMask) and np.array_equal(self.bits, other.bits)

    __hash__ = None


@dataclass(frozen=True)
class RefineParams:
    closing_radius: int = 1
    min_component_patches: int = 16
    n_keep: int = 2
    connectivity: int = 8
    prob_threshold: float = 0.5

    def __post_init__(self):
        if self.closing_radius < 0:
            raise ValueError("closing_radius must be >= 0")
        if self.min_component_patches < 0:
            raise ValueError("min_component_patches must be >= 0")
        if self.n_keep < 1:
            raise ValueError("n_keep must be >= 1")
        if self.connectivity not in (4, 8):
            raise ValueError("connectivity must be 4 or 8")


def predictions_to_mask(coords, probs, cols: int, rows: int, threshold: float = 0.5) -> GridMask:
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
    probs = np.asarray(probs, dtype=np.float64).reshape(-1)
    if coords.shape[0] != probs.size:
        raise ValueError(f"{coords.shape[0]} coords for {probs.size} probabilities")
    mask = GridMask.empty(cols, rows)
    seen = set()
    for (c, r), p in zip(coords, probs):
        if not (0 <= c < cols and 0 <= r < rows):
            raise CoordOutOfBounds(f"coord ({c}, {r}) outside {cols}x{rows} grid")
        if (c, r) in seen:
            raise DuplicateCoord(f"coord ({c}, {r}) appears twice")
        seen.add((c, r))
        mask.bits[r, c] = p >= threshold
    return mask


# ---------------------------------------------------------------------------
# morphology


def _shifted(bits: np.ndarray, dr: int, dc: int, fill: bool) -> np.ndarray:
    """``out[r, c] = bits[r + dr, c + dc]``, with ``fill`` outside the grid."""
    rows, cols = bits.shape
    out = np.full_like(bits, fill)
    r0, r1 = max(0, -dr), min(rows, rows - dr)
    c0, c1 = max(0, -dc), min(cols, cols - dc)
    if r0 < r1 and c0 < c1:
        out[r0:r1, c0:c1] = bits[r0 + dr : r1 + dr, c0 + dc : c1 + dc]
    return out


def dilate(bits: np.ndarray, radius: int) -> np.ndarray:
    """Square structuring element of side ``2r+1``; outside the grid is background."""
    out = np.zeros_like(bits)
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            out |= _shifted(bits, dr, dc, False)
    return out


def erode(bits: np.ndarray, radius: int) -> np.ndarray:
    """Square structuring element; outside the grid counts as foreground."""
    out = np.ones_like(bits)
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            out &= _shifted(bits, dr, dc, True)
    return out


def closing(bits: np.ndarray, radius: int) -> np.ndarray:
    bits = np.asarray(bits, dtype=bool)
    if radius == 0:
        return bits.copy()
    return erode(dilate(bits, radius), radius)


def _neighbours(connectivity: int):
    if connectivity == 4:
        return ((-1, 0), (1, 0), (0, -1), (0, 1))
    return tuple((dr, dc) for dr in (-1, 0, 1) for dc in (-1, 0, 1) if dr or dc)


def label_components(bits: np.ndarray, connectivity: int = 8) -> tuple[np.ndarray, list[int]]:
    """Label foreground components 1..C in row-major first-encounter order.

    Returns the label grid (0 = background) and the size of each component
    (``sizes[i]`` belongs to label ``i + 1``).
    """
    bits = np.asarray(bits, dtype=bool)
    rows, cols = bits.shape
    labels = np.zeros((rows, cols), dtype=np.int64)
    sizes: list[int] = []
    steps = _neighbours(connectivity)
    for r0, c0 in zip(*np.nonzero(bits)):  # nonzero is row-major
        if labels[r0, c0]:
            continue
        lab = len(sizes) + 1
        labels[r0, c0] = lab
        stack = [(r0, c0)]
        size = 0
        while stack:
            r, c = stack.pop()
            size += 1
            for dr, dc in steps:
                rr, cc = r + dr, c + dc
                if 0 <= rr < rows and 0 <= cc < cols and bits[rr, cc] and not labels[rr, cc]:
                    labels[rr, cc] = lab
                    stack.append((rr, cc))
        sizes.append(size)
    return labels, sizes


def remove_small(bits: np.ndarray, min_size: int, connectivity: int = 8) -> np.ndarray:
    labels, sizes = label_components(bits, connectivity)
    keep = np.r_[False, np.asarray(sizes, dtype=np.int64) >= min_size]
    return keep[labels]


def _cross(o, a, b) -> int:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def convex_hull(points) -> list[tuple[int, int]]:
    """Andrew's monotone chain on integer points; counter-clockwise, no collinear vertices."""
    pts = sorted(set((int(x), int(y)) for x, y in points))
    if len(pts) <= 2:
        return pts
    lower: list[tuple[int, int]] = []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[int, int]] = []
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def _on_segment(a, b, p) -> bool:
    return (
        _cross(a, b, p) == 0
        and min(a[0], b[0]) <= p[0] <= max(a[0], b[0])
        and min(a[1], b[1]) <= p[1] <= max(a[1], b[1])
    )


def hull_fill_points(points) -> list[tuple[int, int]]:
    """All lattice points inside or on the convex hull of ``points``."""
    hull = convex_hull(points)
    if not hull:
        return []
    xs = [p[0] for p in hull]
    ys = [p[1] for p in hull]
    out = []
    for x in range(min(xs), max(xs) + 1):
        for y in range(min(ys), max(ys) + 1):
            p = (x, y)
            if len(hull) == 1:
                inside = p == hull[0]
            elif len(hull) == 2:
                inside = _on_segment(hull[0], hull[1], p)
            else:
                inside = all(
                    _cross(hull[i], hull[(i + 1) % len(hull)], p) >= 0 for i in range(len(hull))
                )
            if inside:
                out.append(p)
    return out


def fill_component_hulls(bits: np.ndarray, connectivity: int = 8) -> tuple[list[np.ndarray], list[int]]:
    """Hull-filled mask per component (label order) and each filled area.

    A cell is filled iff its center lies in or on the hull polygon of the
    component's cell centers.
    """
    labels, sizes = label_components(bits, connectivity)
    filled, areas = [], []
    for lab in range(1, len(sizes) + 1):
        rr, cc = np.nonzero(labels == lab)
        pts = hull_fill_points(zip(cc.tolist(), rr.tolist()))
        m = np.zeros_like(bits, dtype=bool)
        for x, y in pts:
            m[y, x] = True
        filled.append(m)
        areas.append(len(pts))
    return filled, areas


def select_largest(areas, n_keep: int) -> list[int]:
    """Indices of the ``n_keep`` largest areas; ties go to the smaller index."""
    order = sorted(range(len(areas)), key=lambda i: (-areas[i], i))
    return sorted(order[:n_keep])


@dataclass
class RefineResult:
    mask: GridMask
    n_components: int  # components kept at the last stage
    empty: bool


def refine_mask(mask: GridMask, params: RefineParams = RefineParams()) -> RefineResult:
    bits = closing(mask.bits, params.closing_radius)
    bits = remove_small(bits, params.min_component_patches, params.connectivity)
    filled, areas = fill_component_hulls(bits, params.connectivity)
    out = np.zeros_like(bits)
    keep = select_largest(areas, params.n_keep)
    for i in keep:
        out |= filled[i]
    return RefineResult(GridMask(out), len(keep), not out.any())


def filter_bag(bag: FeatureBag, mask: GridMask) -> FeatureBag:
    """Rows of ``bag`` whose coordinate is set in ``mask``, in original order."""
    c, r = bag.coords[:, 0], bag.coords[:, 1]
    if bag.n_instances and ((c >= mask.cols).any() or (r >= mask.rows).any()):
        raise CoordOutOfBounds(f"{bag.slide_id}: coords exceed {mask.cols}x{mask.rows} mask")
    rows = np.flatnonzero(mask.bits[r, c])
    if rows.size == 0:
        raise EmptyTumorBulk(f"{bag.slide_id}: no patch inside the tumor bulk")
    return bag.subset(rows)


def grid_dims(coords) -> tuple[int, int]:
    coords = np.asarray(coords).reshape(-1, 2)
    return int(coords[:, 0].max()) + 1, int(coords[:, 1].max()) + 1


# ---------------------------------------------------------------------------
# PGM masks


def write_mask_pgm(path, mask: GridMask):
    from .tileproc import write_pgm

    write_pgm(path, np.where(mask.bits, 255, 0).astype(np.uint8))


def read_mask_pgm(path) -> GridMask:
    from .tileproc import read_pgm

    return GridMask(read_pgm(Path(path)) > 0)
