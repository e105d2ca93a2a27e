"""Chip extraction and quadrant x cluster stratified sampling."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import DomainError, ParameterError

if TYPE_CHECKING:
    from .composite import GridComposite

QUADRANTS = ("NW", "NE", "SW", "SE")


@dataclass(eq=False)
class ImageChip:
    """One H x W x 14 chip; NaN marks fill pixels."""

    data: np.ndarray
    origin: tuple[int, int] = (0, 0)
    quadrant: str = "NW"
    source_date: str = "unknown"
    chip_id: str = ""
    fill_fraction: float | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.data.ndim != 3:
            raise ParameterError(f"chip data must be H x W x bands, got {self.data.shape}")
        computed = float(np.mean(~np.all(np.isfinite(self.data), axis=-1)))
        if self.fill_fraction is None:
            self.fill_fraction = computed

    @property
    def size(self) -> int:
        return self.data.shape[0]

    def chw(self, fill_value: float = 0.0) -> np.ndarray:
        """Channel-first float32 copy with fill replaced, ready for the model."""
        return np.nan_to_num(self.data, nan=fill_value).transpose(2, 0, 1).astype(np.float32)


def quadrant_of(center_row: float, center_col: float, n_rows: int, n_cols: int) -> str:
    ns = "N" if center_row < n_rows / 2 else "S"
    ew = "W" if center_col < n_cols / 2 else "E"
    return ns + ew


def extract_chips(comp: "GridComposite", chip_size: int, stride: int,
                  max_fill: float = 0.05) -> list[ImageChip]:
    n_rows, n_cols = comp.filled.shape
    if chip_size > n_rows or chip_size > n_cols or chip_size < 1:
        raise ParameterError(f"chip_size {chip_size} does not fit a {n_rows}x{n_cols} grid")
    if not 0 < stride <= chip_size:
        raise ParameterError("stride must satisfy 0 < stride <= chip_size")
    chips = []
    for r0 in range(0, n_rows - chip_size + 1, stride):
        for c0 in range(0, n_cols - chip_size + 1, stride):
            filled = comp.filled[r0:r0 + chip_size, c0:c0 + chip_size]
            fill_fraction = 1.0 - float(filled.mean())
            if fill_fraction > max_fill:
                continue
            data = comp.values[r0:r0 + chip_size, c0:c0 + chip_size].astype(np.float32)
            chips.append(ImageChip(
                data=data,
                origin=(r0, c0),
                quadrant=quadrant_of(r0 + chip_size / 2, c0 + chip_size / 2, n_rows, n_cols),
                source_date=comp.date,
                chip_id=f"{comp.date}_{r0:05d}_{c0:05d}",
                fill_fraction=fill_fraction,
            ))
    return chips


def chip_features(chip: ImageChip) -> np.ndarray:
    """Per-band mean followed by per-band population std over non-fill pixels (28 values)."""
    flat = chip.data.reshape(-1, chip.data.shape[-1]).astype(np.float64)
    valid = np.all(np.isfinite(flat), axis=1)
    if not valid.any():
        raise DomainError(f"chip {chip.chip_id!r} is entirely fill")
    v = flat[valid]
    return np.concatenate([v.mean(axis=0), v.std(axis=0)])


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia_history: list[float]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeans_cluster(features, k: int, seed: int = 0, iters: int = 50) -> KMeansResult:
    """Lloyd's algorithm with seeded k-means++ initialisation.

    ``inertia_history[i]`` is the within-cluster sum of squares after the i-th
    assignment step; it never increases.  An emptied cluster keeps its old
    centroid.
    """
    x = np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if k < 1 or k > n:
        raise ParameterError(f"k must lie in 1..{n}, got {k}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    closest = _sq_dists(x, centroids[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centroids[j] = x[idx]
        closest = np.minimum(closest, _sq_dists(x, centroids[j:j + 1])[:, 0])

    history: list[float] = []
    assign = np.full(n, -1)
    for _ in range(max(iters, 1)):
        d = _sq_dists(x, centroids)
        new_assign = d.argmin(axis=1)
        history.append(float(d[np.arange(n), new_assign].sum()))
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = x[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    return KMeansResult(assign, centroids, history)


@dataclass
class SampleResult:
    selected: list[str]
    strata: dict[str, list[str]]
    allocation: dict[str, int]


def stratum_label(quadrant: str, cluster: int) -> str:
    return f"{quadrant}/c{int(cluster)}"


def allocate(sizes: dict[str, int], n_target: int, order: Sequence[str]) -> dict[str, int]:
    """Split ``n_target`` as evenly as possible over strata with finite capacity.

    Every stratum is filled up to a common level (or its capacity, whichever
    is smaller); the deficit left by small strata is then handed out one chip
    at a time, round-robin in ``order``, to strata that still have chips.
    """
    if n_target > sum(sizes.values()):
        raise ParameterError("n_target exceeds the number of available chips")
    level = 0
    while sum(min(n, level + 1) for n in sizes.values()) <= n_target and level < max(sizes.values(), default=0):
        level += 1
    alloc = {s: min(n, level) for s, n in sizes.items()}
    remaining = n_target - sum(alloc.values())
    for s in order:
        if remaining == 0:
            break
        if alloc[s] < sizes[s]:
            alloc[s] += 1
            remaining -= 1
    return alloc


def stratified_sample(chips: Sequence[ImageChip], assignments, n_target: int,
                      seed: int = 0) -> SampleResult:
    if n_target > len(chips) or n_target < 0:
        raise ParameterError(f"n_target {n_target} outside 0..{len(chips)}")
    members: dict[str, list[str]] = defaultdict(list)
    for chip, a in zip(chips, assignments):
        members[stratum_label(chip.quadrant, a)].append(chip.chip_id)
    labels = sorted(members)
    rng = np.random.default_rng(seed)
    order = [labels[i] for i in rng.permutation(len(labels))]
    alloc = allocate({s: len(members[s]) for s in labels}, n_target, order)

    strata: dict[str, list[str]] = {}
    for s in labels:
        ids = members[s]
        picked = rng.choice(len(ids), size=alloc[s], replace=False) if alloc[s] else []
        strata[s] = sorted(ids[i] for i in picked)
    selected = sorted(i for ids in strata.values() for i in ids)
    return SampleResult(selected, strata, alloc)
