"""Partition of feature-map cells into parts, and per-part average pooling.

Feature maps in this module are ``(H, W, C)`` numpy arrays. A part assignment
is an ``(H, W)`` integer grid with values in ``1..n``; part 1 is the innermost
ring for the square-ring strategy, the top band for rows and the left band for
columns.

Ring boundaries: with ``m = ceil(L / 2)`` for an axis of length ``L`` and ``d``
the distance of a cell from the central band of that axis (one cell wide for
odd ``L``, two for even ``L``), ring ``i`` covers
``floor((i - 1) * m / n) <= d < floor(i * m / n)``. On non-square maps the ring
index is computed per axis and the larger one wins, which gives rectangular
annuli that reduce to Chebyshev rings when ``H == W``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

__all__ = [
    "Strategy",
    "PartitionSpec",
    "PartAssignment",
    "build_assignment",
    "partition_pool",
    "pool_gradient",
    "global_average_pool",
    "save_assignment",
    "load_assignment",
]


class Strategy(str, enum.Enum):
    SQUARE_RING = "square_ring"
    ROW = "row"
    COLUMN = "column"

    @classmethod
    def parse(cls, value: "str | Strategy") -> "Strategy":
        if isinstance(value, Strategy):
            return value
        key = str(value).strip().lower().replace("-", "_")
        aliases = {"squarering": "square_ring", "ring": "square_ring", "rows": "row", "columns": "column", "col": "column"}
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown partition strategy {value!r}; expected one of "
                             f"{[s.value for s in cls]}") from None


@dataclass(frozen=True)
class PartitionSpec:
    strategy: Strategy = Strategy.SQUARE_RING
    n: int = 4

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        if isinstance(self.n, bool) or int(self.n) != self.n or self.n < 1:
            raise ValueError(f"part count n must be a positive integer, got {self.n!r}")
        object.__setattr__(self, "n", int(self.n))

    def max_parts(self, H: int, W: int) -> int:
        if self.strategy is Strategy.SQUARE_RING:
            return -(-min(H, W) // 2)
        if self.strategy is Strategy.ROW:
            return H
        return W

    def validate(self, H: int, W: int) -> None:
        if H < 1 or W < 1:
            raise ValueError(f"feature map must have H >= 1 and W >= 1, got {H}x{W}")
        bound = self.max_parts(H, W)
        if self.n > bound:
            rule = {
                Strategy.SQUARE_RING: "n <= ceil(min(H, W) / 2)",
                Strategy.ROW: "n <= H",
                Strategy.COLUMN: "n <= W",
            }[self.strategy]
            raise ValueError(f"{self.strategy.value} partition with n={self.n} violates {rule} "
                             f"= {bound} for a {H}x{W} map")


@dataclass(frozen=True, eq=False)
class PartAssignment:
    """Immutable cell-to-part grid. ``grid[h, w]`` is a part index in ``1..n``."""

    grid: np.ndarray
    n: int
    spec: PartitionSpec | None = None
    counts: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        grid = np.array(self.grid, dtype=np.int64)
        if grid.ndim != 2:
            raise ValueError(f"assignment grid must be 2-D, got shape {grid.shape}")
        if grid.size and (grid.min() < 1 or grid.max() > self.n):
            raise ValueError(f"assignment values must lie in [1, {self.n}]")
        counts = np.bincount(grid.ravel() - 1, minlength=self.n)
        if np.any(counts == 0):
            empty = [int(i) + 1 for i in np.flatnonzero(counts == 0)]
            raise ValueError(f"parts {empty} have no cells")
        grid.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "counts", counts)

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    def __eq__(self, other):
        if not isinstance(other, PartAssignment):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.grid, other.grid)

    def __hash__(self):
        return hash((self.n, self.grid.shape, self.grid.tobytes()))

    def one_hot(self) -> np.ndarray:
        """``(H * W, n)`` membership matrix in row-major cell order."""
        return (self.grid.reshape(-1, 1) == np.arange(1, self.n + 1)).astype(np.float64)


def _axis_band_distance(length: int) -> np.ndarray:
    lo, hi = (length - 1) // 2, length // 2
    idx = np.arange(length)
    return np.maximum(0, np.maximum(lo - idx, idx - hi))


def _bands(n: int, length: int) -> np.ndarray:
    # lower edges floor((i-1) * length / n), i = 1..n
    return (np.arange(n) * length) // n


def _ring_index(n: int, length: int) -> np.ndarray:
    d = _axis_band_distance(length)
    m = -(-length // 2)
    return np.searchsorted(_bands(n, m), d, side="right")


@lru_cache(maxsize=256)
def _build(strategy: Strategy, n: int, H: int, W: int) -> PartAssignment:
    spec = PartitionSpec(strategy, n)
    if strategy is Strategy.SQUARE_RING:
        rows, cols = _ring_index(n, H), _ring_index(n, W)
        grid = np.maximum(rows[:, None], cols[None, :])
    elif strategy is Strategy.ROW:
        rows = np.searchsorted(_bands(n, H), np.arange(H), side="right")
        grid = np.broadcast_to(rows[:, None], (H, W))
    else:
        cols = np.searchsorted(_bands(n, W), np.arange(W), side="right")
        grid = np.broadcast_to(cols[None, :], (H, W))
    return PartAssignment(grid, n, spec)


def build_assignment(spec: PartitionSpec, H: int, W: int) -> PartAssignment:
    """Deterministic part grid for an ``H x W`` map.

    Raises ``ValueError`` naming the violated bound when ``spec.n`` is too
    large for the map.
    """
    H, W = int(H), int(W)
    spec.validate(H, W)
    return _build(spec.strategy, spec.n, H, W)


def _check_map(f: np.ndarray, a: PartAssignment) -> np.ndarray:
    f = np.asarray(f)
    if f.ndim != 3:
        raise ValueError(f"feature map must be (H, W, C), got shape {f.shape}")
    if f.shape[:2] != a.shape:
        raise ValueError(f"feature map spatial shape {f.shape[:2]} does not match assignment {a.shape}")
    if f.shape[2] < 1:
        raise ValueError("feature map needs at least one channel")
    return f


def partition_pool(f: np.ndarray, a: PartAssignment) -> np.ndarray:
    """Per-part channel means, shape ``(n, C)``; row ``i - 1`` holds part ``i``."""
    f = _check_map(f, a)
    H, W, C = f.shape
    flat = f.reshape(H * W, C).astype(np.float64, copy=False)
    labels = a.grid.ravel() - 1
    sums = np.zeros((a.n, C), dtype=np.float64)
    np.add.at(sums, labels, flat)
    return sums / a.counts[:, None]


def pool_gradient(f: np.ndarray, a: PartAssignment, upstream) -> np.ndarray:
    """Gradient of ``partition_pool`` w.r.t. the map, given ``(n, C)`` upstream gradients."""
    f = _check_map(f, a)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != (a.n, f.shape[2]):
        raise ValueError(f"upstream must have shape ({a.n}, {f.shape[2]}), got {up.shape}")
    scaled = up / a.counts[:, None]
    return scaled[a.grid - 1]


def global_average_pool(f: np.ndarray) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    return f.reshape(-1, f.shape[-1]).mean(axis=0)


def save_assignment(a: PartAssignment, path) -> None:
    """Write the grid as ``H`` lines of space-separated part indices."""
    lines = [" ".join(str(int(v)) for v in row) for row in a.grid]
    Path(path).write_text("\n".join(lines) + "\n")


def load_assignment(path) -> PartAssignment:
    rows = [line.split() for line in Path(path).read_text().splitlines() if line.strip()]
    if not rows:
        raise ValueError(f"{path}: empty assignment file")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"{path}: ragged rows, widths {sorted(widths)}")
    grid = np.array([[int(v) for v in r] for r in rows], dtype=np.int64)
    return PartAssignment(grid, int(grid.max()))
