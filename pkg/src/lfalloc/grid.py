"""Angular-grid geometry: SAI grid dimensions, confidence grids, pseudo-sequence
scan orders and GOP grouping.

The Python API is 0-based throughout: frame ``i`` is the ``i``-th frame of the
pseudo-sequence and cell ``(k, l)`` is row ``k``, column ``l`` of the uv grid.
Files on disk (scan-order CSV, stats CSV, QP files) use 1-based indices.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InputError

SCAN_KINDS = ("raster", "snake", "spiral", "custom")
DEFAULT_SCAN = "snake"


@dataclass(frozen=True)
class SaiGridDims:
    rows: int
    cols: int
    height: int = 1
    width: int = 1

    def __post_init__(self):
        for name in ("rows", "cols", "height", "width"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise InputError(f"grid dimension {name} must be a positive integer, got {value!r}")

    @property
    def n_sai(self) -> int:
        return self.rows * self.cols

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)


@dataclass(frozen=True, eq=False)
class ConfidenceGrid:
    """Per-SAI average confidences, already rescaled to [0, 1]."""

    values: np.ndarray

    def __post_init__(self):
        confs = np.array(self.values, dtype=float)
        if confs.ndim != 2 or confs.size == 0:
            raise InputError("confidence grid must be a non-empty 2-D array")
        if not np.all(np.isfinite(confs)) or confs.min() < 0.0 or confs.max() > 1.0:
            raise InputError("confidence values must lie in [0, 1]")
        confs.setflags(write=False)
        object.__setattr__(self, "values", confs)

    @property
    def dims(self) -> SaiGridDims:
        return SaiGridDims(*self.values.shape)

    @classmethod
    def uniform(cls, rows: int, cols: int) -> "ConfidenceGrid":
        return cls(np.ones((rows, cols)))

    @classmethod
    def from_raw(cls, raw) -> "ConfidenceGrid":
        return cls(rescale_confidence(raw))

    def __eq__(self, other):
        return isinstance(other, ConfidenceGrid) and np.array_equal(self.values, other.values)

    __hash__ = None


def rescale_confidence(raw) -> np.ndarray:
    """Affine rescale to [0, 1]; an all-equal grid maps to all ones."""
    x = np.array(raw, dtype=float)
    if x.ndim != 2 or x.size == 0:
        raise InputError("confidence grid must be a non-empty 2-D array")
    if not np.all(np.isfinite(x)):
        raise InputError("confidence grid contains non-finite values")
    lo, hi = x.min(), x.max()
    if hi > lo:
        return (x - lo) / (hi - lo)
    return np.ones_like(x)


def _read_text(source) -> str:
    if hasattr(source, "read"):
        return source.read()
    with open(os.fspath(source), encoding="utf-8") as fh:
        return fh.read()


def load_confidence(source) -> ConfidenceGrid:
    """Read a rows x cols confidence CSV (one row per k) and rescale it to [0, 1]."""
    rows = []
    for lineno, row in enumerate(csv.reader(io.StringIO(_read_text(source))), 1):
        cells = [c.strip() for c in row]
        if not cells or all(c == "" for c in cells):
            continue
        try:
            rows.append([float(c) for c in cells])
        except ValueError:
            raise InputError(f"confidence CSV line {lineno}: non-numeric cell in {row!r}") from None
    if not rows:
        raise InputError("confidence CSV is empty")
    if len({len(r) for r in rows}) != 1:
        raise InputError("confidence CSV has ragged rows")
    return ConfidenceGrid.from_raw(rows)


def write_confidence(path, confidence: ConfidenceGrid) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in confidence.values:
            writer.writerow([repr(float(v)) for v in row])


@dataclass(frozen=True)
class ScanOrder:
    """Injective map from pseudo-sequence frame index to uv cell."""

    kind: str
    dims: SaiGridDims
    cells: tuple[tuple[int, int], ...]
    _inverse: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.kind not in SCAN_KINDS:
            raise InputError(f"unknown scan order kind {self.kind!r}")
        cells = tuple((int(k), int(l)) for k, l in self.cells)
        inverse = {}
        for i, (k, l) in enumerate(cells):
            if not (0 <= k < self.dims.rows and 0 <= l < self.dims.cols):
                raise InputError(f"frame {i} maps outside the {self.dims.rows}x{self.dims.cols} grid: {(k, l)}")
            if (k, l) in inverse:
                raise InputError(f"cell {(k, l)} is mapped by frames {inverse[(k, l)]} and {i}")
            inverse[(k, l)] = i
        object.__setattr__(self, "cells", cells)
        object.__setattr__(self, "_inverse", inverse)

    @property
    def frame_count(self) -> int:
        return len(self.cells)

    def cell(self, frame: int) -> tuple[int, int]:
        return self.cells[frame]

    def frame(self, cell: tuple[int, int]) -> int:
        try:
            return self._inverse[tuple(cell)]
        except KeyError:
            raise InputError(f"cell {cell} is not mapped by the scan order") from None

    def is_mapped(self, cell) -> bool:
        return tuple(cell) in self._inverse

    def to_grid(self, values: Sequence[float], fill=np.nan) -> np.ndarray:
        """Scatter per-frame values onto a rows x cols array; unmapped cells get ``fill``."""
        if len(values) != self.frame_count:
            raise InputError(f"expected {self.frame_count} per-frame values, got {len(values)}")
        grid = np.full(self.dims.shape, fill, dtype=float)
        for (k, l), v in zip(self.cells, values):
            grid[k, l] = v
        return grid

    def from_grid(self, grid) -> np.ndarray:
        grid = np.asarray(grid, dtype=float)
        return np.array([grid[k, l] for k, l in self.cells])


def _raster(rows, cols):
    return [(k, l) for k in range(rows) for l in range(cols)]


def _snake(rows, cols):
    out = []
    for k in range(rows):
        order = range(cols) if k % 2 == 0 else range(cols - 1, -1, -1)
        out.extend((k, l) for l in order)
    return out


def _spiral(rows, cols):
    # outward and clockwise (right, down, left, up) from the centre cell
    k, l = (rows - 1) // 2, (cols - 1) // 2
    out = [(k, l)]
    moves = ((0, 1), (1, 0), (0, -1), (-1, 0))
    run, d = 1, 0
    while len(out) < rows * cols:
        for _ in range(2):
            dk, dl = moves[d % 4]
            for _ in range(run):
                k, l = k + dk, l + dl
                if 0 <= k < rows and 0 <= l < cols:
                    out.append((k, l))
            d += 1
        run += 1
    return out


_BUILTIN = {"raster": _raster, "snake": _snake, "spiral": _spiral}


def read_scan_mapping(source) -> list[tuple[int, int, int]]:
    """Parse ``frame_index,k,l`` lines (1-based) into 0-based triples."""
    triples = []
    for lineno, row in enumerate(csv.reader(io.StringIO(_read_text(source))), 1):
        if not row or all(c.strip() == "" for c in row):
            continue
        if len(row) != 3:
            raise InputError(f"scan mapping line {lineno}: expected 3 fields, got {len(row)}")
        try:
            i, k, l = (int(c) for c in row)
        except ValueError:
            if lineno == 1:
                continue  # header
            raise InputError(f"scan mapping line {lineno}: non-integer field in {row!r}") from None
        triples.append((i - 1, k - 1, l - 1))
    return triples


def build_scan_order(kind: str, dims: SaiGridDims, frame_count: int | None = None,
                     mapping=None) -> ScanOrder:
    """Map frames ``0..frame_count-1`` onto the grid.

    Built-in kinds take the first ``frame_count`` cells of their full traversal.
    ``custom`` reads an explicit mapping (path or file object) whose frame
    indices must be exactly ``1..frame_count``.
    """
    if frame_count is None:
        frame_count = dims.n_sai
    if frame_count < 1:
        raise InputError("frame_count must be at least 1")
    if frame_count > dims.n_sai:
        raise InputError(f"{frame_count} frames do not fit a {dims.rows}x{dims.cols} grid")
    if kind == "custom":
        if mapping is None:
            raise InputError("custom scan order requires a mapping file")
        triples = read_scan_mapping(mapping)
        by_frame = {}
        for i, k, l in triples:
            if i in by_frame:
                raise InputError(f"frame {i + 1} appears twice in the scan mapping")
            by_frame[i] = (k, l)
        if sorted(by_frame) != list(range(frame_count)):
            raise InputError(f"scan mapping must cover frames 1..{frame_count} exactly")
        cells = [by_frame[i] for i in range(frame_count)]
    elif kind in _BUILTIN:
        cells = _BUILTIN[kind](dims.rows, dims.cols)[:frame_count]
    else:
        raise InputError(f"unknown scan order kind {kind!r}")
    return ScanOrder(kind, SaiGridDims(dims.rows, dims.cols, dims.height, dims.width), tuple(cells))


def write_scan_mapping(path, scan: ScanOrder) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for i, (k, l) in enumerate(scan.cells):
            writer.writerow([i + 1, k + 1, l + 1])


@dataclass(frozen=True)
class GopGrouping:
    frame_count: int
    gop_size: int
    groups: tuple[range, ...]

    @property
    def m(self) -> int:
        return len(self.groups)

    def gop_of(self, frame: int) -> int:
        if not 0 <= frame < self.frame_count:
            raise InputError(f"frame {frame} outside 0..{self.frame_count - 1}")
        return frame // self.gop_size

    def position(self, frame: int) -> int:
        """Position of ``frame`` inside its GOP (0-based)."""
        return frame - self.gop_of(frame) * self.gop_size

    def frame_to_gop(self) -> np.ndarray:
        return np.arange(self.frame_count) // self.gop_size


def group_gops(frame_count: int, gop_size: int) -> GopGrouping:
    if frame_count < 1 or gop_size < 1:
        raise InputError("frame_count and gop_size must both be >= 1")
    m = math.ceil(frame_count / gop_size)
    groups = tuple(range(t * gop_size, min((t + 1) * gop_size, frame_count)) for t in range(m))
    return GopGrouping(frame_count, gop_size, groups)


def plateau_confidence(rows: int, cols: int, radius: float | None = None, softness: float = 0.8) -> ConfidenceGrid:
    """Synthetic confidence: flat high plateau in the centre, falling to the rim.

    Mimics the shape measured on plenoptic captures, where the outer
    micro-lens views are the least reliable.
    """
    if radius is None:
        radius = 0.3 * min(rows, cols)
    kc, lc = (rows - 1) / 2.0, (cols - 1) / 2.0
    kk, ll = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    r = np.hypot(kk - kc, ll - lc)
    raw = 1.0 / (1.0 + np.exp((r - radius) / softness))
    return ConfidenceGrid.from_raw(raw)

