"""Quality measures for light-field pseudo-sequences.

Per-SAI MSE grids are rows x cols float arrays in squared 8-bit pixel units. Cells
that no frame of the pseudo-sequence maps to hold NaN; they are left out of
every sum, while normalisation stays over all rows*cols SAIs.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import InputError
from .grid import ConfidenceGrid, SaiGridDims, ScanOrder

PEAK = 255.0
CHANNEL_WEIGHTS = (6.0, 1.0, 1.0)

# (dk, dl, factor) for one orientation of each neighbour direction
_NEIGHBOUR_OFFSETS = ((0, 1, 2.0), (1, 0, 2.0), (1, 1, 1.0), (1, -1, 1.0))


def frame_mse(reference, distorted) -> float:
    ref = np.asarray(reference, dtype=np.float64)
    dist = np.asarray(distorted, dtype=np.float64)
    if ref.shape != dist.shape:
        raise InputError(f"plane shapes differ: {ref.shape} vs {dist.shape}")
    if ref.size == 0:
        raise InputError("empty plane")
    diff = ref - dist
    return float(np.mean(diff * diff))


def combine_channels(mse_y: float, mse_u: float, mse_v: float) -> float:
    """6:1:1 luma/chroma weighting."""
    if min(mse_y, mse_u, mse_v) < 0:
        raise InputError("channel MSEs must be non-negative")
    wy, wu, wv = CHANNEL_WEIGHTS
    return (wy * mse_y + wu * mse_u + wv * mse_v) / (wy + wu + wv)


def confidence_weight(confs):
    """Confidence-to-weight map, c -> c**2. Accepts scalars or arrays."""
    a = np.asarray(confs, dtype=float)
    if np.any(~np.isfinite(a)) or np.any(a < 0.0) or np.any(a > 1.0):
        raise InputError("confidence must lie in [0, 1]")
    out = a * a
    return float(out) if out.ndim == 0 else out


def neighbour_factor(a: tuple[int, int], b: tuple[int, int]) -> int:
    dk, dl = abs(a[0] - b[0]), abs(a[1] - b[1])
    if dk + dl == 1:
        return 2
    if dk == 1 and dl == 1:
        return 1
    return 0


def adjacency_weight(conf_a: float, conf_b: float) -> float:
    return confidence_weight(min(conf_a, conf_b))


def _weights(confidence) -> np.ndarray:
    if isinstance(confidence, ConfidenceGrid):
        return confidence.values
    return ConfidenceGrid(confidence).values


def _check_shapes(mse, confs):
    mse = np.asarray(mse, dtype=float)
    if mse.shape != confs.shape:
        raise InputError(f"MSE grid {mse.shape} does not match confidence grid {confs.shape}")
    if np.any(mse[~np.isnan(mse)] < 0):
        raise InputError("MSE grid has negative entries")
    return mse


def weighted_mse(mse_grid, confidence) -> float:
    confs = _weights(confidence)
    mse = _check_shapes(mse_grid, confs)
    mapped = ~np.isnan(mse)
    return float(np.sum(confidence_weight(confs)[mapped] * mse[mapped]) / confs.size)


def smoothness_penalty(mse_grid, confidence) -> float:
    """Adjacency-weighted squared MSE differences over ordered SAI pairs.

    Only 4- and 8-neighbours contribute, so each neighbour direction is
    evaluated once on shifted views and doubled for the reversed pair.
    """
    confs = _weights(confidence)
    mse = _check_shapes(mse_grid, confs)
    rows, cols = mse.shape
    total = 0.0
    for dk, dl, dlt in _NEIGHBOUR_OFFSETS:
        k0, k1 = 0, rows - dk
        l0, l1 = max(0, -dl), cols - max(0, dl)
        if k1 <= k0 or l1 <= l0:
            continue
        a = mse[k0:k1, l0:l1]
        b = mse[k0 + dk:k1 + dk, l0 + dl:l1 + dl]
        wa = confs[k0:k1, l0:l1]
        wb = confs[k0 + dk:k1 + dk, l0 + dl:l1 + dl]
        terms = dlt * np.minimum(wa, wb) ** 2 * (a - b) ** 2
        total += float(np.sum(terms[~np.isnan(terms)]))
    return 2.0 * total


def smoothness_penalty_reference(mse_grid, confidence) -> float:
    """Literal double loop over every ordered pair of distinct cells."""
    confs = _weights(confidence)
    mse = _check_shapes(mse_grid, confs)
    rows, cols = mse.shape
    total = 0.0
    for k in range(rows):
        for l in range(cols):
            for m in range(rows):
                for n in range(cols):
                    if (k, l) == (m, n):
                        continue
                    a, b = mse[k, l], mse[m, n]
                    if math.isnan(a) or math.isnan(b):
                        continue
                    total += neighbour_factor((k, l), (m, n)) * adjacency_weight(confs[k, l], confs[m, n]) * (a - b) ** 2
    return total


def _n_sai(dims) -> int:
    if isinstance(dims, SaiGridDims):
        return dims.n_sai
    n = int(dims)
    if n < 1:
        raise InputError("number of SAIs must be positive")
    return n


def combined_target(wmse: float, sp: float, smooth_weight: float, dims) -> float:
    if wmse < 0 or sp < 0 or smooth_weight < 0:
        raise InputError("wmse, sp and lambda must be non-negative")
    return wmse + smooth_weight * math.sqrt(sp) / _n_sai(dims)


def target_to_db(target: float) -> float:
    """PSNR-style dB form of the target: 10 log10(255^2 / target)."""
    if not target > 0:
        raise InputError(f"target must be positive to express in dB, got {target!r}")
    return 10.0 * math.log10(PEAK * PEAK / target)


def interp_sq_error_expectation(d00: float, d01: float, d10: float, d11: float) -> float:
    """Mean squared bilinear interpolation error over the unit uv square,
    given the corner coding distortions."""
    sq = d00 * d00 + d01 * d01 + d10 * d10 + d11 * d11
    diag = d00 * d11 + d01 * d10
    edge = d00 * d01 + d00 * d10 + d01 * d11 + d10 * d11
    return sq / 9.0 + diag / 18.0 + edge / 9.0


# -- reports -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class QualityReport:
    wmse: float
    sp: float
    target: float
    target_db: float
    smooth_weight: float
    per_sai_mse: np.ndarray

    def to_dict(self) -> dict:
        grid = [[None if math.isnan(v) else float(v) for v in row] for row in self.per_sai_mse]
        return {
            "wmse": self.wmse,
            "sp": self.sp,
            "target": self.target,
            "target_db": self.target_db if math.isfinite(self.target_db) else "inf",
            "lambda": self.smooth_weight,
            "per_sai_mse": grid,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "QualityReport":
        grid = np.array([[np.nan if v is None else v for v in row] for row in d["per_sai_mse"]], dtype=float)
        tp = d["target_db"]
        return cls(d["wmse"], d["sp"], d["target"], math.inf if tp == "inf" else tp, d["lambda"], grid)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @property
    def target_db_label(self) -> str:
        return "inf dB" if math.isinf(self.target_db) else f"{self.target_db:.4f} dB"


def quality_report(mse_grid, confidence, smooth_weight: float) -> QualityReport:
    confs = _weights(confidence)
    mse = _check_shapes(mse_grid, confs)
    wm = weighted_mse(mse, confs)
    sp = smoothness_penalty(mse, confs)
    target = combined_target(wm, sp, smooth_weight, confs.size)
    tp = target_to_db(target) if target > 0 else math.inf
    grid = mse.copy()
    grid.setflags(write=False)
    return QualityReport(wm, sp, target, tp, float(smooth_weight), grid)


# -- BD-rate -----------------------------------------------------------------

@dataclass(frozen=True)
class RdCurvePoint:
    bits: float
    quality: float

    def __post_init__(self):
        if not self.bits > 0:
            raise InputError("curve points need positive bits")


def _curve_arrays(curve) -> tuple[np.ndarray, np.ndarray]:
    pts = [p if isinstance(p, RdCurvePoint) else RdCurvePoint(*p) for p in curve]
    if len(pts) < 4:
        raise InputError(f"BD-rate needs at least 4 points per curve, got {len(pts)}")
    pts.sort(key=lambda p: p.bits)
    bits = np.array([p.bits for p in pts], dtype=float)
    quality = np.array([p.quality for p in pts], dtype=float)
    if np.any(np.diff(bits) <= 0) or np.any(np.diff(quality) <= 0):
        raise InputError("R-D curve must have quality strictly increasing with bits")
    return bits, quality


def bd_rate(anchor_curve, test_curve) -> float:
    """Bjontegaard delta rate of ``test`` against ``anchor`` in percent.

    Cubic fit of log10(bits) against quality for each curve, integrated over
    the shared quality interval. Negative means the test curve needs fewer
    bits for the same quality.
    """
    ra, qa = _curve_arrays(anchor_curve)
    rt, qt = _curve_arrays(test_curve)
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if not hi > lo:
        raise InputError("R-D curves have no overlapping quality range")
    pa = np.polyint(np.polyfit(qa, np.log10(ra), 3))
    pt = np.polyint(np.polyfit(qt, np.log10(rt), 3))
    int_a = np.polyval(pa, hi) - np.polyval(pa, lo)
    int_t = np.polyval(pt, hi) - np.polyval(pt, lo)
    avg = (int_t - int_a) / (hi - lo)
    return float((10.0 ** avg - 1.0) * 100.0)


# -- raw planar frames -------------------------------------------------------

def read_yuv420(path, dims: SaiGridDims) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Yield (Y, U, V) uint8 planes of an 8-bit planar 4:2:0 file."""
    height, width = dims.height, dims.width
    if height % 2 or width % 2:
        raise InputError("4:2:0 frames need even height and width")
    luma, chroma = height * width, (height // 2) * (width // 2)
    frame_bytes = luma + 2 * chroma
    size = os.path.getsize(path)
    if size % frame_bytes:
        raise InputError(f"{path}: size {size} is not a multiple of the frame size {frame_bytes}")
    with open(path, "rb") as fh:
        while True:
            buf = fh.read(frame_bytes)
            if not buf:
                return
            a = np.frombuffer(buf, dtype=np.uint8)
            yield (a[:luma].reshape(height, width),
                   a[luma:luma + chroma].reshape(height // 2, width // 2),
                   a[luma + chroma:].reshape(height // 2, width // 2))


def write_yuv420(path, frames: Sequence[tuple[np.ndarray, np.ndarray, np.ndarray]]) -> None:
    with open(path, "wb") as fh:
        for planes in frames:
            for p in planes:
                fh.write(np.asarray(p, dtype=np.uint8).tobytes())


def sequence_mse(reference_path, distorted_path, dims: SaiGridDims,
                 luma_only: bool = False) -> list[tuple[float, float, float, float]]:
    """Per-frame (combined, y, u, v) MSE of two 4:2:0 pseudo-sequences."""
    out = []
    ref_frames = read_yuv420(reference_path, dims)
    dist_frames = read_yuv420(distorted_path, dims)
    for ref, dist in zip(ref_frames, dist_frames, strict=False):
        y, u, v = (frame_mse(a, b) for a, b in zip(ref, dist))
        out.append((y if luma_only else combine_channels(y, u, v), y, u, v))
    if os.path.getsize(reference_path) != os.path.getsize(distorted_path):
        raise InputError("reference and distorted sequences have different frame counts")
    return out


def sai_mse_grid(per_frame_mse: Sequence[float], scan: ScanOrder) -> np.ndarray:
    return scan.to_grid(per_frame_mse)
