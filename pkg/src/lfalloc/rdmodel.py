"""Hyperbolic rate-distortion models fitted from first-pass statistics.

A frame's distortion is modelled as ``d = coefficient * x**exponent`` where ``x`` is
either the frame's own bits (all-intra) or the total bits of the GOP that
contains it (random-access, low-delay with virtual GOPs).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import FitError, InputError
from .grid import GopGrouping
from .metrics import combine_channels

SWEEP_MIN, SWEEP_MAX = 16, 45
WINDOW_HALF_WIDTH = 7
MSE_FLOOR = 1e-6
EXPONENT_MIN, EXPONENT_MAX = -10.0, -1e-3

FRAME_BITS = "frame_bits"
GOP_BITS = "gop_bits"


@dataclass(frozen=True)
class RdSample:
    frame_index: int
    qp: int
    bits: float
    mse: float

    def __post_init__(self):
        if not 0 <= self.qp <= 51:
            raise InputError(f"QP {self.qp} outside [0, 51]")
        if not self.bits > 0:
            raise InputError(f"frame {self.frame_index} at QP {self.qp}: bits must be positive")
        if not self.mse >= 0:
            raise InputError(f"frame {self.frame_index} at QP {self.qp}: MSE must be non-negative")


class RdSampleSet(Mapping):
    """Samples per frame, each frame's list ordered by sweep QP.

    ``qp`` on a sample is the sweep key: the constant frame QP in all-intra
    runs, the GOP base QP otherwise.
    """

    def __init__(self, samples: Iterable[RdSample]):
        by_frame: dict[int, list[RdSample]] = {}
        for s in samples:
            by_frame.setdefault(s.frame_index, []).append(s)
        self._frames = {}
        for f in sorted(by_frame):
            rows = sorted(by_frame[f], key=lambda s: s.qp)
            qps = [s.qp for s in rows]
            if len(set(qps)) != len(qps):
                raise InputError(f"frame {f} has duplicate sweep QPs")
            bits = np.array([s.bits for s in rows])
            if np.any(np.diff(bits) >= 0):
                raise InputError(f"frame {f}: bits must strictly decrease as QP increases")
            self._frames[f] = tuple(rows)
        self._bits = {(s.frame_index, s.qp): s.bits for rows in self._frames.values() for s in rows}

    def __getitem__(self, frame):
        return self._frames[frame]

    def __iter__(self):
        return iter(self._frames)

    def __len__(self):
        return len(self._frames)

    def bits_at(self, frame: int, qp: int) -> float | None:
        return self._bits.get((frame, qp))

    @property
    def sweep_qps(self) -> tuple[int, ...]:
        return tuple(sorted({s.qp for rows in self._frames.values() for s in rows}))

    def samples(self) -> list[RdSample]:
        return [s for rows in self._frames.values() for s in rows]

    def restrict(self, lo: int, hi: int) -> "RdSampleSet":
        return RdSampleSet(s for s in self.samples() if lo <= s.qp <= hi)

    def matrix(self, frames: Sequence[int] | None = None):
        """Dense ``(qps, bits[f, q], mse[f, q])``; every frame must cover every QP."""
        frames = list(self) if frames is None else list(frames)
        qps = self.sweep_qps
        col = {q: j for j, q in enumerate(qps)}
        bits = np.full((len(frames), len(qps)), np.nan)
        mse = np.full_like(bits, np.nan)
        for r, f in enumerate(frames):
            if f not in self._frames:
                raise InputError(f"no samples for frame {f}")
            for s in self._frames[f]:
                bits[r, col[s.qp]] = s.bits
                mse[r, col[s.qp]] = s.mse
        if np.isnan(bits).any():
            raise InputError("sample set does not cover every (frame, QP) pair")
        return np.array(qps), bits, mse

    def totals(self) -> dict[int, float]:
        out: dict[int, float] = {}
        for s in self.samples():
            out[s.qp] = out.get(s.qp, 0.0) + s.bits
        return dict(sorted(out.items()))


def read_stats_csv(source, luma_only: bool = False) -> RdSampleSet:
    """Load first-pass statistics.

    Accepts ``frame_index,qp,bits,mse_y,mse_u,mse_v`` rows (QP is the sweep
    key) or ``sweep_qp,frame_index,qp,bits,mse_y,mse_u,mse_v`` rows as written
    by the pipeline. Indices are 1-based; an optional header is skipped.
    """
    text = source.read() if hasattr(source, "read") else open(source, encoding="utf-8").read()
    samples = []
    for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
        if not row or all(c.strip() == "" for c in row):
            continue
        try:
            vals = [float(c) for c in row]
        except ValueError:
            if lineno == 1:
                continue
            raise InputError(f"stats line {lineno}: non-numeric field in {row!r}") from None
        if len(vals) == 6:
            frame, qp, bits, y, u, v = vals
        elif len(vals) == 7:
            qp, frame, _, bits, y, u, v = vals
        else:
            raise InputError(f"stats line {lineno}: expected 6 or 7 fields, got {len(vals)}")
        mse = y if luma_only else combine_channels(y, u, v)
        samples.append(RdSample(int(frame) - 1, int(qp), bits, mse))
    if not samples:
        raise InputError("stats file has no samples")
    return RdSampleSet(samples)


# -- fit window ------------------------------------------------------------------

def central_qp(totals: Mapping[int, float], target_budget: float) -> int:
    """Sweep QP whose total output size is closest to the budget; ties go low."""
    if not totals:
        raise InputError("no sweep totals to choose a central QP from")
    return min(totals, key=lambda q: (abs(totals[q] - target_budget), q))


def window_bounds(qc: int) -> tuple[int, int]:
    return max(SWEEP_MIN, qc - WINDOW_HALF_WIDTH), min(SWEEP_MAX, qc + WINDOW_HALF_WIDTH)


def select_fit_window(samples: RdSampleSet, target_budget: float,
                      sweep_qps: Sequence[int] | None = None) -> tuple[RdSampleSet, tuple[int, int]]:
    """Keep only the sweep runs whose sizes are near the budget.

    Returns the restricted sample set and the inclusive QP window.
    """
    if len(samples) == 0:
        raise InputError("empty sample set")
    totals = samples.totals()
    if sweep_qps is not None:
        totals = {q: t for q, t in totals.items() if q in set(sweep_qps)}
    lo, hi = window_bounds(central_qp(totals, target_budget))
    return samples.restrict(lo, hi), (lo, hi)


# -- regression --------------------------------------------------------------

@dataclass(frozen=True)
class LogLogFit:
    intercept: float
    slope: float
    r_squared: float
    clamped: int = 0
    degenerate: bool = False


def fit_loglog(x, y) -> LogLogFit:
    """OLS of ln y on ln x. ``y`` below MSE_FLOOR is clamped first."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise FitError("x and y must be 1-D arrays of equal length")
    if np.any(x <= 0):
        raise FitError("regressor values must be positive")
    if len(np.unique(x)) < 2:
        raise FitError("need at least two distinct regressor values")
    clamped = int(np.sum(y < MSE_FLOOR))
    y = np.maximum(y, MSE_FLOOR)
    lx, ly = np.log(x), np.log(y)
    dx, dy = lx - lx.mean(), ly - ly.mean()
    sxx = float(dx @ dx)
    b = float(dx @ dy) / sxx
    a = float(ly.mean() - b * lx.mean())
    sst = float(dy @ dy)
    resid = ly - (a + b * lx)
    ssr = float(resid @ resid)
    if sst == 0.0:
        return LogLogFit(a, b, 1.0, clamped, degenerate=True)
    r2 = min(1.0, max(0.0, 1.0 - ssr / sst))
    return LogLogFit(a, b, r2, clamped)


@dataclass(frozen=True)
class HyperbolicModel:
    coefficient: float
    exponent: float
    r_squared: float
    kind: str = FRAME_BITS
    gop_index: int | None = None
    monotone: bool = True
    raw_exponent: float | None = None
    clamped: int = 0

    def __post_init__(self):
        if not self.coefficient > 0:
            raise InputError("coefficient must be positive")
        if not EXPONENT_MIN <= self.exponent <= EXPONENT_MAX:
            raise InputError(f"exponent {self.exponent} outside [{EXPONENT_MIN}, {EXPONENT_MAX}]")
        if self.kind not in (FRAME_BITS, GOP_BITS):
            raise InputError(f"unknown model kind {self.kind!r}")

    def __call__(self, x):
        return self.coefficient * np.power(x, self.exponent)

    def to_dict(self) -> dict:
        return {
            "coefficient": self.coefficient, "exponent": self.exponent, "r_squared": self.r_squared,
            "kind": self.kind, "gop_index": self.gop_index, "monotone": self.monotone,
            "raw_exponent": self.raw_exponent, "clamped": self.clamped,
        }

    @classmethod
    def from_dict(cls, d) -> "HyperbolicModel":
        return cls(**d)


def _model_from_fit(fit: LogLogFit, kind: str, gop_index=None) -> HyperbolicModel:
    raw = fit.slope
    exponent = min(EXPONENT_MAX, max(EXPONENT_MIN, raw))
    return HyperbolicModel(
        coefficient=float(np.exp(fit.intercept)), exponent=exponent, r_squared=fit.r_squared, kind=kind,
        gop_index=gop_index, monotone=raw < 0 and not fit.degenerate, raw_exponent=raw,
        clamped=fit.clamped,
    )


def fit_frame_model_intra(samples_for_frame: Sequence[RdSample]) -> HyperbolicModel:
    if len(samples_for_frame) < 2:
        raise FitError("need at least two samples to fit a frame model")
    x = [s.bits for s in samples_for_frame]
    y = [s.mse for s in samples_for_frame]
    return _model_from_fit(fit_loglog(x, y), FRAME_BITS)


def gop_totals(frame: int, grouping: GopGrouping, sample_set: RdSampleSet) -> dict[int, float]:
    """Total bits of ``frame``'s GOP at every sweep QP the frame was coded at."""
    t = grouping.gop_of(frame)
    siblings = grouping.groups[t]
    totals = {}
    for s in sample_set[frame]:
        total = 0.0
        for f in siblings:
            bits = sample_set.bits_at(f, s.qp)
            if bits is None:
                raise FitError(f"GOP {t}: frame {f} has no sample at sweep QP {s.qp}")
            total += bits
        totals[s.qp] = total
    return totals


def fit_frame_model_gop(frame: int, grouping: GopGrouping, sample_set: RdSampleSet) -> HyperbolicModel:
    rows = sample_set[frame]
    if len(rows) < 2:
        raise FitError(f"frame {frame}: need at least two samples")
    totals = gop_totals(frame, grouping, sample_set)
    x = [totals[s.qp] for s in rows]
    y = [s.mse for s in rows]
    return _model_from_fit(fit_loglog(x, y), GOP_BITS, grouping.gop_of(frame))


def fit_models(sample_set: RdSampleSet, grouping: GopGrouping | None = None,
               frame_count: int | None = None) -> list[HyperbolicModel]:
    """Fit every frame; ``grouping=None`` selects the all-intra form."""
    n = frame_count if frame_count is not None else len(sample_set)
    if sorted(sample_set) != list(range(n)):
        raise FitError(f"sample set must cover frames 0..{n - 1}")
    if grouping is None:
        return [fit_frame_model_intra(sample_set[f]) for f in range(n)]
    return [fit_frame_model_gop(f, grouping, sample_set) for f in range(n)]
