"""Encoder-configuration adapters: fitted models and a budget in, per-frame QPs out."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .errors import InputError
from .grid import ConfidenceGrid, GopGrouping, ScanOrder, group_gops
from .metrics import confidence_weight
from .optimizer import PER_FRAME, PER_GOP, AllocationProblem, SpStructure
from .rdmodel import FRAME_BITS, GOP_BITS, SWEEP_MAX, SWEEP_MIN, HyperbolicModel, RdSampleSet

ALL_INTRA, RANDOM_ACCESS, LOW_DELAY = "all_intra", "random_access", "low_delay"
PROFILE_ALIASES = {"ai": ALL_INTRA, "ra": RANDOM_ACCESS, "ld": LOW_DELAY,
                   ALL_INTRA: ALL_INTRA, RANDOM_ACCESS: RANDOM_ACCESS, LOW_DELAY: LOW_DELAY}

RA_GOP_SIZE = 8
RA_QP_OFFSETS = (1, 2, 3, 4, 4, 3, 4, 4)
LD_VIRTUAL_GOP_SIZE = 12
LD_BASE_OFFSETS = (5, 4, 5, 1)
LD_QP_OFFSETS = LD_BASE_OFFSETS * 3
SWEEP_QPS = tuple(range(SWEEP_MIN, SWEEP_MAX + 1))
QP_MIN, QP_MAX = 0, 51


@dataclass(frozen=True)
class EncoderProfile:
    kind: str
    gop_size: int
    qp_offsets: tuple[int, ...]
    sweep_qps: tuple[int, ...] = SWEEP_QPS

    def __post_init__(self):
        if self.kind not in (ALL_INTRA, RANDOM_ACCESS, LOW_DELAY):
            raise InputError(f"unknown profile kind {self.kind!r}")
        if self.kind == ALL_INTRA:
            if self.gop_size != 1 or self.qp_offsets:
                raise InputError("all-intra profile has GOP size 1 and no QP offsets")
        elif len(self.qp_offsets) != self.gop_size:
            raise InputError("one QP offset per GOP position is required")

    @property
    def per_gop(self) -> bool:
        return self.kind != ALL_INTRA

    @property
    def short(self) -> str:
        return {ALL_INTRA: "ai", RANDOM_ACCESS: "ra", LOW_DELAY: "ld"}[self.kind]

    def frame_qp(self, base_qp: int, position: int) -> int:
        """Unclamped frame QP at ``position`` of a GOP coded at ``base_qp``."""
        return base_qp + (self.qp_offsets[position] if self.per_gop else 0)

    def grouping(self, frame_count: int) -> GopGrouping:
        return group_gops(frame_count, self.gop_size)

    def sweep_request_qps(self, base_qp: int, frame_count: int) -> tuple[int, ...]:
        """Per-frame QPs of the first-pass run at ``base_qp``, clamped to [0, 51]."""
        return tuple(int(np.clip(self.frame_qp(base_qp, i % self.gop_size), QP_MIN, QP_MAX))
                     for i in range(frame_count))


def profile_defaults(kind: str) -> EncoderProfile:
    try:
        kind = PROFILE_ALIASES[kind]
    except KeyError:
        raise InputError(f"unknown profile {kind!r}; expected one of ai, ra, ld") from None
    if kind == ALL_INTRA:
        return EncoderProfile(ALL_INTRA, 1, ())
    if kind == RANDOM_ACCESS:
        return EncoderProfile(RANDOM_ACCESS, RA_GOP_SIZE, RA_QP_OFFSETS)
    return EncoderProfile(LOW_DELAY, LD_VIRTUAL_GOP_SIZE, LD_QP_OFFSETS)


@dataclass(frozen=True)
class QpSchedule:
    qps: tuple[int, ...]
    base_qps: tuple[int, ...]
    targets: tuple[float, ...]
    expected_bits: float
    expected_mse: tuple[float, ...]
    clamped: tuple[int, ...] = ()
    expected_target: float | None = None

    def to_dict(self) -> dict:
        return {"qps": list(self.qps), "base_qps": list(self.base_qps), "targets": list(self.targets),
                "expected_bits": self.expected_bits, "expected_mse": list(self.expected_mse),
                "clamped": list(self.clamped), "expected_target": self.expected_target}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["frame_index", "qp"])
            for i, q in enumerate(self.qps):
                writer.writerow([i + 1, q])


def read_qp_file(path) -> tuple[int, ...]:
    qps = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                i, q = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                if lineno == 1:
                    continue
                raise InputError(f"QP file line {lineno}: expected frame_index,qp") from None
            qps[i - 1] = q
    if sorted(qps) != list(range(len(qps))):
        raise InputError("QP file must list frames 1..n exactly once")
    return tuple(qps[i] for i in range(len(qps)))


def _nearest(candidates: dict[int, float], target: float) -> int:
    # lower QP wins ties
    return min(candidates, key=lambda q: (abs(candidates[q] - target), q))


def plan_all_intra(sample_set: RdSampleSet, targets: Sequence[float]) -> QpSchedule:
    """Per frame, the sweep QP whose observed bits are closest to the frame's target."""
    n = len(targets)
    qps, mses, total = [], [], 0.0
    for f in range(n):
        rows = sample_set.get(f)
        if not rows:
            raise InputError(f"frame {f} has no first-pass samples")
        q = _nearest({s.qp: s.bits for s in rows}, targets[f])
        s = next(r for r in rows if r.qp == q)
        qps.append(q)
        mses.append(s.mse)
        total += s.bits
    return QpSchedule(tuple(qps), tuple(qps), tuple(float(t) for t in targets), total, tuple(mses))


def plan_gop(sample_set: RdSampleSet, grouping: GopGrouping, targets: Sequence[float],
             profile: EncoderProfile) -> QpSchedule:
    """Per GOP, the base QP whose observed GOP total is closest to the GOP target."""
    if len(targets) != grouping.m:
        raise InputError(f"expected {grouping.m} GOP targets, got {len(targets)}")
    qps = [0] * grouping.frame_count
    mses = [0.0] * grouping.frame_count
    bases, clamped, total = [], [], 0.0
    for t, frames in enumerate(grouping.groups):
        sweep = sorted({s.qp for f in frames for s in sample_set.get(f, ())})
        totals = {}
        for q in sweep:
            bits = [sample_set.bits_at(f, q) for f in frames]
            if any(b is None for b in bits):
                raise InputError(f"GOP {t} has incomplete first-pass data at base QP {q}")
            totals[q] = sum(bits)
        if not totals:
            raise InputError(f"GOP {t} has no first-pass samples")
        base = _nearest(totals, targets[t])
        bases.append(base)
        total += totals[base]
        for pos, f in enumerate(frames):
            raw = profile.frame_qp(base, pos)
            q = int(np.clip(raw, QP_MIN, QP_MAX))
            if q != raw:
                clamped.append(f)
            qps[f] = q
            mses[f] = next(s.mse for s in sample_set[f] if s.qp == base)
    return QpSchedule(tuple(qps), tuple(bases), tuple(float(t) for t in targets), total,
                      tuple(mses), tuple(clamped))


def plan(profile: EncoderProfile, sample_set: RdSampleSet, targets: Sequence[float],
         frame_count: int) -> QpSchedule:
    if profile.per_gop:
        return plan_gop(sample_set, profile.grouping(frame_count), targets, profile)
    return plan_all_intra(sample_set, targets)


def uniform_targets(budget: float, n_vars: int) -> np.ndarray:
    """Equal split of the budget; the stand-in anchor allocation."""
    return np.full(n_vars, budget / n_vars)


def assemble_problem(profile: EncoderProfile, models: Sequence[HyperbolicModel], confidence: ConfidenceGrid,
                     scan: ScanOrder, smooth_weight: float, budget: float) -> AllocationProblem:
    """Per-frame problem for all-intra, per-GOP problem otherwise.

    A variable whose frames all carry non-monotone fits is pinned at the
    budget-proportional share instead of being optimised.
    """
    n = len(models)
    want = GOP_BITS if profile.per_gop else FRAME_BITS
    if any(m.kind != want for m in models):
        raise InputError(f"{profile.kind} needs {want} models")
    if scan.frame_count < n:
        raise InputError(f"scan order maps only {scan.frame_count} of {n} frames to confidence cells")
    if confidence.values.shape != scan.dims.shape:
        raise InputError("confidence grid and scan order disagree on the grid size")
    weights = np.array([confidence_weight(confidence.values[scan.cell(i)]) for i in range(n)])
    coefficient = np.array([m.coefficient for m in models])
    exponent = np.array([m.exponent for m in models])
    monotone = np.array([m.monotone for m in models])
    if profile.per_gop:
        frame_to_var = profile.grouping(n).frame_to_gop()
        kind = PER_GOP
    else:
        frame_to_var = np.arange(n)
        kind = PER_FRAME
    m_vars = int(frame_to_var.max()) + 1
    any_monotone = np.bincount(frame_to_var, weights=monotone.astype(float), minlength=m_vars) > 0
    sp = SpStructure.from_scan(scan, confidence, n)
    return AllocationProblem(coefficient, exponent, weights, budget, smooth_weight, sp, frame_to_var, m_vars,
                             scan.dims.n_sai, ~any_monotone, kind)


def with_expected_target(schedule: QpSchedule, value: float) -> QpSchedule:
    return replace(schedule, expected_target=value)
