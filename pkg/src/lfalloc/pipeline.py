"""Two-pass orchestration.

Pass one encodes the whole pseudo-sequence once per sweep QP (in parallel),
the statistics feed the R-D fits and the allocation, and pass two encodes
with the planned QP schedule. Pass-one results are cached so that several
budgets share one sweep.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .allocator import (EncoderProfile, QpSchedule, assemble_problem, plan, profile_defaults,
                        uniform_targets, with_expected_target)
from .backends import EncodeRequest, EncodeResult, MockSceneSpec, FRAME_LEVEL, GOP_LEVEL
from .errors import FirstPassError, InputError, LfallocError, StageError
from .grid import ConfidenceGrid, ScanOrder
from .metrics import QualityReport, RdCurvePoint, bd_rate, quality_report
from .optimizer import predict_target, solve_two_step
from .rdmodel import RdSample, RdSampleSet, fit_models, select_fit_window

# budget presets in bits, one ladder per profile
BUDGET_PRESETS = {
    "ai": (5e6, 10e6, 20e6, 40e6),
    "ra": (1e6, 2e6, 4e6, 8e6),
    "ld": (0.5e6, 1e6, 2e6, 4e6),
}
LAMBDA_PRESETS = (0.0, 2.0, 4.0)

OPTIMIZED, BASELINE = "two_pass", "uniform_baseline"
# largest factor between the budget handed to the allocator and the real one
MAX_BUDGET_STRETCH = 64.0
STATS_HEADER = ("sweep_qp", "frame_index", "qp", "bits", "mse_y", "mse_u", "mse_v")


def preset_scene_spec(profile: str, frame_count: int, seed: int = 0, sigma: float = 0.0) -> MockSceneSpec:
    """Mock scene whose sweep brackets the profile's budget ladder.

    Per-frame anchor rates spread over a factor of four around the rate that
    puts the ladder's geometric mean at the middle of the sweep.
    """
    prof = profile_defaults(profile)
    ladder = BUDGET_PRESETS[prof.short]
    per_frame = math.exp(np.mean(np.log(ladder))) / frame_count
    mid_qp = 0.5 * (prof.sweep_qps[0] + prof.sweep_qps[-1])
    centre = per_frame * 2.0 ** ((mid_qp - 32) / 6.0)
    coupling = FRAME_LEVEL if prof.gop_size == 1 else GOP_LEVEL
    return MockSceneSpec(frame_count=frame_count, r_ref_range=(centre / 2, centre * 2), q_ref=32, sigma=sigma,
                         coupling=coupling, gop_size=prof.gop_size, seed=seed)


# -- pass one ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PassOneStats:
    """Every frame at every sweep QP. ``results[s]`` belongs to ``sweep_qps[s]``."""

    profile: str
    sweep_qps: tuple[int, ...]
    request_qps: tuple[tuple[int, ...], ...]
    results: tuple[EncodeResult, ...]
    wall_time: float = 0.0

    def __post_init__(self):
        if not (len(self.sweep_qps) == len(self.request_qps) == len(self.results)):
            raise InputError("one request and one result per sweep QP are required")
        if len(set(self.sweep_qps)) != len(self.sweep_qps):
            raise InputError("duplicate sweep QP in pass-one statistics")
        n = {r.frame_count for r in self.results} | {len(q) for q in self.request_qps}
        if len(n) > 1:
            raise InputError("sweep runs disagree on the frame count")

    @property
    def frame_count(self) -> int:
        return self.results[0].frame_count if self.results else 0

    def totals(self) -> dict[int, float]:
        return {q: r.total_bits for q, r in zip(self.sweep_qps, self.results)}

    def rows(self):
        for q, req, res in zip(self.sweep_qps, self.request_qps, self.results):
            for f in range(res.frame_count):
                yield (q, f + 1, req[f], float(res.bits[f]), float(res.mse_y[f]),
                       float(res.mse_u[f]), float(res.mse_v[f]))

    def sample_set(self, luma_only: bool = False) -> RdSampleSet:
        samples = []
        for q, res in zip(self.sweep_qps, self.results):
            mse = res.mse(luma_only)
            samples.extend(RdSample(f, q, float(res.bits[f]), float(mse[f])) for f in range(res.frame_count))
        return RdSampleSet(samples)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(STATS_HEADER)
        for row in self.rows():
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, source, profile: str) -> "PassOneStats":
        text = source.read() if hasattr(source, "read") else open(source, encoding="utf-8").read()
        runs: dict[int, dict[int, tuple]] = {}
        for lineno, row in enumerate(csv.reader(io.StringIO(text)), 1):
            if not row:
                continue
            if len(row) != len(STATS_HEADER):
                raise InputError(f"pass-one line {lineno}: expected {len(STATS_HEADER)} fields")
            try:
                sq, f, q = int(row[0]), int(row[1]), int(row[2])
                vals = tuple(float(c) for c in row[3:])
            except ValueError:
                if lineno == 1:
                    continue
                raise InputError(f"pass-one line {lineno}: non-numeric field") from None
            run = runs.setdefault(sq, {})
            if f in run:
                raise InputError(f"pass-one line {lineno}: frame {f} repeated at sweep QP {sq}")
            run[f] = (q,) + vals
        if not runs:
            raise InputError("pass-one file has no rows")
        sweep = tuple(sorted(runs))
        n = max(len(r) for r in runs.values())
        reqs, results = [], []
        for sq in sweep:
            run = runs[sq]
            if sorted(run) != list(range(1, n + 1)):
                raise InputError(f"sweep QP {sq} does not cover frames 1..{n}")
            arr = np.array([run[f] for f in range(1, n + 1)])
            reqs.append(tuple(int(v) for v in arr[:, 0]))
            results.append(EncodeResult(arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4]))
        return cls(profile, sweep, tuple(reqs), tuple(results))


def first_pass(backend, profile: EncoderProfile, frame_count: int | None = None, parallelism: int = 1,
               sequence_id: str = "sequence") -> PassOneStats:
    """Encode once per sweep QP, up to ``parallelism`` encodes at a time.

    Results are collected in sweep order, so the output does not depend on
    the degree of parallelism.
    """
    n = backend.frame_count if frame_count is None else frame_count
    if parallelism < 1:
        raise InputError("parallelism must be at least 1")
    sweep = tuple(profile.sweep_qps)
    requests = [EncodeRequest(sequence_id, profile.sweep_request_qps(q, n), profile.short) for q in sweep]
    start = time.perf_counter()

    def run(req):
        try:
            return backend.encode(req), None
        except LfallocError as exc:
            return None, exc

    with ThreadPoolExecutor(max_workers=parallelism) as pool:
        outcomes = list(pool.map(run, requests))
    failed = {q: str(err) for q, (_, err) in zip(sweep, outcomes) if err is not None}
    done = [(q, req.qps, res) for q, req, (res, _) in zip(sweep, requests, outcomes) if res is not None]
    elapsed = time.perf_counter() - start
    if failed:
        partial = PassOneStats(profile.kind, tuple(d[0] for d in done), tuple(d[1] for d in done),
                               tuple(d[2] for d in done), elapsed)
        raise FirstPassError(failed, partial)
    return PassOneStats(profile.kind, sweep, tuple(d[1] for d in done), tuple(d[2] for d in done), elapsed)


class PassOneCache:
    """Pass-one statistics keyed by (sequence hash, profile, backend, sweep).

    Kept in memory; with ``directory`` set, entries are also written to and
    read from ``<directory>/<key>.csv``.
    """

    def __init__(self, directory=None):
        self.directory = directory
        self._mem: dict[str, PassOneStats] = {}
        self.hits = 0
        self.misses = 0

    @staticmethod
    def key(sequence_hash: str, profile: EncoderProfile, backend_identity: str, frame_count: int) -> str:
        blob = json.dumps([sequence_hash, profile.kind, list(profile.qp_offsets), backend_identity,
                           list(profile.sweep_qps), frame_count])
        return hashlib.sha256(blob.encode()).hexdigest()[:32]

    def get(self, key: str, profile: str) -> PassOneStats | None:
        if key in self._mem:
            self.hits += 1
            return self._mem[key]
        if self.directory is not None:
            path = os.path.join(self.directory, key + ".csv")
            if os.path.exists(path):
                stats = PassOneStats.from_csv(path, profile)
                self._mem[key] = stats
                self.hits += 1
                return stats
        self.misses += 1
        return None

    def put(self, key: str, stats: PassOneStats) -> None:
        self._mem[key] = stats
        if self.directory is not None:
            os.makedirs(self.directory, exist_ok=True)
            stats.write_csv(os.path.join(self.directory, key + ".csv"))


# -- reports -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TwoPassReport:
    budget: float
    achieved_bits: float
    bit_error: float
    quality: QualityReport
    schedule: QpSchedule | None = None
    profile: str = "all_intra"
    mode: str = OPTIMIZED
    smooth_weight: float = 0.0
    fit_window: tuple[int, int] | None = None
    solver: dict = field(default_factory=dict)
    per_frame_bits: tuple[float, ...] = ()
    timing: dict = field(default_factory=dict)

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "profile": self.profile,
            "mode": self.mode,
            "lambda": self.smooth_weight,
            "budget": self.budget,
            "achieved_bits": self.achieved_bits,
            "bit_error": self.bit_error,
            "fit_window": list(self.fit_window) if self.fit_window else None,
            "quality": self.quality.to_dict(),
            "schedule": self.schedule.to_dict() if self.schedule else None,
            "solver": self.solver,
            "per_frame_bits": list(self.per_frame_bits),
        }
        if include_timing:
            d["timing"] = self.timing
        return d

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TwoPassReport":
        sched = d.get("schedule")
        if sched is not None:
            sched = QpSchedule(tuple(sched["qps"]), tuple(sched["base_qps"]), tuple(sched["targets"]),
                               sched["expected_bits"], tuple(sched["expected_mse"]), tuple(sched["clamped"]),
                               sched["expected_target"])
        fw = d.get("fit_window")
        return cls(d["budget"], d["achieved_bits"], d["bit_error"], QualityReport.from_dict(d["quality"]),
                   sched, d.get("profile", "all_intra"), d.get("mode", OPTIMIZED), d.get("lambda", 0.0),
                   tuple(fw) if fw else None, d.get("solver", {}), tuple(d.get("per_frame_bits", ())),
                   d.get("timing", {}))

    def curve_point(self) -> RdCurvePoint:
        return RdCurvePoint(self.achieved_bits, self.quality.target_db)


def bit_error(achieved: float, budget: float) -> float:
    if not budget > 0:
        raise InputError("budget must be positive")
    return abs(achieved - budget) / budget


def evaluate_run(result: EncodeResult, scan: ScanOrder, confidence: ConfidenceGrid, smooth_weight: float,
                 budget: float, luma_only: bool = False, **fields) -> TwoPassReport:
    """Quality and bit error of a second-pass encode."""
    if result.frame_count != scan.frame_count:
        raise InputError(f"result has {result.frame_count} frames, scan order maps {scan.frame_count}")
    grid = scan.to_grid(result.mse(luma_only))
    q = quality_report(grid, confidence, smooth_weight)
    return TwoPassReport(budget, result.total_bits, bit_error(result.total_bits, budget), q, smooth_weight=float(smooth_weight),
                         per_frame_bits=tuple(float(b) for b in result.bits), **fields)


# -- orchestration -------------------------------------------------------------

@dataclass(frozen=True)
class TwoPassConfig:
    profile: str = "ai"
    smooth_weight: float = 0.0
    budgets: tuple[float, ...] = ()
    confidence: ConfidenceGrid | None = None
    scan: ScanOrder | None = None
    parallelism: int = 1
    luma_only: bool = False
    mode: str = OPTIMIZED
    max_iter: int = 10000
    sequence_id: str = "sequence"
    calibration_rounds: int = 24
    calibration_tol: float = 1e-3

    def __post_init__(self):
        if self.mode not in (OPTIMIZED, BASELINE):
            raise InputError(f"unknown mode {self.mode!r}")
        if self.smooth_weight < 0:
            raise InputError("lambda must be non-negative")
        if self.calibration_rounds < 1:
            raise InputError("calibration_rounds must be at least 1")
        object.__setattr__(self, "budgets", tuple(float(b) for b in self.budgets))

    @property
    def encoder_profile(self) -> EncoderProfile:
        return profile_defaults(self.profile)


class _Stages:
    def __init__(self):
        self.timing = {}

    def run(self, name, fn, *args, **kwargs):
        start = time.perf_counter()
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except LfallocError as exc:
            raise StageError(name, exc) from exc
        finally:
            self.timing[name] = self.timing.get(name, 0.0) + time.perf_counter() - start


def pass_one(config: TwoPassConfig, backend, cache: PassOneCache | None = None) -> tuple[PassOneStats, bool]:
    """Cached first pass. Returns the statistics and whether they came from the cache."""
    prof = config.encoder_profile
    n = config.scan.frame_count if config.scan is not None else backend.frame_count
    key = PassOneCache.key(backend.sequence_hash(), prof, backend.identity, n)
    if cache is not None:
        hit = cache.get(key, prof.kind)
        if hit is not None:
            return hit, True
    stats = first_pass(backend, prof, n, config.parallelism, config.sequence_id)
    if cache is not None:
        cache.put(key, stats)
    return stats, False


def _targets(config, problem):
    if config.mode == BASELINE:
        return uniform_targets(problem.budget, problem.n_vars), {"method": BASELINE}
    _, _, sol = solve_two_step(problem, max_iter=config.max_iter)
    return sol.x, {"method": OPTIMIZED, "converged": sol.converged, "iterations": sol.iterations,
                   "kkt_residual": sol.kkt_residual, "objective": sol.objective}


def allocate_and_plan(config: TwoPassConfig, models, samples: RdSampleSet, budget: float):
    """Allocate, then pick QPs; repeat with a corrected allocation budget.

    Targets outside the swept rates saturate at the sweep ends and QPs are
    integers, so the planned total drifts from the budget. Each round shifts
    the budget handed to the allocator by the planned overshoot and the round
    whose plan lands closest to the real budget is kept.
    """
    prof = config.encoder_profile
    n = config.scan.frame_count
    effective = budget
    below = above = None  # effective budgets known to under- and overshoot
    prev_qps, push = None, 1.0
    best = None
    for rnd in range(1, config.calibration_rounds + 1):
        problem = assemble_problem(prof, models, config.confidence, config.scan, config.smooth_weight, effective)
        x, info = _targets(config, problem)
        schedule = plan(prof, samples, x, n)
        miss = schedule.expected_bits - budget
        if best is None or abs(miss) < abs(best[3]):
            info = dict(info, effective_budget=effective, calibration_round=rnd)
            best = (problem, x, schedule, miss, info)
        if abs(miss) <= config.calibration_tol * budget:
            break
        if miss > 0:
            above = effective if above is None else min(above, effective)
        else:
            below = effective if below is None else max(below, effective)
        if below is not None and above is not None:
            effective = math.sqrt(below * above)
        else:
            # an unchanged plan means a flat stretch; push harder to get past it
            push = push * 2 if schedule.qps == prev_qps else 1.0
            prev_qps = schedule.qps
            step = min(max(effective - push * miss, effective / 4), effective * 4)
            if step <= problem.floor * problem.n_vars or step > budget * MAX_BUDGET_STRETCH:
                break  # every plan saturates at a sweep end
            effective = step
    problem, x, schedule, _, info = best
    return problem, x, with_expected_target(schedule, predict_target(problem, x)), info


def run_two_pass(config: TwoPassConfig, backend, budget: float,
                 cache: PassOneCache | None = None) -> TwoPassReport:
    if config.scan is None or config.confidence is None:
        raise InputError("two-pass run needs a scan order and a confidence grid")
    prof = config.encoder_profile
    n = config.scan.frame_count
    stages = _Stages()
    total_start = time.perf_counter()
    stats, cached = stages.run("pass1", pass_one, config, backend, cache)
    samples = stats.sample_set(config.luma_only)

    def fit():
        window, bounds = select_fit_window(samples, budget, prof.sweep_qps)
        grouping = prof.grouping(n) if prof.per_gop else None
        return fit_models(window, grouping, n), bounds

    models, bounds = stages.run("fit", fit)
    _, _, schedule, solver = stages.run("optimize", allocate_and_plan, config, models, samples, budget)
    result = stages.run("pass2", backend.encode, EncodeRequest(config.sequence_id, schedule.qps, prof.short))
    report = stages.run("evaluate", evaluate_run, result, config.scan, config.confidence, config.smooth_weight,
                        budget, config.luma_only, schedule=schedule, profile=prof.kind, mode=config.mode,
                        fit_window=bounds, solver=solver)
    timing = dict(stages.timing)
    timing["total"] = time.perf_counter() - total_start
    timing["pass1_cached"] = cached
    return replace(report, timing=timing)


def run_budgets(config: TwoPassConfig, backend, cache: PassOneCache | None = None) -> list[TwoPassReport]:
    """One report per configured budget; pass one runs at most once."""
    if not config.budgets:
        raise InputError("no budgets configured")
    cache = PassOneCache() if cache is None else cache
    return [run_two_pass(config, backend, b, cache) for b in config.budgets]


# -- comparison ----------------------------------------------------------------

@dataclass(frozen=True)
class Comparison:
    rows: tuple[dict, ...]
    bd_rate: float
    anchor_label: str
    test_label: str

    def to_dict(self) -> dict:
        return {"anchor": self.anchor_label, "test": self.test_label, "bd_rate_percent": self.bd_rate,
                "rows": list(self.rows)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        cols = ("budget", "anchor_bits", "anchor_target_db", "anchor_bit_error",
                "test_bits", "test_target_db", "test_bit_error")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        for r in self.rows:
            writer.writerow([r[c] for c in cols])
        writer.writerow(["bd_rate_percent", self.bd_rate, "", "", "", "", ""])
        return buf.getvalue()


def compare_runs(reports, anchor_reports, anchor_label: str = BASELINE,
                 test_label: str = OPTIMIZED) -> Comparison:
    """BD-rate of ``reports`` against ``anchor_reports`` on (bits, T') curves."""
    reports = sorted(reports, key=lambda r: r.budget)
    anchor_reports = sorted(anchor_reports, key=lambda r: r.budget)
    if min(len(reports), len(anchor_reports)) < 4:
        raise InputError("comparison needs at least 4 budgets per side")
    value = bd_rate([r.curve_point() for r in anchor_reports], [r.curve_point() for r in reports])
    anchor_by_budget = {r.budget: r for r in anchor_reports}
    rows = []
    for r in reports:
        a = anchor_by_budget.get(r.budget)
        rows.append({
            "budget": r.budget,
            "anchor_bits": a.achieved_bits if a else None,
            "anchor_target_db": a.quality.target_db if a else None,
            "anchor_bit_error": a.bit_error if a else None,
            "test_bits": r.achieved_bits,
            "test_target_db": r.quality.target_db,
            "test_bit_error": r.bit_error,
        })
    return Comparison(tuple(rows), value, anchor_label, test_label)


def quality_at_bits(reports, bits: float) -> float:
    """T' of a report series, interpolated linearly in log bits."""
    pts = sorted((r.achieved_bits, r.quality.target_db) for r in reports)
    xs = np.log([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])
    lb = math.log(bits)
    if not xs[0] <= lb <= xs[-1]:
        raise InputError("bits outside the range covered by the report series")
    return float(np.interp(lb, xs, ys))
