import numpy as np
import pytest

from lfalloc.allocator import (LD_QP_OFFSETS, RA_QP_OFFSETS, EncoderProfile, assemble_problem, plan_all_intra,
                               plan_gop, profile_defaults, read_qp_file, uniform_targets)
from lfalloc.errors import InputError
from lfalloc.grid import ConfidenceGrid, SaiGridDims, build_scan_order
from lfalloc.optimizer import PER_FRAME, PER_GOP
from lfalloc.rdmodel import FRAME_BITS, GOP_BITS, HyperbolicModel, RdSample, RdSampleSet


def one_frame(samples):
    return RdSampleSet(RdSample(0, q, b, 1.0) for q, b in samples.items())


def test_profile_defaults():
    ra, ld, ai = (profile_defaults(k) for k in ("random_access", "low_delay", "all_intra"))
    assert (ra.gop_size, ra.qp_offsets) == (8, (1, 2, 3, 4, 4, 3, 4, 4))
    assert (ld.gop_size, ld.qp_offsets) == (12, (5, 4, 5, 1) * 3)
    assert (ai.gop_size, ai.qp_offsets) == (1, ())
    assert profile_defaults("ra") == ra
    with pytest.raises(InputError):
        profile_defaults("hierarchical")


def test_profile_invariants():
    with pytest.raises(InputError):
        EncoderProfile("all_intra", 2, ())
    with pytest.raises(InputError):
        EncoderProfile("random_access", 8, RA_QP_OFFSETS[:7])


@pytest.mark.parametrize("target,qp", [(1000, 32), (100, 34), (1e9, 30)])
def test_plan_all_intra_nearest(target, qp):
    s = one_frame({30: 1200.0, 32: 950.0, 34: 700.0})
    sched = plan_all_intra(s, [target])
    assert sched.qps == (qp,)
    assert sched.expected_bits == {30: 1200.0, 32: 950.0, 34: 700.0}[qp]


def test_plan_all_intra_tie_goes_low():
    assert plan_all_intra(one_frame({30: 1050.0, 32: 950.0}), [1000]).qps == (30,)


def test_plan_all_intra_missing_frame():
    with pytest.raises(InputError):
        plan_all_intra(one_frame({30: 1.0, 32: 0.5}), [1.0, 1.0])


def gop_samples(totals, size=8):
    out = []
    for q, t in totals.items():
        out += [RdSample(f, q, t / size, 1.0) for f in range(size)]
    return RdSampleSet(out)


def test_plan_gop_example():
    ra = profile_defaults("ra")
    s = gop_samples({28: 5000.0, 30: 4100.0, 32: 3300.0})
    sched = plan_gop(s, ra.grouping(8), [4000.0], ra)
    assert sched.base_qps == (30,)
    assert sched.qps[2] == 33  # third frame of the GOP
    assert [q - 30 for q in sched.qps] == list(RA_QP_OFFSETS)
    assert sched.expected_bits == 4100.0


def test_low_delay_position_offset():
    ld = profile_defaults("ld")
    g = ld.grouping(24)
    # frame 13 (1-based) is the first frame of the second virtual GOP
    assert g.gop_of(12) == 1 and g.position(12) == 0
    assert ld.frame_qp(30, g.position(12)) == 30 + LD_QP_OFFSETS[0] == 35


def test_clamping_is_flagged():
    ra = profile_defaults("ra")
    s = gop_samples({49: 900.0, 50: 800.0})
    sched = plan_gop(s, ra.grouping(8), [100.0], ra)
    assert sched.base_qps == (50,)
    assert max(sched.qps) == 51
    assert sched.clamped == (1, 2, 3, 4, 5, 6, 7)  # only offset 1 fits under 51


def test_plan_gop_incomplete_data():
    ra = profile_defaults("ra")
    s = RdSampleSet([RdSample(0, 30, 10.0, 1.0), RdSample(1, 32, 10.0, 1.0)])
    with pytest.raises(InputError):
        plan_gop(s, ra.grouping(2), [10.0], ra)


def test_sweep_requests_clamped():
    ra = profile_defaults("ra")
    assert ra.sweep_request_qps(50, 9) == (51, 51, 51, 51, 51, 51, 51, 51, 51)
    assert ra.sweep_request_qps(16, 3) == (17, 18, 19)


def test_schedule_csv_round_trip(tmp_path):
    s = one_frame({30: 1200.0, 32: 950.0})
    sched = plan_all_intra(s, [1000])
    sched.write_csv(tmp_path / "q.csv")
    assert read_qp_file(tmp_path / "q.csv") == sched.qps


def models(n, kind):
    return [HyperbolicModel(100.0 + i, -1.0, 1.0, kind) for i in range(n)]


@pytest.mark.parametrize("kind,short,expected", [(FRAME_BITS, "ai", 192), (GOP_BITS, "ra", 24),
                                                 (GOP_BITS, "ld", 16)])
def test_assemble_problem_sizes(kind, short, expected):
    dims = SaiGridDims(14, 14)
    scan = build_scan_order("snake", dims, 192)
    p = assemble_problem(profile_defaults(short), models(192, kind), ConfidenceGrid.uniform(14, 14), scan, 2.0, 1e7)
    assert p.n_vars == expected and p.n == 192
    assert p.variable_kind == (PER_FRAME if short == "ai" else PER_GOP)
    assert p.n_sai == 196


def test_assemble_problem_kind_mismatch_and_missing_cells():
    scan = build_scan_order("snake", SaiGridDims(2, 2), 3)
    conf = ConfidenceGrid.uniform(2, 2)
    with pytest.raises(InputError):
        assemble_problem(profile_defaults("ai"), models(3, GOP_BITS), conf, scan, 0.0, 1e5)
    with pytest.raises(InputError):
        assemble_problem(profile_defaults("ai"), models(4, FRAME_BITS), conf, scan, 0.0, 1e5)


def test_assemble_pins_non_monotone_frames():
    scan = build_scan_order("snake", SaiGridDims(2, 2))
    ms = models(4, FRAME_BITS)
    ms[2] = HyperbolicModel(1.0, -1e-3, 0.1, FRAME_BITS, monotone=False, raw_exponent=0.4)
    p = assemble_problem(profile_defaults("ai"), ms, ConfidenceGrid.uniform(2, 2), scan, 0.0, 1e5)
    assert p.pinned.tolist() == [False, False, True, False]


def test_uniform_targets():
    assert np.array_equal(uniform_targets(10.0, 4), [2.5] * 4)
