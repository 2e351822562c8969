import json

import numpy as np
import pytest

from lfalloc.allocator import profile_defaults
from lfalloc.backends import EncodeResult, MockBackend, generate_mock_scene
from lfalloc.errors import BackendError, FirstPassError, InputError, StageError
from lfalloc.grid import SaiGridDims, build_scan_order, plateau_confidence
from lfalloc.pipeline import (BASELINE, PassOneCache, PassOneStats, TwoPassConfig, TwoPassReport, compare_runs,
                              evaluate_run, first_pass, preset_scene_spec, quality_at_bits, run_budgets,
                              run_two_pass)

SIDE = 5
FRAMES = SIDE * SIDE


class CountingBackend(MockBackend):
    def __init__(self, scene, fail_qps=(), fail_after=None):
        super().__init__(scene)
        self.calls = 0
        self.fail_qps = set(fail_qps)
        self.fail_after = fail_after

    def encode(self, request):
        self.calls += 1
        if self.fail_after is not None and self.calls > self.fail_after:
            raise BackendError("encoder went away")
        if self.fail_qps and request.qps[0] in self.fail_qps:
            raise BackendError(f"cannot encode at {request.qps[0]}")
        return super().encode(request)


def backend(profile="ai", seed=0, **kw):
    return CountingBackend(generate_mock_scene(preset_scene_spec(profile, FRAMES, seed)), **kw)


def config(profile="ai", smooth_weight=0.0, **kw):
    from lfalloc.pipeline import BUDGET_PRESETS
    budgets = BUDGET_PRESETS[profile]
    return TwoPassConfig(profile, smooth_weight, budgets, plateau_confidence(SIDE, SIDE),
                         build_scan_order("spiral", SaiGridDims(SIDE, SIDE)), **kw)


def test_first_pass_complete_grid():
    stats = first_pass(backend(), profile_defaults("ai"))
    assert stats.sweep_qps == tuple(range(16, 46))
    assert len(list(stats.rows())) == 30 * FRAMES
    assert len(stats.sample_set().samples()) == 30 * FRAMES


def test_first_pass_parallelism_is_invisible():
    a = first_pass(backend(), profile_defaults("ra"), parallelism=1)
    b = first_pass(backend(), profile_defaults("ra"), parallelism=8)
    assert a.to_csv() == b.to_csv()


def test_first_pass_failure_lists_qp_and_keeps_partial():
    with pytest.raises(FirstPassError) as err:
        first_pass(backend(fail_qps={20}), profile_defaults("ai"), parallelism=4)
    assert list(err.value.failed) == [20]
    assert "20" in str(err.value)
    assert 20 not in err.value.partial.sweep_qps and len(err.value.partial.sweep_qps) == 29


def test_pass_one_csv_round_trip(tmp_path):
    stats = first_pass(backend(), profile_defaults("ld"))
    stats.write_csv(tmp_path / "p1.csv")
    again = PassOneStats.from_csv(str(tmp_path / "p1.csv"), stats.profile)
    assert again.to_csv() == stats.to_csv()
    assert again.totals() == stats.totals()


def test_cache_shares_pass_one_across_budgets():
    be = backend()
    reports = run_budgets(config(), be)
    assert len(reports) == 4
    assert be.calls == 30 + 4
    assert [r.timing["pass1_cached"] for r in reports] == [False, True, True, True]


def test_warm_cache_equals_cold_run():
    cfg = config("ra", smooth_weight=2.0)
    warm = run_budgets(cfg, backend("ra"))
    cold = [run_two_pass(cfg, backend("ra"), b) for b in cfg.budgets]
    assert [r.to_json(include_timing=False) for r in warm] == [r.to_json(include_timing=False) for r in cold]


def test_disk_cache(tmp_path):
    cfg = config()
    first = run_two_pass(cfg, backend(), cfg.budgets[0], PassOneCache(tmp_path))
    be = backend()
    cache = PassOneCache(tmp_path)
    again = run_two_pass(cfg, be, cfg.budgets[0], cache)
    assert be.calls == 1 and cache.hits == 1
    assert again.to_json(include_timing=False) == first.to_json(include_timing=False)


def test_cache_key_depends_on_scene_and_profile():
    ai, ra = profile_defaults("ai"), profile_defaults("ra")
    k = PassOneCache.key("abc", ai, "mock", 25)
    assert k != PassOneCache.key("abd", ai, "mock", 25)
    assert k != PassOneCache.key("abc", ra, "mock", 25)
    assert k != PassOneCache.key("abc", ai, "external", 25)


def test_stage_errors_name_the_stage():
    cfg = config()
    with pytest.raises(StageError) as err:
        run_two_pass(cfg, backend(fail_after=30), cfg.budgets[0])
    assert err.value.stage == "pass2"
    with pytest.raises(StageError) as err:
        run_two_pass(cfg, backend(fail_qps={33}), cfg.budgets[0])
    assert err.value.stage == "pass1" and err.value.exit_code == 5


def test_report_fields_and_timing():
    cfg = config(smooth_weight=2.0)
    r = run_two_pass(cfg, backend(), cfg.budgets[1])
    assert r.bit_error >= 0
    assert set(r.timing) >= {"pass1", "fit", "optimize", "pass2", "evaluate", "total"}
    parts = sum(v for k, v in r.timing.items() if k not in ("total", "pass1_cached"))
    assert parts <= r.timing["total"] * 1.05 + 1e-3
    assert r.schedule.expected_target > 0
    d = json.loads(r.to_json())
    assert TwoPassReport.from_dict(d).to_json() == r.to_json()
    assert "timing" not in json.loads(r.to_json(include_timing=False))


def flat_result(bits_per_frame, n=FRAMES):
    return EncodeResult(np.full(n, bits_per_frame), np.ones(n), np.ones(n), np.ones(n))


def test_evaluate_run_bit_error():
    cfg = config()
    assert evaluate_run(flat_result(100.0), cfg.scan, cfg.confidence, 0.0, 100.0 * FRAMES).bit_error == 0
    r = evaluate_run(flat_result(102.0), cfg.scan, cfg.confidence, 0.0, 100.0 * FRAMES)
    assert r.bit_error == pytest.approx(0.02)
    assert not np.isnan(r.quality.per_sai_mse).any()


def test_evaluate_run_partial_scan_leaves_unmapped_nan():
    scan = build_scan_order("spiral", SaiGridDims(SIDE, SIDE), 20)
    r = evaluate_run(flat_result(1.0, 20), scan, plateau_confidence(SIDE, SIDE), 0.0, 20.0)
    grid = r.quality.per_sai_mse
    assert np.isnan(grid).sum() == 5
    assert all(not np.isnan(grid[c]) for c in scan.cells)


def test_compare_runs():
    be = backend()
    opt = run_budgets(config(), be)
    base = run_budgets(config(mode=BASELINE), be)
    assert compare_runs(opt, opt).bd_rate == 0.0
    cmp = compare_runs(opt, base)
    assert cmp.bd_rate < 0
    assert "bd_rate_percent" in cmp.to_csv()
    assert json.loads(cmp.to_json())["rows"][0]["budget"] == opt[0].budget
    with pytest.raises(InputError):
        compare_runs(opt[:3], base[:3])


def test_quality_at_bits():
    be = backend()
    base = run_budgets(config(mode=BASELINE), be)
    mid = base[1]
    assert quality_at_bits(base, mid.achieved_bits) == pytest.approx(mid.quality.target_db)
    with pytest.raises(InputError):
        quality_at_bits(base, base[0].achieved_bits / 10)


def test_config_validation():
    with pytest.raises(InputError):
        TwoPassConfig(mode="greedy")
    with pytest.raises(InputError):
        TwoPassConfig(smooth_weight=-1)
    with pytest.raises(InputError):
        run_budgets(TwoPassConfig(), backend())


def test_unreachable_budget_saturates_at_sweep_end():
    be = backend()
    low = first_pass(be, profile_defaults("ai")).totals()[45] / 100
    cfg = config()
    r = run_two_pass(cfg, be, low)
    assert set(r.schedule.qps) == {45}
    assert r.bit_error > 1
