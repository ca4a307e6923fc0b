import pytest

from distilkit.errors import PlanError, SplitError
from distilkit.model import ModelSpec, count_params, get_spec
from distilkit.planner import (
    CALIBRATION, CALIBRATION_ROWS, GIB, MEASURED_ROWS, OPT_BYTES, DeviceGrid, StrategyFlags, estimate_memory,
    estimate_row, format_table, plan_shards, recommend, report_row,
)
from distilkit.rng import Rng

BASE = StrategyFlags()
ZERO = StrategyFlags(zero_partition=True)
ZERO_DAG = StrategyFlags(zero_partition=True, also_partition_grads=True)
OFF = StrategyFlags(zero_partition=True, offload=True)
OFF_DAG = StrategyFlags(zero_partition=True, offload=True, also_partition_grads=True)
ALL_FLAGS = [BASE, ZERO, ZERO_DAG, OFF, OFF_DAG]


def random_spec(r: Rng) -> ModelSpec:
    heads = int(r.choice(4, 1)[0] + 1) * 8
    dim = heads * int(r.integers(8, 160))
    return ModelSpec(dim, int(r.integers(2, 60)), heads, 50000, 1024)


# -- shard plans ---------------------------------------------------------------------------------
def test_half_split_example():
    t6 = ModelSpec(768, 6, 12, 30000, 512, "t6")
    s4 = ModelSpec(384, 4, 12, 30000, 512, "s4")
    models = [t6, t6, s4]
    plan = plan_shards(models, DeviceGrid(2, 2), BASE)
    assert len(plan.devices) == 4
    for dev, entries in enumerate(plan.devices):
        for e in entries:
            assert set(e.fractions.values()) == {0.5}
            assert e.colocated_student == 0.5
        assert plan.param_count(dev, models) * 2 == sum(count_params(m) for m in models)


def test_mp1_equals_previous():
    models = [get_spec("110M"), get_spec("66M")]
    a = plan_shards(models, DeviceGrid(1, 4), BASE)
    b = plan_shards(models, DeviceGrid(1, 4), StrategyFlags("previous"))
    assert a.devices == b.devices


@pytest.mark.parametrize("mp, dp", [(1, 8), (2, 4), (4, 2), (4, 1), (2, 1)])
def test_conservation(mp, dp):
    models = [get_spec("340M"), get_spec("66M")]
    plan = plan_shards(models, DeviceGrid(mp, dp), BASE)
    total = sum(count_params(m) for m in models)
    assert sum(plan.param_count(d, models) for d in range(mp * dp)) == total * dp
    # each matrix's fractions over one MP group sum to 1
    for m in range(len(models)):
        for name in plan.devices[0][m].fractions:
            assert sum(plan.devices[d][m].fractions[name] for d in range(mp)) == 1


def test_split_and_grid_errors():
    odd = ModelSpec(60, 2, 3, 100, 16)
    with pytest.raises(SplitError):
        plan_shards([odd, odd], DeviceGrid(2, 1), BASE)
    with pytest.raises(SplitError):
        estimate_memory([odd], [odd], DeviceGrid(2, 1), BASE)
    with pytest.raises(PlanError):
        plan_shards([odd, odd], DeviceGrid(2, 1), StrategyFlags("previous"))
    with pytest.raises(PlanError):
        DeviceGrid(4, 4)
    with pytest.raises(PlanError):
        StrategyFlags(offload=True)


# -- memory model ---------------------------------------------------------------------------------
def test_calibration_row_exact():
    row = MEASURED_ROWS[1]
    assert (row.teacher, row.student) == ("110M", "66M")
    est = estimate_row(row)
    assert est.MA / GIB == pytest.approx(1.73, abs=1e-9)
    assert est.CA / GIB == pytest.approx(2.02, abs=1e-9)


def test_100b_parameter_component():
    est = estimate_memory(["100B"], ["20B"], DeviceGrid(8, 1), OFF)
    params = est.components["teacher_params"] + est.components["student_params"]
    assert params / 1e9 == pytest.approx(30.0, rel=0.02)
    assert params / GIB < 33.62
    assert est.feasible


def test_feasibility_boundary():
    assert len(CALIBRATION_ROWS) == 3
    for row in MEASURED_ROWS:
        est = estimate_row(row)
        assert est.feasible == (not row.overflow), (row.teacher, row.student, row.MP)


def test_held_out_ma_error():
    for i, row in enumerate(MEASURED_ROWS):
        if i in CALIBRATION_ROWS or row.overflow or row.offload:
            continue
        err = abs(estimate_row(row).MA / GIB - row.MA) / row.MA
        assert err <= 0.25, (row.teacher, row.student, err)


def test_doubling_mp_halves_parameters():
    for mp in (1, 2, 4):
        a = estimate_memory(["10B"], ["2B"], DeviceGrid(mp, 1), BASE).components
        b = estimate_memory(["10B"], ["2B"], DeviceGrid(2 * mp, 1), BASE).components
        for key in ("teacher_params", "student_params"):
            assert b[key] * 2 == a[key]


def test_zero_offload_algebra_randomized():
    r = Rng(7)
    for _ in range(60):
        t, s = random_spec(r), random_spec(r)
        mp = int(2 ** r.integers(0, 4))
        dp = int(2 ** r.integers(0, 4 - mp.bit_length() + 1))
        grid = DeviceGrid(mp, dp)
        base = estimate_memory([t], [s], grid, BASE)
        zero = estimate_memory([t], [s], grid, ZERO)
        zdag = estimate_memory([t], [s], grid, ZERO_DAG)
        assert zero.components["optimizer"] * dp == pytest.approx(base.components["optimizer"], rel=1e-15)
        assert base.components["optimizer"] == count_params(s) / mp * OPT_BYTES
        assert zdag.components["grads"] * dp == pytest.approx(base.components["grads"], rel=1e-15)
        for on, off in ((zero, estimate_memory([t], [s], grid, OFF)),
                        (zdag, estimate_memory([t], [s], grid, OFF_DAG))):
            moved = on.components["optimizer"] + on.components["grads"]
            assert on.MA - off.MA == pytest.approx(moved, rel=1e-9)
            assert off.cpu_mem - on.cpu_mem == pytest.approx(moved * grid.gpu_count, rel=1e-9)
        for est in (base, zero, zdag):
            assert est.CA >= est.MA
            assert est.feasible == (est.CA <= grid.gpu_mem_budget)


def test_ma_monotone_and_time_increasing_in_mp():
    r = Rng(8)
    for _ in range(30):
        t, s = random_spec(r), random_spec(r)
        for flags in ALL_FLAGS:
            ests = [estimate_memory([t], [s], DeviceGrid(mp, 1), flags) for mp in (1, 2, 4, 8)]
            assert all(b.MA <= a.MA for a, b in zip(ests, ests[1:]))
            assert all(b.relative_time > a.relative_time for a, b in zip(ests, ests[1:]))
            assert ests[0].relative_time >= 1.0


def test_relative_time_trend_matches_reference():
    assert CALIBRATION.c1 > 0 and CALIBRATION.c2 > 1
    t1 = estimate_memory(["5B"], ["1B"], DeviceGrid(1, 8), BASE).relative_time
    t8 = estimate_memory(["5B"], ["1B"], DeviceGrid(8, 1), BASE).relative_time
    assert t8 / t1 == pytest.approx(231.95 / 53.34, rel=1e-12)


# -- recommendation ------------------------------------------------------------------------------
def test_recommend_small_is_baseline():
    rec = recommend(["110M"], ["66M"], 40 * GIB)
    assert not rec.exhausted
    assert rec.grid.MP == 1 and rec.flags == BASE and len(rec.trace) == 1


def test_recommend_tries_zero_before_mp():
    rec = recommend(["10B"], ["2B"], 40 * GIB)
    labels = [(g.MP, f.label()) for g, f, _ in rec.trace]
    assert labels[0] == (1, "baseline")
    assert labels[1] == (1, "ZeRO+")
    assert not rec.exhausted and rec.estimate.feasible
    assert [e.feasible for _, _, e in rec.trace] == [False] * (len(rec.trace) - 1) + [True]


def test_recommend_escalates_to_offload_and_exhausts():
    rec = recommend(["100B"], ["20B"], 40 * GIB)
    assert rec.flags.offload and rec.grid.MP == 8
    assert recommend(["110M"], ["66M"], 0).exhausted
    huge = recommend(["110B"], ["22B"], 40 * GIB)
    assert huge.exhausted and len(huge.trace) == 9


def test_report_table():
    est = estimate_row(MEASURED_ROWS[1])
    row = report_row(est, MEASURED_ROWS[1].grid(), MEASURED_ROWS[1].flags())
    assert list(row)[:8] == ["MA", "CA", "relative_time", "Mem", "MP", "DP", "ZeRO", "Offload"]
    text = format_table([row], ["110M=>66M"])
    assert "110M=>66M" in text and "1.73" in text
