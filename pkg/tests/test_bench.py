import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mpx import bench, harness, profiler
from mpx.bench import (
    BenchResult,
    OverheadRow,
    ep_count,
    ep_kernel,
    lcg_jump,
    lcg_next,
    overhead_report,
    pingpong,
    read_results,
    render_overhead,
    write_results,
    _share,
)
from mpx.errors import ReportError, UsageError
from mpx.harness import MulticoreGroup
from mpx.profiler import Profiler


def run_ranks(size, body):
    """Run body(ctx) on `size` rank threads; returns {rank: return value}."""
    group = MulticoreGroup(size)
    results = {}
    errors = []

    def target(rank):
        ctx = group.context(rank)
        ctx.activate()
        try:
            results[rank] = body(ctx)
        except BaseException as exc:  # surfaced after the join
            errors.append(exc)
        finally:
            ctx.finalize()

    threads = [threading.Thread(target=target, args=(r,)) for r in range(size)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(30)
    if errors:
        raise errors[0]
    return results


# -- the jumpable generator -------------------------------------------------------


@settings(max_examples=80)
@given(state=st.integers(0, 2**64 - 1), steps=st.integers(0, 300))
def test_jump_matches_sequential_stepping(state, steps):
    expected = state
    for _ in range(steps):
        expected = lcg_next(expected)
    assert lcg_jump(state, steps) == expected


@settings(max_examples=80)
@given(
    state=st.integers(0, 2**64 - 1),
    a=st.integers(0, 2**64 - 1),
    b=st.integers(0, 2**64 - 1),
)
def test_jump_composes(state, a, b):
    assert lcg_jump(lcg_jump(state, a), b) == lcg_jump(state, a + b)


def test_jump_zero_is_identity():
    assert lcg_jump(12345, 0) == 12345


@settings(max_examples=100)
@given(total=st.integers(0, 500), size=st.integers(1, 9))
def test_share_partitions_exactly(total, size):
    pieces = [_share(total, r, size) for r in range(size)]
    assert sum(c for _, c in pieces) == total
    cursor = 0
    for offset, count in pieces:
        assert offset == cursor
        cursor += count
    counts = [c for _, c in pieces]
    assert max(counts) - min(counts) <= 1
    assert counts == sorted(counts, reverse=True)


@settings(max_examples=40)
@given(
    seed=st.integers(0, 2**64 - 1),
    total=st.integers(0, 300),
    size=st.integers(1, 7),
)
def test_ep_count_is_partition_invariant(seed, total, size):
    whole = ep_count(seed, 0, total)
    split = sum(
        ep_count(seed, *_share(total, rank, size)) for rank in range(size)
    )
    assert split == whole


def test_ep_kernel_checksum_is_rank_count_independent():
    _, single = run_ranks(1, lambda ctx: ep_kernel(ctx, 10, seed=42))[0]
    results = run_ranks(4, lambda ctx: ep_kernel(ctx, 10, seed=42))
    result, quad = results[0]
    assert quad == single
    assert results[1] == (None, None)
    assert result.benchmark == "ep"
    assert result.params == {"scale": 10, "seed": 42}
    assert result.metrics["wall_s"] > 0


def test_ep_kernel_rejects_small_scales():
    group = MulticoreGroup(1)
    with pytest.raises(UsageError):
        ep_kernel(group.context(0), 9, seed=1)


def test_profiling_does_not_change_the_checksum():
    _, plain = run_ranks(1, lambda ctx: ep_kernel(ctx, 11, seed=7))[0]
    profiler.install(Profiler())
    try:
        _, profiled = run_ranks(1, lambda ctx: ep_kernel(ctx, 11, seed=7))[0]
    finally:
        profiler.install(None)
    assert profiled == plain


# -- ping-pong ----------------------------------------------------------------------


def test_pingpong_shapes_and_positivity():
    results = run_ranks(2, lambda ctx: pingpong(ctx, [1, 1024], reps=20))
    assert results[1] == []
    rank0 = results[0]
    assert [r.params["size"] for r in rank0] == [1, 1024]
    for r in rank0:
        assert r.benchmark == "pingpong"
        assert r.reps == 20
        assert set(r.metrics) == {"latency_us", "bandwidth_mbps"}
        assert r.metrics["latency_us"] > 0
        assert r.metrics["bandwidth_mbps"] > 0


def test_pingpong_guards():
    lone = MulticoreGroup(1).context(0)
    with pytest.raises(UsageError):
        pingpong(lone, [1], reps=5)


def test_pingpong_rejects_bad_reps_and_sizes():
    with pytest.raises(UsageError):
        run_ranks(2, lambda ctx: pingpong(ctx, [1], reps=0))
    with pytest.raises(UsageError):
        run_ranks(2, lambda ctx: pingpong(ctx, [0], reps=5))


# -- results ------------------------------------------------------------------------


def test_bench_result_validation_and_params_token():
    result = BenchResult("ep", {"seed": 2, "scale": 10}, 1, {"wall_s": 1.0}, False)
    assert result.params_token() == "scale=10;seed=2"
    with pytest.raises(ValueError):
        BenchResult("ep", {}, 0, {}, False)


def test_results_csv_round_trip(tmp_path):
    results = [
        BenchResult(
            "pingpong",
            {"size": 1},
            1000,
            {"latency_us": 12.625, "bandwidth_mbps": 1.2677},
            False,
        ),
        BenchResult("ep", {"scale": 10, "seed": 42}, 1, {"wall_s": 0.25}, True),
    ]
    path = tmp_path / "results.csv"
    write_results(path, results)
    loaded = read_results(path)
    key = lambda r: (r.benchmark, r.params_token(), r.profiled)
    assert sorted(loaded, key=key) == sorted(results, key=key)


def test_results_csv_rejects_foreign_files(tmp_path):
    path = tmp_path / "results.csv"
    path.write_text("a,b,c\n1,2,3\n")
    with pytest.raises(ReportError):
        read_results(path)
    path.write_text(
        "benchmark,profiled,reps,params,metric,value\npingpong,0,1,size=1,latency_us\n"
    )
    with pytest.raises(ReportError):
        read_results(path)


# -- overhead -----------------------------------------------------------------------


def res(profiled, **metrics):
    return BenchResult("pingpong", {"size": 1}, 1000, metrics, profiled)


def test_overhead_is_exact():
    rows = overhead_report(res(False, latency_us=10.0), res(True, latency_us=11.5))
    assert rows == [OverheadRow("latency_us", 10.0, 11.5, 15.0)]
    assert rows[0].overhead_pct == 15.0  # exact, no float slop


def test_overhead_identity_is_zero():
    rows = overhead_report(res(False, latency_us=3.7), res(True, latency_us=3.7))
    assert rows[0].overhead_pct == 0.0


def test_overhead_negative_changes_pass_through():
    rows = overhead_report(res(False, latency_us=10.0), res(True, latency_us=9.0))
    assert rows[0].overhead_pct == -10.0


def test_overhead_guards():
    base = res(False, latency_us=10.0)
    with pytest.raises(ReportError, match="benchmark mismatch"):
        overhead_report(
            base, BenchResult("ep", {"size": 1}, 1000, {"latency_us": 1.0}, True)
        )
    with pytest.raises(ReportError, match="parameter mismatch"):
        overhead_report(
            base,
            BenchResult("pingpong", {"size": 2}, 1000, {"latency_us": 1.0}, True),
        )
    with pytest.raises(ReportError, match="reps mismatch"):
        overhead_report(
            base, BenchResult("pingpong", {"size": 1}, 999, {"latency_us": 1.0}, True)
        )
    with pytest.raises(ReportError, match="one profiled and one unprofiled"):
        overhead_report(base, res(False, latency_us=11.0))
    with pytest.raises(ReportError, match="metric mismatch"):
        overhead_report(base, res(True, bandwidth_mbps=1.0))
    with pytest.raises(ReportError, match="non-positive base"):
        overhead_report(res(False, latency_us=0.0), res(True, latency_us=1.0))


def test_render_overhead_format():
    rows = [OverheadRow("latency_us", 10.0, 11.5, 15.0)]
    assert render_overhead("pingpong", "size=1", rows) == (
        "== pingpong size=1 ==\n"
        "latency_us  base=10.0  profiled=11.5  overhead=+15.0%\n"
    )
