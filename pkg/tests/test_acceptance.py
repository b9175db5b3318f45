"""Acceptance suite: each criterion runs at full size and prints one PASS/FAIL line.

The lines are repeated in the terminal summary of any pytest run.
The memory-ablation benchmark trains five models and takes most of the
suite's runtime.
"""

import time

import pytest

from shotcast.harness import checks
from shotcast.harness.bench import run_bench, write_outputs
from shotcast.harness.config import RunConfig


@pytest.fixture
def report(record_property):
    def emit(number: int, name: str, ok: bool, detail: str, seconds: float, budget: float | None = None):
        within = budget is None or seconds <= budget
        status = "PASS" if ok and within else "FAIL"
        limit = f" (budget {budget:.0f}s)" if budget is not None else ""
        line = f"{status}  criterion {number} {name}: {detail} [{seconds:.1f}s{limit}]"
        print("\n" + line)
        record_property("acceptance", line)
        return ok and within
    return emit


def timed(fn, **kw):
    t0 = time.perf_counter()
    ok, detail = fn(**kw)
    return ok, detail, time.perf_counter() - t0


def test_criterion_1_mask_matches_enumerator(report):
    ok, detail, sec = timed(checks.mask_matches_enumerator, Ns=(1, 2, 3, 4), Ls=(1, 3))
    assert report(1, "packed mask vs brute-force enumerator", ok, detail, sec, budget=1.0)


def test_criterion_2_zero_leakage(report):
    ok, detail, sec = timed(checks.zero_leakage, trials=100, layers=4)
    assert report(2, "no information flow from unreachable frames", ok, detail, sec, budget=30.0)


def test_criterion_3_packed_equals_streaming(report):
    ok, detail, sec = timed(checks.packed_vs_streaming, N=6, L=3, tol=1e-5)
    assert report(3, "packed teacher forcing equals streaming rollout", ok, detail, sec, budget=60.0)


def test_criterion_4_topk_oracle(report):
    ok, detail, sec = timed(checks.topk_matches_sort, caches=1000, max_size=200, k=5)
    assert report(4, "top-k selection vs sort oracle", ok, detail, sec)


def test_criterion_5_bounded_positions(report):
    ok, detail, sec = timed(checks.position_bound, chunks=1000)
    assert report(5, "1000-chunk rollout keeps positions and attention bounded", ok, detail, sec, budget=300.0)


def test_criterion_6_solver_oracle(report):
    ok, detail, sec = timed(checks.solver_oracle, tol=1e-5)
    assert report(6, "Euler solver vs straight-path oracle", ok, detail, sec)


def test_criterion_7_gradients(report):
    ok, detail, sec = timed(checks.gradient_checks, tol=1e-3)
    assert report(7, "finite-difference gradient checks", ok, detail, sec)


@pytest.mark.slow
def test_criterion_8_memory_ablation(tmp_path, report):
    cfg = RunConfig()
    t0 = time.perf_counter()
    res = run_bench(cfg)
    sec = time.perf_counter() - t0
    write_outputs(res, tmp_path)
    gain = res.camr_gain()
    ok = res.ordering_holds() and gain is not None and gain >= 0.10
    means = ", ".join(f"{v} {res.mean(v):.4f}" for v in res.variants)
    detail = f"mean recall error {means}; camr {100 * gain:.1f}% below no-memory over {len(res.seeds)} seeds"
    assert report(8, "content routing beats sink beats window-only", ok, detail, sec, budget=7200.0)


def test_criterion_9_interactive_continuation(report):
    ok, detail, sec = timed(checks.interactive_continuation)
    assert report(9, "appending a shot reuses the cache; resume is bitwise", ok, detail, sec)
