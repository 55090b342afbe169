import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from exchangeable.analysis import (
    METRIC_FIELDS,
    MetricRecord,
    MetricsParseError,
    encoder_from_run_id,
    format_space_report,
    format_summary,
    iterations_to_threshold,
    read_metrics,
    reduction_factor,
    space_sizes,
    summarize_runs,
    write_metrics,
    write_summary_csv,
)
from exchangeable.diffcore import DomainError


def test_space_sizes_example():
    r = space_sizes(5, 2)
    assert (r.ordered_size, r.invariant_size, r.ratio) == (20, 10, 2)
    text = format_space_report(r)
    assert "20" in text and "10" in text


def test_space_sizes_by_enumeration():
    for n in range(1, 7):
        for m in range(1, n + 1):
            tuples = list(itertools.permutations(range(n), m))
            subsets = {frozenset(t) for t in tuples}
            r = space_sizes(n, m)
            assert r.ordered_size == len(tuples)
            assert r.invariant_size == len(subsets)
            assert r.ratio == len(tuples) // len(subsets)


def test_space_sizes_large_exact():
    r = space_sizes(30, 10)
    assert r.ordered_size == 109027350432000
    assert r.invariant_size == 30045015
    assert r.ratio == 3628800 == reduction_factor(10)


@given(st.integers(1, 60), st.data())
def test_ratio_is_m_factorial(n, data):
    m = data.draw(st.integers(1, n))
    r = space_sizes(n, m)
    assert r.ratio == math.factorial(m) == reduction_factor(m)
    assert r.ordered_size == r.invariant_size * r.ratio


@pytest.mark.parametrize("n,m", [(3, 0), (3, 4), (0, 0), (-1, 1)])
def test_space_sizes_domain(n, m):
    with pytest.raises(DomainError):
        space_sizes(n, m)


def test_reduction_factor_domain():
    with pytest.raises(DomainError):
        reduction_factor(0)


# ---------------------------------------------------------------- metrics CSV


def record(run_id="scavenger1-attention-n1-s0", it=1, ret=0.25, **kw):
    base = dict(
        run_id=run_id, seed=0, iteration=it, env_steps=2048 * it, mean_return=ret, std_return=0.1,
        mean_length=40.0, policy_loss=-0.01, value_loss=0.3, entropy=2.8, approx_kl=0.004,
        clip_fraction=0.05, wall_seconds=0.7,
    )
    base.update(kw)
    return MetricRecord(**base)


def test_metrics_round_trip_exact(tmp_path):
    recs = [record(it=i, ret=1 / 3 + i * 1e-17, policy_loss=math.pi * i) for i in range(1, 6)]
    recs.append(record(it=6, ret=float("nan")))
    path = write_metrics(recs, tmp_path / "m.csv")
    back = read_metrics(path)
    assert len(back) == 6
    for a, b in zip(recs[:5], back[:5]):
        assert a == b
    assert math.isnan(back[5].mean_return)
    header = (tmp_path / "m.csv").read_text().splitlines()[0]
    assert header.split(",") == list(METRIC_FIELDS)


def test_metrics_append_keeps_single_header(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics([record(it=1)], path)
    write_metrics([record(it=2)], path)
    lines = path.read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("run_id")
    assert [r.iteration for r in read_metrics(path)] == [1, 2]


def test_metrics_header_mismatch(tmp_path):
    path = tmp_path / "m.csv"
    path.write_text("a,b,c\n")
    with pytest.raises(MetricsParseError):
        write_metrics([record()], path)


def test_metrics_parse_error_names_line(tmp_path):
    path = tmp_path / "m.csv"
    write_metrics([record(it=1), record(it=2)], path)
    lines = path.read_text().splitlines()
    lines[2] = lines[2].replace("4096", "lots", 1)
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(MetricsParseError, match=r"m\.csv:3:"):
        read_metrics(path)


def test_encoder_from_run_id():
    assert encoder_from_run_id("scavenger1-ordered-n3-s2") == "ordered"
    assert encoder_from_run_id("convoy-deepsets-n3-s0") == "deepsets"
    assert encoder_from_run_id("custom") == "unknown"


# ---------------------------------------------------------------- summaries


def test_iterations_to_threshold():
    its = list(range(1, 11))
    rets = [0, 0, 0, 1, 0, 1, 1, 1, 1, 1]
    assert iterations_to_threshold(rets, its, 0.5, smooth=1) == 4
    # trailing mean of 5 first reaches 0.6 at iteration 7
    assert iterations_to_threshold(rets, its, 0.6, smooth=5) == 7
    assert iterations_to_threshold(rets, its, 2.0) is None


def test_summarize_ramp_vs_flat(tmp_path):
    ramp = [record("s-attention-n1-s0", i, ret=i / 50) for i in range(1, 101)]
    slow = [record("s-ordered-n1-s0", i, ret=i / 100) for i in range(1, 101)]
    flat = [record("s-deepsets-n1-s0", i, ret=-1.0) for i in range(1, 101)]
    paths = []
    for name, recs in (("a", ramp), ("b", slow), ("c", flat)):
        paths.append(write_metrics(recs, tmp_path / f"{name}.csv"))
    rows = {r.encoder: r for r in summarize_runs(paths, window=20, threshold=0.5, smooth=5)}

    # trailing mean of 5 on i/50 reaches 0.5 at i = 27; on i/100 at i = 52
    assert rows["attention"].iters_to_threshold == 27
    assert rows["ordered"].iters_to_threshold == 52
    assert rows["deepsets"].iters_to_threshold is None
    assert rows["attention"].relative_efficiency == 1.0
    assert rows["ordered"].relative_efficiency == pytest.approx(27 / 52)
    assert rows["deepsets"].relative_efficiency == 0.0
    assert rows["attention"].final_mean_return == pytest.approx(np.mean([i / 50 for i in range(81, 101)]))
    assert rows["deepsets"].below_threshold and not rows["attention"].below_threshold

    text = format_summary(list(rows.values()))
    assert "not reached" in text
    write_summary_csv(list(rows.values()), tmp_path / "summary.csv")
    assert len((tmp_path / "summary.csv").read_text().splitlines()) == 4


def test_summarize_needs_paths():
    with pytest.raises(ValueError):
        summarize_runs([])
