import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dydec.counting import EventLabel
from dydec.metrics import (
    PolyphonyVector,
    accu_rate,
    clip_difficulty,
    mae,
    max_polyp,
    mean_polyp,
    mse,
    polyphony_vector,
    ratio_polyp,
    stratified_report,
)

# Reconstructed step vector satisfying the published illustration's values:
# ratio 5/6, max 4, mean 9/6.
FIG_VECTOR = PolyphonyVector(p=np.array([2, 3, 3, 2, 4, 1]), step_duration=1.0)


def test_reference_vector_triple():
    assert ratio_polyp(FIG_VECTOR) == pytest.approx(5 / 6)
    assert max_polyp(FIG_VECTOR) == 4
    assert mean_polyp(FIG_VECTOR) == pytest.approx(9 / 6)


def test_polyphony_whole_clip_event():
    v = polyphony_vector([EventLabel(0.0, 5.0)], steps=10, clip_len=5.0)
    np.testing.assert_array_equal(v.p, 1)


def test_polyphony_disjoint_events():
    labels = [EventLabel(0.0, 1.0), EventLabel(2.0, 3.0)]
    v = polyphony_vector(labels, steps=10, clip_len=5.0)
    assert max_polyp(v) == 1


def test_polyphony_three_way_overlap():
    # Three events sharing exactly one step (step width 1s over [0, 6)).
    labels = [EventLabel(0.0, 3.0), EventLabel(2.0, 4.0), EventLabel(2.5, 6.0)]
    v = polyphony_vector(labels, steps=6, clip_len=6.0)
    assert np.count_nonzero(v.p == 3) == 1


def brute_force_polyphony(labels, steps, clip_len):
    dt = clip_len / steps
    out = np.zeros(steps, dtype=int)
    for i in range(steps):
        lo, hi = i * dt, (i + 1) * dt
        for ev in labels:
            # half-open step: any overlap of positive measure counts
            if ev.t_start < hi and ev.t_end > lo:
                out[i] += 1
    return out


@st.composite
def random_labels(draw):
    clip_len = draw(st.floats(1.0, 8.0))
    n = draw(st.integers(0, 10))
    labels = []
    for _ in range(n):
        start = draw(st.floats(0.0, clip_len * 0.95))
        end = draw(st.floats(min(start + 0.01, clip_len), clip_len))
        labels.append(EventLabel(start, end))
    steps = draw(st.integers(1, 60))
    return labels, steps, clip_len


@given(random_labels())
@settings(max_examples=100, deadline=None)
def test_polyphony_matches_brute_force(case):
    labels, steps, clip_len = case
    v = polyphony_vector(labels, steps, clip_len)
    np.testing.assert_array_equal(v.p, brute_force_polyphony(labels, steps, clip_len))


@given(st.lists(st.integers(0, 9), min_size=1, max_size=50))
@settings(max_examples=100, deadline=None)
def test_step_duplication_invariance(p):
    v = PolyphonyVector(np.array(p), step_duration=0.01)
    refined = PolyphonyVector(np.repeat(p, 2), step_duration=0.005)
    assert ratio_polyp(refined) == pytest.approx(ratio_polyp(v))
    assert max_polyp(refined) == max_polyp(v)
    assert mean_polyp(refined) == pytest.approx(mean_polyp(v))


@given(st.lists(st.integers(0, 9), min_size=1, max_size=50))
@settings(max_examples=100, deadline=None)
def test_metric_bounds(p):
    v = PolyphonyVector(np.array(p), step_duration=0.01)
    assert 0.0 <= ratio_polyp(v) <= 1.0
    assert mean_polyp(v) >= 0.0
    if max_polyp(v) >= 1:
        assert mean_polyp(v) <= max_polyp(v) - 1
    if max_polyp(v) <= 1:  # monophonic or silent
        assert ratio_polyp(v) == 0.0
        assert mean_polyp(v) == 0.0


def test_ratio_edge_cases():
    assert ratio_polyp(PolyphonyVector(np.zeros(7, dtype=int), 0.1)) == 0.0
    assert ratio_polyp(PolyphonyVector(np.full(7, 2), 0.1)) == 1.0


def test_max_polyp_edge_cases():
    assert max_polyp(PolyphonyVector(np.zeros(5, dtype=int), 0.1)) == 0
    assert max_polyp(PolyphonyVector(np.array([0, 1, 2, 3]), 0.1)) == 3


def test_mean_polyp_edge_cases():
    assert mean_polyp(PolyphonyVector(np.ones(9, dtype=int), 0.1)) == 0.0
    assert mean_polyp(PolyphonyVector(np.array([5]), 0.1)) == 4.0


def test_counting_metric_examples():
    y = np.array([2.0, 4.0])
    y_hat = np.array([3.0, 6.0])
    assert mae(y, y) == 0.0
    assert mse(y, y) == 0.0
    assert accu_rate(y, y) == 1.0
    assert mae(y, y_hat) == pytest.approx(1.5)
    assert mse(y, y_hat) == pytest.approx(np.sqrt(2.5))
    off_by_one = y + 1.0
    assert accu_rate(y, off_by_one, p=0) == 0.0
    assert accu_rate(y, off_by_one, p=1) == 1.0


@given(
    st.lists(st.floats(0, 20), min_size=1, max_size=40),
    st.lists(st.floats(0, 20), min_size=40, max_size=40),
)
@settings(max_examples=60, deadline=None)
def test_rms_dominates_mae(y, y_hat):
    y = np.array(y)
    y_hat = np.array(y_hat)[: len(y)]
    assert mse(y, y_hat) >= mae(y, y_hat) - 1e-12


def _records(ys, y_hats, polyps):
    return [
        {"y": y, "y_hat": yh, "max_polyp": mp, "ratio_polyp": mp / 10.0, "mean_polyp": mp / 2.0}
        for y, yh, mp in zip(ys, y_hats, polyps)
    ]


def test_single_stratum_equals_global():
    recs = _records([1, 2, 3], [1.2, 2.4, 2.7], [2, 2, 2])
    report = stratified_report(recs, "max_polyp")
    assert len(report.rows) == 1
    row = report.rows[0]
    assert row["n"] == 3
    assert row["mae"] == pytest.approx(report.global_metrics["mae"])
    assert row["mse_rms"] == pytest.approx(report.global_metrics["mse_rms"])


def test_empty_stratum_marked_na():
    recs = _records([1, 5], [1.0, 5.0], [1, 3])  # no max_polyp == 2 clip
    report = stratified_report(recs, "max_polyp")
    strata = {row["stratum"]: row for row in report.rows}
    assert strata["2"]["n"] == 0
    assert strata["2"]["mae"] is None
    assert "n/a" in report.to_csv()


def test_two_strata_match_manual_filtering():
    ys = [1, 2, 3, 4]
    yhs = [1.5, 2.0, 2.0, 5.0]
    polyps = [1, 1, 3, 3]
    report = stratified_report(_records(ys, yhs, polyps), "max_polyp")
    strata = {row["stratum"]: row for row in report.rows}
    assert strata["1"]["mae"] == pytest.approx(mae(np.array([1, 2]), np.array([1.5, 2.0])))
    assert strata["3"]["mae"] == pytest.approx(mae(np.array([3, 4]), np.array([2.0, 5.0])))
    assert strata["3"]["mse_rms"] == pytest.approx(mse(np.array([3, 4]), np.array([2.0, 5.0])))


def test_report_csv_and_json_shapes():
    report = stratified_report(_records([1, 2], [1, 2], [1, 2]), "ratio_polyp")
    csv_text = report.to_csv()
    assert csv_text.splitlines()[0].startswith("stratum,")
    import json

    payload = json.loads(report.to_json())
    assert payload["strata_key"] == "ratio_polyp"
    assert "global" in payload


def test_clip_difficulty_keys():
    d = clip_difficulty([EventLabel(0.0, 1.0), EventLabel(0.5, 1.5)], clip_len=2.0)
    assert set(d) == {"max_polyp", "ratio_polyp", "mean_polyp"}
    assert d["max_polyp"] == 2


def test_unknown_strata_key_rejected():
    with pytest.raises(ValueError):
        stratified_report(_records([1], [1], [1]), "bogus")
