import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rfanomaly.errors import DegenerateCurve, InvalidArgument
from rfanomaly.evalharness import (
    ROC_COLUMNS,
    EvalResult,
    dr_at_fa,
    evaluate,
    events_from_labels,
    operating_point,
    roc_rows,
    roc_sweep,
    write_roc_csv,
)


def labels_with(n, events):
    labels = ["normal"] * n
    for a, b, k in events:
        labels[a:b] = [k] * (b - a)
    return labels


def brute_evaluate(flags, labels, events, G):
    n = len(flags)
    detected = 0
    grace = set()
    for a, b, _ in events:
        if any(flags[t] for t in range(a, min(b + G, n))):
            detected += 1
        grace.update(range(b, min(b + G, n)))
    normal = [t for t in range(n) if labels[t] == "normal" and t not in grace]
    fa = sum(1 for t in normal if flags[t])
    return detected, len(events), fa, len(normal)


def random_instance(rng, n=60):
    events, t = [], int(rng.integers(0, 8))
    kinds = ["tone", "barrage", "sweep"]
    while t < n - 3:
        length = int(rng.integers(1, 6))
        if t + length > n:
            break
        events.append((t, t + length, kinds[int(rng.integers(0, 3))]))
        t += length + int(rng.integers(1, 12))
    return rng.random(n) < 0.3, labels_with(n, events), events


# ---------------------------------------------------------------- events


def test_events_from_labels():
    labels = ["normal", "tone", "tone", "normal", "sweep", "barrage", "barrage"]
    assert events_from_labels(labels) == [(1, 3, "tone"), (4, 5, "sweep"), (5, 7, "barrage")]
    assert events_from_labels(["normal"] * 4) == []


# ---------------------------------------------------------------- evaluate


def test_all_flagged_and_none_flagged():
    labels = labels_with(20, [(5, 8, "tone"), (12, 15, "sweep")])
    ev = events_from_labels(labels)
    r = evaluate(np.ones(20, bool), labels, ev)
    assert (r.detection_ratio, r.false_alarm_rate) == (1.0, 1.0)
    r = evaluate(np.zeros(20, bool), labels, ev)
    assert (r.detection_ratio, r.false_alarm_rate) == (0.0, 0.0)


def test_half_detected_hand_count():
    labels = labels_with(20, [(5, 8, "tone"), (12, 15, "sweep")])
    flags = np.zeros(20, bool)
    flags[6] = True
    r = evaluate(flags, labels, events_from_labels(labels))
    assert r.detection_ratio == 0.5 and r.false_alarm_rate == 0.0
    assert r.per_kind == {"tone": [1, 1], "sweep": [0, 1]}
    assert r.kind_ratio("sweep") == 0.0


def test_grace_window_detects_and_excludes():
    labels = labels_with(20, [(5, 8, "tone")])
    ev = events_from_labels(labels)
    flags = np.zeros(20, bool)
    flags[9] = True  # one frame after the event ends
    assert evaluate(flags, labels, ev, grace_G=0).detection_ratio == 0.0
    assert evaluate(flags, labels, ev, grace_G=0).false_alarms == 1
    r = evaluate(flags, labels, ev, grace_G=3)
    assert r.detection_ratio == 1.0 and r.false_alarms == 0 and r.normal_frames == 20 - 3 - 3


def test_unscored_frames_are_ignored():
    labels = labels_with(10, [(0, 2, "tone")])
    flags = np.ones(10, bool)
    scored = np.ones(10, bool)
    scored[:2] = False
    r = evaluate(flags, labels, events_from_labels(labels), scored=scored)
    assert r.detection_ratio == 0.0 and r.normal_frames == 8


def test_evaluate_errors():
    with pytest.raises(InvalidArgument):
        evaluate(np.zeros(5, bool), ["normal"] * 4, [])
    with pytest.raises(InvalidArgument):
        evaluate(np.zeros(5, bool), ["normal"] * 5, [(3, 7, "tone")])
    with pytest.raises(InvalidArgument):
        evaluate(np.zeros(5, bool), ["normal"] * 5, [], grace_G=-1)


def test_results_pool():
    a = EvalResult(1, 2, 3, 10, {"tone": [1, 2]})
    b = EvalResult(2, 2, 0, 10, {"tone": [1, 1], "sweep": [1, 1]})
    c = a + b
    assert (c.detected_events, c.total_events, c.false_alarms, c.normal_frames) == (3, 4, 3, 20)
    assert c.per_kind == {"tone": [2, 3], "sweep": [1, 1]}
    assert a.per_kind == {"tone": [1, 2]}


def test_matches_brute_force_on_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        flags, labels, events = random_instance(rng)
        G = int(rng.integers(0, 5))
        r = evaluate(flags, labels, events, G)
        assert (r.detected_events, r.total_events, r.false_alarms, r.normal_frames) == brute_evaluate(
            flags, labels, events, G)
        assert 0 <= r.detection_ratio <= 1 and 0 <= r.false_alarm_rate <= 1


@settings(max_examples=40)
@given(st.integers(0, 2**32 - 1))
def test_event_order_does_not_matter(seed):
    rng = np.random.default_rng(seed)
    flags, labels, events = random_instance(rng)
    shuffled = [events[i] for i in rng.permutation(len(events))]
    a, b = evaluate(flags, labels, events, 2), evaluate(flags, labels, shuffled, 2)
    assert (a.detected_events, a.false_alarms, a.normal_frames) == (b.detected_events, b.false_alarms, b.normal_frames)
    assert a.per_kind == b.per_kind


# ---------------------------------------------------------------- ROC


def _scored_recording(rng, n=200, separable=False):
    labels = labels_with(n, [(40, 50, "tone"), (120, 130, "barrage"), (170, 175, "sweep")])
    s = rng.normal(0, 1, n)
    anomalous = np.array([k != "normal" for k in labels])
    s[anomalous] += 10 if separable else 1.5
    return {"scores": s, "labels": labels}


def test_roc_endpoints_and_sort_order():
    curve = roc_sweep(_scored_recording(np.random.default_rng(1)), num_thresholds=51)
    pts = [(p.false_alarm_rate, p.detection_ratio) for p in curve.points]
    assert (0.0, 0.0) in pts and (1.0, 1.0) in pts
    assert np.all(np.diff(curve.fa) >= 0)
    assert len(set(curve.thresholds)) == len(curve.thresholds)


def test_roc_rates_nonincreasing_in_threshold():
    curve = roc_sweep(_scored_recording(np.random.default_rng(2)), num_thresholds=101, grace_G=2)
    order = np.argsort(curve.thresholds)
    assert np.all(np.diff(curve.dr[order]) <= 0)
    assert np.all(np.diff(curve.fa[order]) <= 0)


def test_roc_separable_has_perfect_point():
    curve = roc_sweep(_scored_recording(np.random.default_rng(3), separable=True), num_thresholds=101)
    assert any(p.detection_ratio == 1.0 and p.false_alarm_rate == 0.0 for p in curve.points)
    op = operating_point(curve, 0.15)
    assert op.detection_ratio == 1.0 and op.false_alarm_rate == 0.0


def test_roc_constant_scores_degenerate():
    with pytest.raises(DegenerateCurve):
        roc_sweep({"scores": np.ones(30), "labels": ["normal"] * 30})


def test_roc_ignores_nan_and_pools_recordings():
    rng = np.random.default_rng(4)
    a, b = _scored_recording(rng), _scored_recording(rng)
    a["scores"][:4] = np.nan
    curve = roc_sweep([a, b], num_thresholds=21)
    assert curve.points[-1].result.total_events == 6
    assert curve.points[-1].result.normal_frames == 2 * (200 - 25) - 4


def test_dr_at_fa_linear_interpolation():
    c = roc_sweep(_scored_recording(np.random.default_rng(5)), num_thresholds=101)
    fa, dr = c.fa, c.dr
    lo = max(f for f in fa if f <= 0.15)
    hi = min(f for f in fa if f >= 0.15)
    d_lo, d_hi = dr[fa == lo].max(), dr[fa == hi].max()
    want = d_lo if hi == lo else d_lo + (d_hi - d_lo) * (0.15 - lo) / (hi - lo)
    assert dr_at_fa(c, 0.15) == pytest.approx(want, abs=1e-12)


def test_operating_point_respects_fa_bound():
    c = roc_sweep(_scored_recording(np.random.default_rng(6)), num_thresholds=101)
    op = operating_point(c, 0.1)
    assert op.false_alarm_rate <= 0.1
    assert op.detection_ratio == max(p.detection_ratio for p in c.points if p.false_alarm_rate <= 0.1)


def test_operating_point_tie_break():
    c = roc_sweep(_scored_recording(np.random.default_rng(3), separable=True), num_thresholds=101)
    op = operating_point(c, 0.15)
    tied = [p for p in c.points if p.detection_ratio == 1.0 and p.false_alarm_rate == 0.0]
    assert len(tied) > 1
    assert op.threshold == min(p.threshold for p in tied)


def test_roc_csv_layout(tmp_path):
    c = roc_sweep(_scored_recording(np.random.default_rng(7)), num_thresholds=11)
    rows = roc_rows(c, "high", "scf")
    write_roc_csv(tmp_path / "roc.csv", rows)
    lines = (tmp_path / "roc.csv").read_text().splitlines()
    assert lines[0] == ",".join(ROC_COLUMNS)
    kinds = {ln.rsplit(",", 1)[1] for ln in lines[1:]}
    assert kinds == {"all", "tone", "barrage", "sweep"}
    assert len(lines) - 1 == 4 * len(c.points)
