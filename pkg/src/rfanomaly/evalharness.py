"""Detection ratio, false-alarm rate and threshold-sweep ROC curves.

Events are half-open frame-index runs ``(first, stop, kind)``. An event is
detected when any scored frame in ``[first, stop + G)`` is flagged. False
alarms are counted per frame over normal, scored frames that are outside
every grace window ``[stop, stop + G)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateCurve, InvalidArgument
from .sigsim import NORMAL


def events_from_labels(frame_labels) -> list:
    """Maximal runs of consecutive frames sharing one non-normal label."""
    events, start = [], None
    labels = list(frame_labels)
    for i, k in enumerate(labels + [NORMAL]):
        if start is not None and k != labels[start]:
            events.append((start, i, labels[start]))
            start = None
        if start is None and i < len(labels) and k != NORMAL:
            start = i
    return events


@dataclass
class EvalResult:
    detected_events: int
    total_events: int
    false_alarms: int
    normal_frames: int
    per_kind: dict = field(default_factory=dict)  # kind -> [detected, total]
    threshold: float | None = None
    snr_tier: str | None = None

    @property
    def detection_ratio(self) -> float:
        return self.detected_events / self.total_events if self.total_events else 0.0

    @property
    def false_alarm_rate(self) -> float:
        return self.false_alarms / self.normal_frames if self.normal_frames else 0.0

    def kind_ratio(self, kind: str) -> float:
        d, t = self.per_kind.get(kind, (0, 0))
        return d / t if t else 0.0

    def __add__(self, other: "EvalResult") -> "EvalResult":
        per_kind = {k: list(v) for k, v in self.per_kind.items()}
        for k, (d, t) in other.per_kind.items():
            cur = per_kind.setdefault(k, [0, 0])
            cur[0] += d
            cur[1] += t
        return EvalResult(
            self.detected_events + other.detected_events,
            self.total_events + other.total_events,
            self.false_alarms + other.false_alarms,
            self.normal_frames + other.normal_frames,
            per_kind,
            self.threshold,
            self.snr_tier,
        )


def evaluate(flags, frame_labels, event_runs, grace_G: int = 0, scored=None) -> EvalResult:
    """Event-level detection ratio and frame-level false-alarm rate.

    ``scored`` masks frames that carry a score; unscored frames neither detect
    events nor count toward the false-alarm denominator.
    """
    flags = np.asarray(flags, dtype=bool)
    n = len(flags)
    if len(frame_labels) != n:
        raise InvalidArgument(f"{n} flags but {len(frame_labels)} labels")
    if grace_G < 0:
        raise InvalidArgument("grace window must be >= 0")
    scored = np.ones(n, dtype=bool) if scored is None else np.asarray(scored, dtype=bool)
    if len(scored) != n:
        raise InvalidArgument("scored mask must align with flags")
    live = flags & scored
    in_grace = np.zeros(n, dtype=bool)
    detected, per_kind = 0, {}
    for first, stop, kind in event_runs:
        if not 0 <= first < stop <= n:
            raise InvalidArgument(f"event ({first}, {stop}) outside [0, {n})")
        hit = bool(live[first : min(stop + grace_G, n)].any())
        in_grace[stop : min(stop + grace_G, n)] = True
        detected += hit
        counts = per_kind.setdefault(kind, [0, 0])
        counts[0] += hit
        counts[1] += 1
    normal = np.array([k == NORMAL for k in frame_labels], dtype=bool) & scored & ~in_grace
    return EvalResult(detected, len(event_runs), int((live & normal).sum()), int(normal.sum()), per_kind)


@dataclass
class RocPoint:
    false_alarm_rate: float
    detection_ratio: float
    threshold: float
    result: EvalResult


@dataclass
class RocCurve:
    points: list  # RocPoint, sorted by false_alarm_rate ascending
    meta: dict = field(default_factory=dict)

    @property
    def fa(self) -> np.ndarray:
        return np.array([p.false_alarm_rate for p in self.points])

    @property
    def dr(self) -> np.ndarray:
        return np.array([p.detection_ratio for p in self.points])

    @property
    def thresholds(self) -> np.ndarray:
        return np.array([p.threshold for p in self.points])


def _as_recordings(series):
    """Normalize a single recording or a list of them to a list of dicts."""
    if isinstance(series, dict):
        return [series]
    return list(series)


def roc_sweep(recordings, num_thresholds: int = 101, grace_G: int = 0) -> RocCurve:
    """Sweep quantile thresholds over pooled scores of one or more recordings.

    Each recording is a dict with ``scores`` (NaN = unscored), ``labels`` and
    optionally ``events`` (derived from labels when absent). Frames flag when
    ``score > threshold``. The sweep always includes a threshold just below
    the minimum (every scored frame flagged) and the maximum (none flagged).
    """
    recs = _as_recordings(recordings)
    if num_thresholds < 2:
        raise InvalidArgument("num_thresholds must be >= 2")
    pooled = np.concatenate([np.asarray(r["scores"], dtype=np.float64) for r in recs])
    pooled = pooled[np.isfinite(pooled)]
    if len(np.unique(pooled)) < 2:
        raise DegenerateCurve("need at least two distinct score values for a ROC curve")
    qs = np.quantile(pooled, np.linspace(0.0, 1.0, num_thresholds))
    thresholds = np.unique(np.concatenate([[np.nextafter(pooled.min(), -np.inf)], qs]))
    prepared = []
    for r in recs:
        s = np.asarray(r["scores"], dtype=np.float64)
        events = r.get("events")
        if events is None:
            events = events_from_labels(r["labels"])
        prepared.append((s, np.isfinite(s), list(r["labels"]), events))
    points = []
    for th in thresholds:
        total = None
        for s, ok, labels, events in prepared:
            res = evaluate(np.where(ok, s, -np.inf) > th, labels, events, grace_G, ok)
            total = res if total is None else total + res
        total.threshold = float(th)
        points.append(RocPoint(total.false_alarm_rate, total.detection_ratio, float(th), total))
    points.sort(key=lambda p: (p.false_alarm_rate, p.detection_ratio, -p.threshold))
    return RocCurve(points)


def dr_at_fa(curve: RocCurve, target_fa: float = 0.15) -> float:
    """Detection ratio at ``target_fa``, linearly interpolated between bracketing ROC points."""
    fa, dr = curve.fa, curve.dr
    ufa = np.unique(fa)
    best = np.array([dr[fa == f].max() for f in ufa])
    return float(np.interp(target_fa, ufa, best))


def operating_point(curve: RocCurve, max_fa: float = 0.15) -> RocPoint:
    """Highest-DR point with FA <= ``max_fa``.

    Ties go to the lowest false-alarm rate, then to the lowest threshold (the
    most sensitive setting with that DR and FA), so onsets are caught early.
    """
    ok = [p for p in curve.points if p.false_alarm_rate <= max_fa]
    if not ok:
        raise InvalidArgument(f"no ROC point has false-alarm rate <= {max_fa}")
    return max(ok, key=lambda p: (p.detection_ratio, -p.false_alarm_rate, -p.threshold))


ROC_COLUMNS = ["threshold", "false_alarm_rate", "detection_ratio", "snr_tier", "detector_kind", "anomaly_kind"]


def roc_rows(curve: RocCurve, snr_tier: str, detector_kind: str) -> list:
    """Rows for the pooled curve (``anomaly_kind = all``) followed by one block per kind."""
    rows = [[p.threshold, p.false_alarm_rate, p.detection_ratio, snr_tier, detector_kind, "all"] for p in curve.points]
    kinds = sorted({k for p in curve.points for k in p.result.per_kind})
    for kind in kinds:
        for p in curve.points:
            rows.append([p.threshold, p.false_alarm_rate, p.result.kind_ratio(kind), snr_tier, detector_kind, kind])
    return rows


def write_roc_csv(path, rows) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROC_COLUMNS)
        for r in rows:
            w.writerow([repr(float(r[0])), repr(float(r[1])), repr(float(r[2])), *r[3:]])
