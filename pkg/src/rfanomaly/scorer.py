"""Grid-segmented prediction error, Gaussian block statistics and the two detection rules."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgument

SIGMA_FLOOR = 1e-4
_LN_SQRT_2PI = 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class GridSpec:
    m: int = 8
    n: int = 8

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise InvalidArgument("grid dimensions must be positive")

    def check(self, height: int, width: int) -> None:
        if height % self.m or width % self.n:
            raise InvalidArgument(f"{self.m}x{self.n} grid does not divide {height}x{width} frames")


def grid_mae(pred, actual, g: GridSpec = GridSpec()) -> np.ndarray:
    """Per-block mean absolute error. Leading batch dims pass through: ``(..., H, W) -> (..., m, n)``."""
    pred = np.asarray(pred, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    if pred.shape != actual.shape or pred.ndim < 2:
        raise InvalidArgument(f"frame shapes differ: {pred.shape} vs {actual.shape}")
    H, W = pred.shape[-2:]
    g.check(H, W)
    d = np.abs(pred - actual).reshape(*pred.shape[:-2], g.m, H // g.m, g.n, W // g.n)
    return d.mean(axis=(-3, -1))


@dataclass(frozen=True)
class GridErrorStats:
    mu: np.ndarray
    sigma: np.ndarray
    fit_count: int

    def __post_init__(self):
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 2:
            raise InvalidArgument("mu and sigma must be matching m x n arrays")
        if np.any(self.sigma < SIGMA_FLOOR) or not np.all(np.isfinite(self.sigma)):
            raise InvalidArgument(f"sigma must be finite and >= {SIGMA_FLOOR}")
        if self.fit_count < 2:
            raise InvalidArgument("fit_count must be >= 2")

    def to_dict(self) -> dict:
        return {"mu": self.mu.tolist(), "sigma": self.sigma.tolist(), "fit_count": self.fit_count}

    @classmethod
    def from_dict(cls, d: dict) -> "GridErrorStats":
        return cls(np.asarray(d["mu"], dtype=np.float64), np.asarray(d["sigma"], dtype=np.float64), int(d["fit_count"]))


def fit_error_stats(block_errors) -> GridErrorStats:
    """Per-block sample mean and unbiased standard deviation over ``(N, m, n)`` error matrices."""
    e = np.asarray(block_errors, dtype=np.float64)
    if e.ndim != 3:
        raise InvalidArgument("expected an (N, m, n) stack of block-error matrices")
    if len(e) < 2:
        raise InvalidArgument("need at least 2 error matrices to fit statistics")
    sigma = np.maximum(e.std(axis=0, ddof=1), SIGMA_FLOOR)
    return GridErrorStats(e.mean(axis=0), sigma, len(e))


def frame_score(block_errors, stats: GridErrorStats):
    """Summed Gaussian negative log-likelihood over blocks (higher = more anomalous).

    Accepts one ``(m, n)`` matrix or a ``(..., m, n)`` stack.
    """
    e = np.asarray(block_errors, dtype=np.float64)
    if e.shape[-2:] != stats.mu.shape:
        raise InvalidArgument(f"block errors {e.shape[-2:]} do not match stats {stats.mu.shape}")
    z = (e - stats.mu) ** 2 / (2 * stats.sigma**2) + np.log(stats.sigma) + _LN_SQRT_2PI
    out = z.sum(axis=(-2, -1))
    return float(out) if out.ndim == 0 else out


@dataclass
class ScoreTrace:
    """Per-frame scores for frames ``1..N-1`` of a FrameSequence (frame 0 has no prediction)."""

    scores: np.ndarray
    frame_index: np.ndarray
    start_samples: np.ndarray
    end_samples: np.ndarray
    labels: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.frame_index = np.asarray(self.frame_index, dtype=np.int64)
        self.start_samples = np.asarray(self.start_samples, dtype=np.int64)
        self.end_samples = np.asarray(self.end_samples, dtype=np.int64)
        self.labels = [str(k) for k in self.labels]
        n = len(self.scores)
        if not (len(self.frame_index) == len(self.start_samples) == len(self.end_samples) == len(self.labels) == n):
            raise InvalidArgument("trace fields must align")
        if not np.all(np.isfinite(self.scores)):
            raise InvalidArgument("scores must be finite")

    def __len__(self):
        return len(self.scores)

    def to_csv(self, path, columns: dict | None = None) -> None:
        """Write ``frame_index,start_sample,score,<extra columns>,truth_label``."""
        columns = columns or {}
        for name, col in columns.items():
            if len(col) != len(self):
                raise InvalidArgument(f"column {name} has {len(col)} entries, trace has {len(self)}")
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame_index", "start_sample", "end_sample", "score", *columns, "truth_label"])
            for i in range(len(self)):
                extra = [_fmt(columns[c][i]) for c in columns]
                w.writerow([int(self.frame_index[i]), int(self.start_samples[i]), int(self.end_samples[i]),
                            repr(float(self.scores[i])), *extra, self.labels[i]])


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else repr(float(v))
    return v


def read_trace_csv(path) -> tuple:
    """Read a trace CSV back as ``(ScoreTrace, {extra column: ndarray})``."""
    with open(Path(path), newline="") as fh:
        rows = list(csv.DictReader(fh))
    fixed = {"frame_index", "start_sample", "end_sample", "score", "truth_label"}
    extra_names = [c for c in (rows[0].keys() if rows else []) if c not in fixed]
    trace = ScoreTrace(
        [float(r["score"]) for r in rows],
        [int(r["frame_index"]) for r in rows],
        [int(r["start_sample"]) for r in rows],
        [int(r["end_sample"]) for r in rows],
        [r["truth_label"] for r in rows],
    )
    extras = {c: np.array([float(r[c]) for r in rows]) for c in extra_names}
    return trace, extras


def score_sequence(preds, frames, stats: GridErrorStats, g: GridSpec = GridSpec()) -> np.ndarray:
    """NLL scores for frames ``1..N-1`` given one-step predictions aligned with ``frames``."""
    return np.atleast_1d(frame_score(grid_mae(np.asarray(preds)[1:], np.asarray(frames)[1:], g), stats))


def make_trace(scores, seq, meta: dict | None = None) -> ScoreTrace:
    """Wrap scores of frames ``1..N-1`` of ``seq`` (a FrameSequence) into a trace."""
    idx = np.arange(1, len(seq))
    return ScoreTrace(scores, idx, seq.start_samples[1:], seq.end_samples[1:], seq.frame_labels[1:], dict(meta or {}))


def _scores_of(trace) -> np.ndarray:
    return np.asarray(getattr(trace, "scores", trace), dtype=np.float64)


def slope_series(trace, window_W: int) -> np.ndarray:
    """Least-squares slope of the last ``W`` scores at each frame; NaN for the first ``W-1`` frames."""
    s = _scores_of(trace)
    if window_W < 2:
        raise InvalidArgument("slope window W must be >= 2")
    if window_W > len(s):
        raise InvalidArgument(f"slope window {window_W} is longer than the trace ({len(s)})")
    t = np.arange(window_W) - (window_W - 1) / 2
    out = np.full(len(s), np.nan)
    out[window_W - 1 :] = sliding_window_view(s, window_W) @ t / (t @ t)
    return out


def slope_detector(trace, window_W: int, slope_threshold: float) -> np.ndarray:
    sl = slope_series(trace, window_W)
    return np.nan_to_num(sl, nan=-np.inf) > slope_threshold


def level_detector(trace, threshold: float) -> np.ndarray:
    return _scores_of(trace) > threshold
