"""Spectral matrices to unit-interval image frames, plus dataset persistence."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ChecksumMismatch, DatasetError, DatasetNotFound, InvalidArgument
from .sigsim import NORMAL, LabelTrack
from .spectra import SpectralMatrix

EPS = 1e-12


@dataclass(frozen=True)
class FrameParams:
    height: int = 64
    width: int = 64
    db_floor: float = 0.0
    db_ceil: float = 60.0
    columns_per_frame: int | None = None
    frame_stride_columns: int | None = None

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise InvalidArgument("frame height/width must be positive")
        if not self.db_ceil > self.db_floor:
            raise InvalidArgument("db_ceil must exceed db_floor")
        if self.columns_per_frame is None:
            object.__setattr__(self, "columns_per_frame", self.width)
        if self.frame_stride_columns is None:
            object.__setattr__(self, "frame_stride_columns", max(1, self.width // 4))
        if self.columns_per_frame < 1 or self.frame_stride_columns < 1:
            raise InvalidArgument("columns_per_frame and frame_stride_columns must be positive")


@dataclass
class FrameSequence:
    frames: np.ndarray  # (N, H, W), values in [0, 1]
    frame_labels: list
    start_samples: np.ndarray
    end_samples: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        self.start_samples = np.asarray(self.start_samples, dtype=np.int64)
        self.end_samples = np.asarray(self.end_samples, dtype=np.int64)
        self.frame_labels = [str(k) for k in self.frame_labels]
        n = len(self.frames)
        if self.frames.ndim != 3:
            raise InvalidArgument("frames must be an (N, H, W) array")
        if not (len(self.frame_labels) == len(self.start_samples) == len(self.end_samples) == n):
            raise InvalidArgument("labels and timing must align with frames")
        if n and (self.frames.min() < 0 or self.frames.max() > 1):
            raise InvalidArgument("pixels must lie in [0, 1]")
        if n > 1 and np.any(np.diff(self.start_samples) <= 0):
            raise InvalidArgument("frame timing must be strictly increasing")

    def __len__(self):
        return len(self.frames)

    @property
    def anomalous(self) -> np.ndarray:
        return np.array([k != NORMAL for k in self.frame_labels], dtype=bool)

    def subset(self, idx) -> "FrameSequence":
        idx = np.asarray(idx)
        return FrameSequence(
            self.frames[idx],
            [self.frame_labels[i] for i in idx],
            self.start_samples[idx],
            self.end_samples[idx],
            dict(self.meta),
        )


def normalize_db(values, db_floor: float, db_ceil: float) -> np.ndarray:
    if not db_ceil > db_floor:
        raise InvalidArgument("db_ceil must exceed db_floor")
    db = 20 * np.log10(np.asarray(values, dtype=np.float64) + EPS)
    return np.clip((db - db_floor) / (db_ceil - db_floor), 0.0, 1.0)


def resample_axis(a: np.ndarray, n: int, axis: int) -> np.ndarray:
    """Bin-mean down to ``n`` entries along ``axis`` (nearest-repeat when growing)."""
    size = a.shape[axis]
    if size == n:
        return a
    if size > n:
        edges = (np.arange(n + 1) * size) // n
        sums = np.add.reduceat(a, edges[:-1], axis=axis)
        shape = [1] * a.ndim
        shape[axis] = n
        return sums / np.diff(edges).reshape(shape)
    return np.take(a, (np.arange(n) * size) // n, axis=axis)


def _labels_for(spans, labels: LabelTrack | None) -> list:
    if labels is None:
        return [NORMAL] * len(spans)
    return [labels.label_for_span(a, b) for a, b in spans]


def spectrogram_to_frames(columns: SpectralMatrix, fp: FrameParams, labels: LabelTrack | None = None) -> FrameSequence:
    """Sliding windows of STFT columns; each frame has frequency on rows, time on columns.

    Magnitudes are bin-averaged to ``fp.height`` frequency rows before the dB
    mapping so narrowband energy survives the downsampling.
    """
    values = columns.values
    width = fp.columns_per_frame
    stride = fp.frame_stride_columns
    n_cols = values.shape[0]
    if n_cols < width:
        raise InvalidArgument(f"need at least {width} spectrogram columns, got {n_cols}")
    fft_size = int(columns.meta["fft_size"])
    hop = int(columns.meta["hop"])
    img = normalize_db(resample_axis(values, fp.height, axis=1), fp.db_floor, fp.db_ceil).T  # (freq, time)
    starts = np.arange(0, n_cols - width + 1, stride)
    frames = np.stack([resample_axis(img[:, s : s + width], fp.width, axis=1) for s in starts])
    spans = [(s * hop, (s + width - 1) * hop + fft_size) for s in starts]
    return FrameSequence(
        frames,
        _labels_for(spans, labels),
        [a for a, _ in spans],
        [b for _, b in spans],
        {"kind": "spectrogram", "frame_params": asdict(fp)},
    )


def scf_to_frames(
    matrices, fp: FrameParams, chunk_samples: int, labels: LabelTrack | None = None
) -> FrameSequence:
    """One frame per SCF of consecutive ``chunk_samples``-long IQ chunks (alpha on rows, f on columns)."""
    if len(matrices) == 0:
        raise InvalidArgument("no SCF matrices to frame")
    frames = []
    for m in matrices:
        v = resample_axis(resample_axis(m.values, fp.height, axis=0), fp.width, axis=1)
        frames.append(normalize_db(v, fp.db_floor, fp.db_ceil))
    spans = [(j * chunk_samples, (j + 1) * chunk_samples) for j in range(len(matrices))]
    return FrameSequence(
        np.stack(frames),
        _labels_for(spans, labels),
        [a for a, _ in spans],
        [b for _, b in spans],
        {"kind": "scf", "frame_params": asdict(fp), "chunk_samples": chunk_samples},
    )


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def save_dataset(fs: FrameSequence, path, extra_meta: dict | None = None) -> None:
    """Write ``frames/NNNNNN.png``, ``index.csv`` and ``meta.json`` under ``path``."""
    root = Path(path)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    checksums = {}
    rows = []
    for i, frame in enumerate(fs.frames):
        name = f"frames/{i:06d}.png"
        pixels = np.round(np.clip(frame, 0, 1) * 255).astype(np.uint8)
        # Fixed PNG settings keep files byte-identical across runs.
        Image.fromarray(pixels, mode="L").save(root / name, optimize=False, compress_level=6)
        checksums[name] = _sha256(root / name)
        rows.append((name, int(fs.start_samples[i]), int(fs.end_samples[i]), fs.frame_labels[i]))
    with open(root / "index.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "start_sample", "end_sample", "label"])
        w.writerows(rows)
    meta = {**fs.meta, **(extra_meta or {}), "num_frames": len(fs), "checksums": checksums}
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_dataset(path, verify: bool = True) -> FrameSequence:
    root = Path(path)
    index = root / "index.csv"
    if not index.exists():
        raise DatasetNotFound(f"no dataset index at {index}")
    try:
        meta = json.loads((root / "meta.json").read_text())
        with open(index, newline="") as fh:
            rows = list(csv.DictReader(fh))
        files = [r["file"] for r in rows]
        starts = [int(r["start_sample"]) for r in rows]
        ends = [int(r["end_sample"]) for r in rows]
        labels = [r["label"] for r in rows]
    except (OSError, KeyError, ValueError) as exc:
        raise DatasetError(f"malformed dataset at {root}: {exc}") from exc
    if len(rows) != meta.get("num_frames"):
        raise DatasetError(f"{index} lists {len(rows)} frames, meta says {meta.get('num_frames')}")
    frames = []
    for name in files:
        fpath = root / name
        if not fpath.exists():
            raise DatasetNotFound(f"missing frame {fpath}")
        if verify and meta.get("checksums", {}).get(name) != _sha256(fpath):
            raise ChecksumMismatch(f"checksum mismatch for {fpath}")
        with Image.open(fpath) as im:
            frames.append(np.asarray(im, dtype=np.float64) / 255.0)
    meta.pop("checksums", None)
    if not frames:
        raise DatasetError(f"dataset at {root} is empty")
    return FrameSequence(np.stack(frames), labels, starts, ends, meta)
