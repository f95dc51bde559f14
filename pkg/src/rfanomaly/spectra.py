"""Spectrogram and spectral correlation function (FFT accumulation method).

The FAM grid
------------
For first-FFT size ``L``, second-FFT size ``P`` and block hop ``h`` the
estimate is laid out on ``2*P*h`` cycle-frequency rows spanning
``[-fs, fs)`` with spacing ``fs / (P*h)`` and ``L`` spectral-frequency
columns spanning ``[-fs/2, fs/2)`` with spacing ``fs / L``. The default hop
is ``L/4``; a non-overlapping hop (``h = L``) leaves cycle-leakage images at
multiples of ``fs/L`` from the window's sidelobes.

Channel pair ``(k, l)`` (centered channel indices) contributes the
second-FFT bins ``|q| <= Q/2`` with ``Q = P*h/L`` at

    alpha = (k - l) * fs/L + q * fs/(P*h)
    f     = (k + l) * fs/(2L)

and lands in column ``floor((k + l) / 2) + L/2`` (the two channel-sum
parities interleave, so every column gets every alpha block).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import get_window

from .errors import InvalidArgument
from .sigsim import IQRecording, LabelTrack

WINDOWS = ("hann", "hamming", "rect")


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def make_window(name: str, n: int) -> np.ndarray:
    if name not in WINDOWS:
        raise InvalidArgument(f"unknown window {name!r}")
    if name == "rect":
        return np.ones(n)
    # Periodic (DFT-even) windows, as used for spectral analysis.
    return get_window(name, n, fftbins=True)


@dataclass(frozen=True)
class StftParams:
    fft_size: int = 256
    hop: int = 256
    window: str = "hann"

    def __post_init__(self):
        if not _is_pow2(self.fft_size):
            raise InvalidArgument("fft_size must be a power of two")
        if not 1 <= self.hop <= self.fft_size:
            raise InvalidArgument("hop must satisfy 1 <= hop <= fft_size")
        make_window(self.window, 1)


@dataclass(frozen=True)
class FamParams:
    first_fft_size_L: int = 64
    second_fft_size_P: int = 64
    hop: int | None = None
    window: str = "hamming"

    def __post_init__(self):
        L, P = self.first_fft_size_L, self.second_fft_size_P
        if not (_is_pow2(L) and _is_pow2(P)) or L < 2:
            raise InvalidArgument("L and P must be powers of two (L >= 2)")
        if self.hop is None:
            object.__setattr__(self, "hop", L // 4 if L >= 4 else 1)
        if self.hop < 1 or L % self.hop:
            raise InvalidArgument("hop must divide L")
        if P * self.hop < 2 * L:
            raise InvalidArgument("P * hop must be at least 2 * L")
        make_window(self.window, 1)

    @property
    def span(self) -> int:
        """Samples consumed by one estimate."""
        return self.first_fft_size_L + (self.second_fft_size_P - 1) * self.hop

    @property
    def kept_bins(self) -> int:
        return self.second_fft_size_P * self.hop // self.first_fft_size_L

    def alpha_resolution(self, fs: float) -> float:
        return fs / (self.second_fft_size_P * self.hop)

    def shape(self) -> tuple:
        return (2 * self.second_fft_size_P * self.hop, self.first_fft_size_L)


@dataclass
class SpectralMatrix:
    """Nonnegative magnitude surface.

    ``values[i, j]`` sits at ``axis0[i]`` (seconds for a spectrogram, Hz of
    cycle frequency for an SCF) and frequency ``axis1[j]`` in Hz.
    """

    values: np.ndarray
    axis0_kind: str
    axis0: np.ndarray
    axis1: np.ndarray
    provenance: str
    sample_rate_hz: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape != (len(self.axis0), len(self.axis1)):
            raise InvalidArgument("axis lengths do not match values")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise InvalidArgument("spectral magnitudes must be finite and nonnegative")


def _samples(iq) -> tuple:
    if hasattr(iq, "samples"):
        return np.asarray(iq.samples, dtype=np.complex128), float(iq.sample_rate_hz)
    raise InvalidArgument("expected an IQRecording-like object with samples and sample_rate_hz")


def stft_spectrogram(iq, p: StftParams) -> SpectralMatrix:
    x, fs = _samples(iq)
    n = len(x)
    if n < p.fft_size:
        raise InvalidArgument("recording shorter than one STFT window")
    cols = (n - p.fft_size) // p.hop + 1
    frames = np.lib.stride_tricks.sliding_window_view(x, p.fft_size)[:: p.hop][:cols]
    spec = np.fft.fftshift(np.fft.fft(frames * make_window(p.window, p.fft_size), axis=1), axes=1)
    t = (np.arange(cols) * p.hop) / fs
    f = (np.arange(p.fft_size) - p.fft_size // 2) * fs / p.fft_size
    return SpectralMatrix(
        np.abs(spec), "time", t, f, "spectrogram", fs, {"fft_size": p.fft_size, "hop": p.hop}
    )


def _fam_layout(p: FamParams):
    """Row/column index of every (k, l, q) product, plus its exact (f, alpha) in units of fs."""
    L, P, h = p.first_fft_size_L, p.second_fft_size_P, p.hop
    Q = p.kept_bins
    k = np.arange(L) - L // 2
    q = np.arange(-Q // 2, Q // 2 + 1)
    K, Lc, Qg = np.meshgrid(k, k, q, indexing="ij")
    rows = (K - Lc) * Q + Qg + P * h
    cols = np.floor_divide(K + Lc, 2) + L // 2
    f = (K + Lc) / (2 * L)
    alpha = (K - Lc) / L + Qg / (P * h)
    return rows, cols, f, alpha, Qg % P


def fam_cell(k: int, l: int, q: int, p: FamParams, fs: float) -> tuple:
    """``(row, col, f_hz, alpha_hz)`` of channel pair ``(k, l)`` at second-FFT bin ``q``."""
    L, Q = p.first_fft_size_L, p.kept_bins
    h = p.hop
    row = (k - l) * Q + q + p.second_fft_size_P * h
    col = (k + l) // 2 + L // 2
    return row, col, (k + l) * fs / (2 * L), (k - l) * fs / L + q * fs / (p.second_fft_size_P * h)


def fam_channelize(x: np.ndarray, p: FamParams) -> np.ndarray:
    """Windowed first FFT of each block, phase-referenced to absolute time.

    Returns a ``(P, L)`` complex array, columns ordered by centered channel
    index ``-L/2 .. L/2-1``.
    """
    L, P, h = p.first_fft_size_L, p.second_fft_size_P, p.hop
    blocks = np.lib.stride_tricks.sliding_window_view(x[: p.span], L)[::h][:P]
    X = np.fft.fftshift(np.fft.fft(blocks * make_window(p.window, L), axis=1), axes=1)
    k = np.arange(L) - L // 2
    r = np.arange(P)
    return X * np.exp(-2j * np.pi * np.outer(r * h, k) / L)


def fam_scf(iq, p: FamParams) -> SpectralMatrix:
    x, fs = _samples(iq)
    if len(x) < p.span:
        raise InvalidArgument(f"FAM needs at least {p.span} samples")
    L, P, h = p.first_fft_size_L, p.second_fft_size_P, p.hop
    X = fam_channelize(x, p)
    # products[r, k, l] = X_k(r) X_l(r)^*, then the P-point second FFT over r.
    prod = X[:, :, None] * np.conj(X[:, None, :])
    Z = np.fft.fft(prod, axis=0) / (P * L)
    rows, cols, f, alpha, qbin = _fam_layout(p)
    K, Lc = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
    mags = np.abs(Z[qbin, K[..., None], Lc[..., None]])
    outside = np.abs(f) + np.abs(alpha) / 2 > 0.5 + 1e-12
    mags[outside] = 0.0

    n_rows, n_cols = p.shape()
    flat = (rows * n_cols + cols).ravel()
    total = np.bincount(flat, weights=mags.ravel(), minlength=n_rows * n_cols)
    count = np.bincount(flat, minlength=n_rows * n_cols)
    values = np.divide(total, count, out=np.zeros_like(total), where=count > 0).reshape(n_rows, n_cols)

    alpha_axis = (np.arange(n_rows) - P * h) * fs / (P * h)
    f_axis = (np.arange(n_cols) - L // 2) * fs / L
    return SpectralMatrix(values, "cycle_frequency", alpha_axis, f_axis, "scf", fs, {"L": L, "P": P, "hop": h})


def direct_scf(iq, f: float, alpha: float, window_len: int, *, hop: int = 1, window: str = "hamming") -> complex:
    """Time-smoothed cyclic periodogram evaluated by direct summation.

    Spectra are evaluated at exactly ``f +/- alpha/2`` and carry absolute-time
    phase. ``hop=1`` averages over every window position.
    """
    x, fs = _samples(iq)
    n = len(x)
    if not 1 <= window_len <= n:
        raise InvalidArgument("window_len must lie in [1, len(recording)]")
    if abs(f) + abs(alpha) / 2 > fs / 2 * (1 + 1e-12):
        raise InvalidArgument("(f, alpha) lies outside the SCF support")
    w = make_window(window, window_len)
    t = np.arange(n)
    up = x * np.exp(-2j * np.pi * (f + alpha / 2) * t / fs)
    dn = x * np.exp(-2j * np.pi * (f - alpha / 2) * t / fs)
    seg = np.lib.stride_tricks.sliding_window_view
    Xu = seg(up, window_len)[::hop] @ w
    Xd = seg(dn, window_len)[::hop] @ w
    return complex(np.mean(Xu * np.conj(Xd)) / window_len)


def fam_scf_chunks(iq, p: FamParams, chunk_samples: int) -> list:
    """One SCF per consecutive non-overlapping chunk; the estimate uses the chunk's first ``p.span`` samples."""
    x, fs = _samples(iq)
    if chunk_samples < p.span:
        raise InvalidArgument(f"chunk_samples must be >= {p.span}")
    out = []
    for j in range(len(x) // chunk_samples):
        seg = x[j * chunk_samples : j * chunk_samples + p.span]
        out.append(fam_scf(IQRecording(seg, fs, LabelTrack.normal(len(seg))), p))
    return out
