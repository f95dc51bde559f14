"""Baseband simulation of a small TDMA/BPSK network with injected anomalies.

Every source node transmits rectangular-pulse BPSK and owns every
``num_source_nodes``-th slot of a shared channel. The sink sees the TDMA
sum plus complex AWGN. Noise variance is pinned to 1.0 and the signal is
scaled to reach the requested SNR, so recordings at different SNRs share a
noise floor.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DatasetError, InvalidArgument

ANOMALY_KINDS = ("none", "chirp", "two_chirp", "hijack", "node_failure", "barrage", "sweep", "tone")
NORMAL = "normal"

# Relative tolerance when treating float products such as slot * fs as integers.
_INT_TOL = 1e-9


def _is_integer(x: float) -> bool:
    return abs(x - round(x)) <= _INT_TOL * max(1.0, abs(x))


@dataclass(frozen=True)
class NetworkConfig:
    sample_rate_hz: float = 500e3
    symbol_rate_sps: float = 62.5e3
    samples_per_symbol: int = 8
    slot_duration_s: float = 10e-3
    num_source_nodes: int = 2
    node_tx_gains: tuple = (1.0, 1.0)
    snr_db: float = 15.0

    def __post_init__(self):
        object.__setattr__(self, "node_tx_gains", tuple(float(g) for g in self.node_tx_gains))
        if self.sample_rate_hz <= 0 or self.symbol_rate_sps <= 0 or self.slot_duration_s <= 0:
            raise InvalidArgument("rates and slot duration must be positive")
        if int(self.samples_per_symbol) != self.samples_per_symbol or self.samples_per_symbol < 1:
            raise InvalidArgument("samples_per_symbol must be a positive integer")
        if not math.isclose(self.sample_rate_hz, self.symbol_rate_sps * self.samples_per_symbol, rel_tol=1e-12):
            raise InvalidArgument("sample_rate_hz must equal symbol_rate_sps * samples_per_symbol")
        if not _is_integer(self.slot_duration_s * self.sample_rate_hz):
            raise InvalidArgument("slot_duration_s * sample_rate_hz must be a whole number of samples")
        if self.num_source_nodes < 1:
            raise InvalidArgument("num_source_nodes must be >= 1")
        if len(self.node_tx_gains) != self.num_source_nodes:
            raise InvalidArgument("node_tx_gains needs one entry per source node")

    @property
    def slot_samples(self) -> int:
        return int(round(self.slot_duration_s * self.sample_rate_hz))

    def with_snr(self, snr_db: float) -> "NetworkConfig":
        return NetworkConfig(**{**asdict(self), "snr_db": snr_db})


@dataclass(frozen=True)
class AnomalySpec:
    """One anomalous event.

    ``victim_slot_index`` names the node whose TDMA slots are taken over
    (hijack) or silenced (node_failure). Frequencies are baseband offsets in
    Hz. ``power_db_rel_signal`` sets injected power relative to the mean
    active-slot power of the legitimate signal.
    """

    kind: str = "none"
    start_s: float = 0.0
    duration_s: float = 1.0
    power_db_rel_signal: float = 0.0
    f_start_hz: float = -100e3
    f_end_hz: float = 100e3
    sweep_period_s: float = 2e-3
    f_hz: float = 100e3
    victim_slot_index: int = 0
    f_low_hz: float = -200e3
    f_high_hz: float = 200e3
    sweep_jam_period_s: float = 20e-3

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise InvalidArgument(f"unknown anomaly kind {self.kind!r}")
        if self.start_s < 0 or self.duration_s <= 0:
            raise InvalidArgument("anomaly needs start_s >= 0 and duration_s > 0")
        if self.sweep_period_s <= 0 or self.sweep_jam_period_s <= 0:
            raise InvalidArgument("sweep periods must be positive")

    def validate_against(self, config: NetworkConfig, recording_s: float) -> None:
        if self.kind == "none":
            return
        if self.start_s + self.duration_s > recording_s * (1 + 1e-12):
            raise InvalidArgument(
                f"anomaly [{self.start_s}, {self.start_s + self.duration_s}) s exceeds recording length {recording_s} s"
            )
        nyq = config.sample_rate_hz / 2
        freqs = {
            "chirp": (self.f_start_hz, self.f_end_hz),
            "two_chirp": (self.f_start_hz, self.f_end_hz),
            "tone": (self.f_hz,),
            "sweep": (self.f_low_hz, self.f_high_hz),
        }.get(self.kind, ())
        if any(abs(f) > nyq for f in freqs):
            raise InvalidArgument(f"{self.kind} frequencies must lie within +/-{nyq} Hz")
        if self.kind in ("hijack", "node_failure") and not 0 <= self.victim_slot_index < config.num_source_nodes:
            raise InvalidArgument("victim_slot_index out of range")


@dataclass
class LabelTrack:
    """Ground truth as contiguous runs ``(start_sample, end_sample, kind)``."""

    runs: list = field(default_factory=list)

    def __post_init__(self):
        self.runs = [(int(a), int(b), str(k)) for a, b, k in self.runs]
        pos = 0
        for a, b, _ in self.runs:
            if a != pos or b <= a:
                raise InvalidArgument("label runs must be sorted, disjoint and tile [0, n)")
            pos = b

    @classmethod
    def normal(cls, n: int) -> "LabelTrack":
        return cls([(0, n, NORMAL)])

    @classmethod
    def with_event(cls, n: int, start: int, end: int, kind: str) -> "LabelTrack":
        runs = [(0, start, NORMAL), (start, end, kind), (end, n, NORMAL)]
        return cls([r for r in runs if r[1] > r[0]])

    @property
    def num_samples(self) -> int:
        return self.runs[-1][1] if self.runs else 0

    def anomalous_runs(self):
        return [r for r in self.runs if r[2] != NORMAL]

    def label_for_span(self, start: int, end: int) -> str:
        """Anomaly kind if any sample of ``[start, end)`` is anomalous, else normal."""
        for a, b, kind in self.runs:
            if kind != NORMAL and a < end and start < b:
                return kind
        return NORMAL

    def mask(self) -> np.ndarray:
        m = np.zeros(self.num_samples, dtype=bool)
        for a, b, _ in self.anomalous_runs():
            m[a:b] = True
        return m

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["start_sample", "end_sample", "kind"])
            w.writerows(self.runs)

    @classmethod
    def from_csv(cls, path) -> "LabelTrack":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([(r["start_sample"], r["end_sample"], r["kind"]) for r in rows])


@dataclass
class IQRecording:
    samples: np.ndarray
    sample_rate_hz: float
    labels: LabelTrack

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.labels.num_samples != len(self.samples):
            raise InvalidArgument("labels must cover exactly the sample count")
        if not np.all(np.isfinite(self.samples)):
            raise InvalidArgument("recording contains non-finite samples")

    def __len__(self):
        return len(self.samples)


def bpsk_modulate(bits, samples_per_symbol: int) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64).ravel()
    if bits.size == 0:
        raise InvalidArgument("bit sequence is empty")
    if samples_per_symbol < 1:
        raise InvalidArgument("samples_per_symbol must be positive")
    symbols = (1 - 2 * bits).astype(np.float64)
    return np.repeat(symbols, samples_per_symbol).astype(np.complex128)


def slot_owner(n: int, slot_samples: int, num_nodes: int) -> np.ndarray:
    """Index of the node owning each sample under round-robin TDMA."""
    return (np.arange(n) // slot_samples) % num_nodes


def apply_tdma(per_node_signals: Sequence[np.ndarray], config: NetworkConfig) -> np.ndarray:
    signals = [np.asarray(s, dtype=np.complex128) for s in per_node_signals]
    if len(signals) != config.num_source_nodes:
        raise InvalidArgument("one signal per source node required")
    n = len(signals[0])
    if any(len(s) != n for s in signals):
        raise InvalidArgument("node signals must have equal length")
    if n % config.slot_samples:
        raise InvalidArgument("slot length must divide the signal length")
    owner = slot_owner(n, config.slot_samples, config.num_source_nodes)
    out = np.zeros(n, dtype=np.complex128)
    for k, s in enumerate(signals):
        sel = owner == k
        out[sel] = s[sel]
    return out


def _complex_noise(rng: np.random.Generator, n: int, variance: float) -> np.ndarray:
    scale = math.sqrt(variance / 2)
    return scale * (rng.standard_normal(n) + 1j * rng.standard_normal(n))


def awgn(signal, snr_db: float, seed: int) -> np.ndarray:
    """Add circular complex Gaussian noise at ``snr_db`` over the active region.

    ``snr_db=math.inf`` disables noise and returns a copy of the input.
    """
    x = np.asarray(signal, dtype=np.complex128)
    if math.isinf(snr_db) and snr_db > 0:
        return x.copy()
    active = x[x != 0]
    if active.size == 0:
        raise InvalidArgument("SNR is undefined for an all-zero signal")
    p_sig = float(np.mean(np.abs(active) ** 2))
    noise_var = p_sig / 10 ** (snr_db / 10)
    return x + _complex_noise(np.random.default_rng(seed), len(x), noise_var)


def _sweep_phase(freq_hz: np.ndarray, fs: float) -> np.ndarray:
    # Phase advances by the instantaneous frequency of the preceding sample.
    return 2 * np.pi * np.concatenate(([0.0], np.cumsum(freq_hz[:-1]))) / fs


def anomaly_waveform(anomaly: AnomalySpec, n: int, fs: float, power: float, rng: np.random.Generator) -> np.ndarray:
    """Additive interference of ``n`` samples with mean power ``power``.

    Only meaningful for the additive kinds (chirp, two_chirp, barrage, sweep,
    tone); hijack and node_failure act on the TDMA traffic instead.
    """
    t = np.arange(n) / fs
    amp = math.sqrt(power)
    kind = anomaly.kind
    if kind == "tone":
        return amp * np.exp(2j * np.pi * anomaly.f_hz * t)
    if kind == "barrage":
        return _complex_noise(rng, n, power)
    if kind in ("chirp", "two_chirp"):
        frac = (t % anomaly.sweep_period_s) / anomaly.sweep_period_s
        f_up = anomaly.f_start_hz + (anomaly.f_end_hz - anomaly.f_start_hz) * frac
        up = np.exp(1j * _sweep_phase(f_up, fs))
        if kind == "chirp":
            return amp * up
        f_down = anomaly.f_end_hz + (anomaly.f_start_hz - anomaly.f_end_hz) * frac
        down = np.exp(1j * _sweep_phase(f_down, fs))
        # Two emitters share the injected power.
        return amp / math.sqrt(2) * (up + down)
    if kind == "sweep":
        period = anomaly.sweep_jam_period_s
        tri = 1 - np.abs(2 * ((t % period) / period) - 1)
        f = anomaly.f_low_hz + (anomaly.f_high_hz - anomaly.f_low_hz) * tri
        return amp * np.exp(1j * _sweep_phase(f, fs))
    raise InvalidArgument(f"{kind} is not an additive anomaly")


def generate_scenario(config: NetworkConfig, anomaly: AnomalySpec, duration_s: float, seed: int) -> IQRecording:
    if duration_s <= 0:
        raise InvalidArgument("duration_s must be positive")
    anomaly.validate_against(config, duration_s)
    fs = config.sample_rate_hz
    n = int(round(duration_s * fs))
    slot = config.slot_samples
    n_padded = -(-n // slot) * slot
    sps = config.samples_per_symbol
    n_sym = -(-n_padded // sps)

    bit_rng, hijack_rng, jam_rng, noise_rng = (
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4)
    )
    node_signals = [
        gain * bpsk_modulate(bit_rng.integers(0, 2, n_sym), sps)[:n_padded] for gain in config.node_tx_gains
    ]
    traffic = apply_tdma(node_signals, config)[:n]

    active = traffic[traffic != 0]
    p_active = float(np.mean(np.abs(active) ** 2))
    noiseless = math.isinf(config.snr_db) and config.snr_db > 0
    signal_power = 1.0 if noiseless else 10 ** (config.snr_db / 10)
    scale = math.sqrt(signal_power / p_active)
    x = traffic * scale

    if anomaly.kind == "none":
        labels = LabelTrack.normal(n)
    else:
        a = int(round(anomaly.start_s * fs))
        b = min(n, int(round((anomaly.start_s + anomaly.duration_s) * fs)))
        labels = LabelTrack.with_event(n, a, b, anomaly.kind)
        owner = slot_owner(n, slot, config.num_source_nodes)
        in_event = np.zeros(n, dtype=bool)
        in_event[a:b] = True
        victim = in_event & (owner == anomaly.victim_slot_index)
        if anomaly.kind == "node_failure":
            x[victim] = 0
        elif anomaly.kind == "hijack":
            gain = config.node_tx_gains[anomaly.victim_slot_index]
            rogue = gain * scale * bpsk_modulate(hijack_rng.integers(0, 2, n_sym), sps)[:n]
            x[victim] += rogue[victim]
        else:
            power = signal_power * 10 ** (anomaly.power_db_rel_signal / 10)
            x[a:b] += anomaly_waveform(anomaly, b - a, fs, power, jam_rng)

    if not noiseless:
        x = x + _complex_noise(noise_rng, n, 1.0)
    return IQRecording(x, fs, labels)


def config_hash(*objs) -> str:
    """Stable hex digest of dataclass/dict/primitive arguments."""
    payload = [asdict(o) if hasattr(o, "__dataclass_fields__") else o for o in objs]
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()


def write_iq(path, recording: IQRecording, *, seed: int, cfg_hash: str = "") -> None:
    """Write ``path`` (raw interleaved float32 LE), ``path.json`` and ``path.labels.csv``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = np.empty(2 * len(recording), dtype="<f4")
    buf[0::2] = recording.samples.real
    buf[1::2] = recording.samples.imag
    buf.tofile(path)
    meta = {
        "sample_rate_hz": recording.sample_rate_hz,
        "seed": int(seed),
        "config_hash": cfg_hash,
        "num_samples": len(recording),
    }
    Path(f"{path}.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    recording.labels.to_csv(f"{path}.labels.csv")


def read_iq(path) -> IQRecording:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    meta = json.loads(Path(f"{path}.json").read_text())
    raw = np.fromfile(path, dtype="<f4")
    if raw.size == 0:
        raise DatasetError(f"{path}: empty recording")
    if raw.size % 2:
        raise DatasetError(f"{path}: odd number of float32 values")
    samples = raw[0::2].astype(np.float64) + 1j * raw[1::2].astype(np.float64)
    if len(samples) != meta["num_samples"]:
        raise DatasetError(f"{path}: sample count disagrees with sidecar")
    return IQRecording(samples, float(meta["sample_rate_hz"]), LabelTrack.from_csv(f"{path}.labels.csv"))
