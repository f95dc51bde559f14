"""Run configuration: YAML text with unit-suffixed keys, validated with line numbers.

Every section maps onto one module's parameter dataclass; unknown keys and
invalid values raise :class:`ConfigError` carrying the 1-based line of the
offending key.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError, InvalidArgument
from .framing import FrameParams
from .prednet import ModelConfig, TrainParams
from .scorer import GridSpec
from .sigsim import AnomalySpec, NetworkConfig
from .spectra import FamParams, StftParams

DETECTORS = ("spectrogram", "scf")


@dataclass(frozen=True)
class RecordingParams:
    duration_s: float = 10.0
    train_duration_s: float = 10.0
    calibration_duration_s: float = 5.0
    recordings_per_scenario: int = 1

    def __post_init__(self):
        if min(self.duration_s, self.train_duration_s, self.calibration_duration_s) <= 0:
            raise InvalidArgument("recording durations must be positive")
        if self.recordings_per_scenario < 1:
            raise InvalidArgument("recordings_per_scenario must be >= 1")


@dataclass(frozen=True)
class ScfTransform:
    fam: FamParams = FamParams()
    chunk_samples: int = 5000

    def __post_init__(self):
        if self.chunk_samples < self.fam.span:
            raise InvalidArgument(f"chunk_samples must be >= FAM span {self.fam.span}")


@dataclass(frozen=True)
class ScorerParams:
    grid: GridSpec = GridSpec()
    slope_window_W: int = 5
    num_thresholds: int = 201
    target_false_alarm_rate: float = 0.15
    grace_G: int | None = None  # defaults to slope_window_W

    def __post_init__(self):
        if self.slope_window_W < 2:
            raise InvalidArgument("slope_window_W must be >= 2")
        if self.num_thresholds < 2:
            raise InvalidArgument("num_thresholds must be >= 2")
        if not 0 < self.target_false_alarm_rate < 1:
            raise InvalidArgument("target_false_alarm_rate must lie in (0, 1)")
        if self.grace_G is None:
            object.__setattr__(self, "grace_G", self.slope_window_W)
        if self.grace_G < 0:
            raise InvalidArgument("grace_G must be >= 0")


@dataclass(frozen=True)
class DetectorParams:
    frames: FrameParams
    train: TrainParams


@dataclass(frozen=True)
class RunConfig:
    network: NetworkConfig = NetworkConfig()
    snr_tiers_db: dict = field(default_factory=lambda: {"high": 15.0, "medium": 8.0, "low": 5.0})
    recording: RecordingParams = RecordingParams()
    scenarios: tuple = ()
    stft: StftParams = StftParams()
    scf: ScfTransform = ScfTransform()
    model: ModelConfig = ModelConfig()
    detectors: dict = field(default_factory=dict)  # name -> DetectorParams
    scorer: ScorerParams = ScorerParams()
    output_dir: str = "runs/default"
    master_seed: int = 0
    source_lines: dict = field(default_factory=dict, compare=False, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("source_lines")
        return d

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, default=str).encode()).hexdigest()

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "RunConfig":
        changes = {}
        if seed is not None:
            changes["master_seed"] = int(seed)
        if out is not None:
            changes["output_dir"] = str(out)
        return dataclasses.replace(self, **changes)


def stage_seed(master_seed: int, stage: str) -> int:
    """``int(sha256("<master_seed>:<stage>")[:16], 16) >> 1`` (fits an int64)."""
    digest = hashlib.sha256(f"{int(master_seed)}:{stage}".encode()).hexdigest()
    return int(digest[:16], 16) >> 1


# ---------------------------------------------------------------- parsing


def _line_table(node, path=(), table=None) -> dict:
    """Map key paths to 1-based source lines."""
    table = {} if table is None else table
    table.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            sub = path + (k.value,)
            table[sub] = k.start_mark.line + 1
            _line_table(v, sub, table)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            table[path + (i,)] = v.start_mark.line + 1
            _line_table(v, path + (i,), table)
    return table


class _Ctx:
    def __init__(self, lines: dict):
        self.lines = lines

    def line(self, path) -> int | None:
        path = tuple(path)
        while path and path not in self.lines:
            path = path[:-1]
        return self.lines.get(path)

    def fail(self, path, msg):
        where = ".".join(str(p) for p in path) or "<root>"
        raise ConfigError(f"{where}: {msg}", self.line(path))

    def mapping(self, value, path) -> dict:
        if value is None:
            return {}
        if not isinstance(value, dict):
            self.fail(path, "expected a mapping")
        return value

    def build(self, cls, value, path, **given):
        """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
        value = self.mapping(value, path)
        names = {f.name for f in dataclasses.fields(cls)}
        for k in value:
            if k not in names:
                self.fail(path + (k,), f"unknown key for {cls.__name__} (allowed: {', '.join(sorted(names))})")
        kwargs = {**{k: _tuplify(v) for k, v in value.items()}, **given}
        try:
            return cls(**kwargs)
        except (InvalidArgument, TypeError, ValueError) as exc:
            bad = _first_key_in(str(exc), value)
            self.fail(path + ((bad,) if bad else ()), str(exc))


def _tuplify(v):
    return tuple(v) if isinstance(v, list) else v


def _first_key_in(message: str, value: dict):
    for k in value:
        if str(k) in message:
            return k
    return None


_TOP_KEYS = {
    "network", "snr_tiers_db", "recording", "scenarios", "stft", "scf", "model",
    "detectors", "scorer", "output_dir", "master_seed",
}


def parse_config(text: str) -> RunConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        data = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        line = exc.problem_mark.line + 1 if exc.problem_mark else None
        raise ConfigError(f"YAML syntax error: {exc.problem}", line) from exc
    if node is None:
        raise ConfigError("configuration is empty", 1)
    ctx = _Ctx(_line_table(node))
    data = ctx.mapping(data, ())
    for k in data:
        if k not in _TOP_KEYS:
            ctx.fail((k,), f"unknown top-level key (allowed: {', '.join(sorted(_TOP_KEYS))})")

    network = ctx.build(NetworkConfig, data.get("network"), ("network",))

    tiers = ctx.mapping(data.get("snr_tiers_db", {"high": 15.0, "medium": 8.0, "low": 5.0}), ("snr_tiers_db",))
    if not tiers:
        ctx.fail(("snr_tiers_db",), "need at least one SNR tier")
    for name, v in tiers.items():
        if not isinstance(v, (int, float)) or isinstance(v, bool):
            ctx.fail(("snr_tiers_db", name), "SNR must be a number in dB")
    tiers = {str(k): float(v) for k, v in tiers.items()}

    recording = ctx.build(RecordingParams, data.get("recording"), ("recording",))

    raw_sc = data.get("scenarios", [])
    if not isinstance(raw_sc, list):
        ctx.fail(("scenarios",), "expected a list of anomaly scenarios")
    scenarios = []
    for i, s in enumerate(raw_sc):
        spec = ctx.build(AnomalySpec, s, ("scenarios", i))
        if spec.kind == "none":
            ctx.fail(("scenarios", i, "kind"), "scenario kind 'none' is implicit (normal recordings)")
        try:
            spec.validate_against(network, recording.duration_s)
        except InvalidArgument as exc:
            ctx.fail(("scenarios", i), str(exc))
        scenarios.append(spec)

    stft = ctx.build(StftParams, data.get("stft"), ("stft",))

    scf_raw = dict(ctx.mapping(data.get("scf"), ("scf",)))
    chunk = scf_raw.pop("chunk_samples", ScfTransform.chunk_samples)
    fam = ctx.build(FamParams, scf_raw, ("scf",))
    try:
        scf = ScfTransform(fam, int(chunk))
    except (InvalidArgument, TypeError, ValueError) as exc:
        ctx.fail(("scf", "chunk_samples"), str(exc))

    model = ctx.build(ModelConfig, data.get("model"), ("model",))

    det_raw = ctx.mapping(data.get("detectors"), ("detectors",))
    detectors = {}
    for name in DETECTORS:
        d = ctx.mapping(det_raw.get(name), ("detectors", name))
        for k in d:
            if k not in ("frames", "train"):
                ctx.fail(("detectors", name, k), "unknown key (allowed: frames, train)")
        frames = ctx.build(FrameParams, d.get("frames"), ("detectors", name, "frames"))
        default_epochs = 20 if name == "spectrogram" else 40
        train_raw = dict(ctx.mapping(d.get("train"), ("detectors", name, "train")))
        train_raw.setdefault("epochs", default_epochs)
        train = ctx.build(TrainParams, train_raw, ("detectors", name, "train"))
        div = 2 ** (model.num_levels - 1)
        if frames.height % div or frames.width % div:
            ctx.fail(("detectors", name, "frames"), f"frame size must be divisible by {div}")
        detectors[name] = DetectorParams(frames, train)
    for k in det_raw:
        if k not in DETECTORS:
            ctx.fail(("detectors", k), f"unknown detector (allowed: {', '.join(DETECTORS)})")

    sc_raw = dict(ctx.mapping(data.get("scorer"), ("scorer",)))
    grid_raw = {"m": sc_raw.pop("grid_m", 8), "n": sc_raw.pop("grid_n", 8)}
    grid = ctx.build(GridSpec, grid_raw, ("scorer",))
    scorer = ctx.build(ScorerParams, sc_raw, ("scorer",), grid=grid)
    for name, det in detectors.items():
        try:
            grid.check(det.frames.height, det.frames.width)
        except InvalidArgument as exc:
            ctx.fail(("scorer", "grid_m"), f"{name}: {exc}")

    seed = data.get("master_seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        ctx.fail(("master_seed",), "master_seed must be an integer")
    out = data.get("output_dir", "runs/default")
    if not isinstance(out, str):
        ctx.fail(("output_dir",), "output_dir must be a string path")

    return RunConfig(
        network, tiers, recording, tuple(scenarios), stft, scf, model, detectors, scorer, out, seed, ctx.lines
    )


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    return parse_config(text)
