"""File-based pipeline stages: simulate, transform, train, detect, evaluate.

Output layout under ``RunConfig.output_dir``::

    manifest.json
    recordings/<tier>/<name>.iq (+ .json, .labels.csv)
    datasets/<detector>/<tier>/<name>/
    models/<detector>/model.ckpt, loss.csv
    traces/<detector>/<tier>/<name>.csv, stats.json
    eval/<detector>/roc_<tier>.csv, summary.csv

Each stage stores a content key (hash of its parameters and input files) in
a ``.stage.json`` next to its outputs and is skipped when the key matches.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import evalharness as ev
from . import scorer as sc
from .config import DETECTORS, RunConfig, stage_seed
from .errors import DatasetNotFound, InvalidArgument, NumericalFailure
from .framing import FrameSequence, load_dataset, save_dataset, scf_to_frames, spectrogram_to_frames
from .prednet import PredictiveModel, load_checkpoint, save_checkpoint, train, windowed_rollout
from .sigsim import AnomalySpec, config_hash, generate_scenario, read_iq, write_iq
from .spectra import fam_scf_chunks, stft_spectrogram

log = logging.getLogger(__name__)

RULES = {"spectrogram": "slope", "scf": "level"}


# ---------------------------------------------------------------- bookkeeping


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _hash_json(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def _tree_hashes(root: Path, base: Path) -> dict:
    return {
        str(p.relative_to(base)): sha256_file(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.name != ".stage.json"
    }


def _dataset_hashes(root: Path, base: Path) -> dict:
    """One digest per dataset directory, over its files' names and hashes."""
    out = {}
    for meta in sorted(root.rglob("meta.json")):
        d = meta.parent
        lines = "".join(f"{k}:{v}\n" for k, v in _tree_hashes(d, d).items())
        out[str(d.relative_to(base))] = hashlib.sha256(lines.encode()).hexdigest()
    return out


class Run:
    """Paths, seeds and manifest for one configured run."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.output_dir)
        self.manifest_path = self.root / "manifest.json"

    def seed(self, stage: str) -> int:
        return stage_seed(self.cfg.master_seed, stage)

    def _load_manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text())
        return {}

    def record(self, stage: str, entry: dict, seeds: dict) -> None:
        m = self._load_manifest()
        m["config_hash"] = self.cfg.hash()
        m["master_seed"] = self.cfg.master_seed
        m.setdefault("stage_seeds", {}).update(seeds)
        m.setdefault("stages", {})[stage] = entry
        self.root.mkdir(parents=True, exist_ok=True)
        self.manifest_path.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")

    def cached(self, out_dir: Path, key: str) -> bool:
        marker = out_dir / ".stage.json"
        if not marker.exists():
            return False
        try:
            return json.loads(marker.read_text()).get("key") == key
        except json.JSONDecodeError:
            return False

    @staticmethod
    def mark(out_dir: Path, key: str) -> None:
        (out_dir / ".stage.json").write_text(json.dumps({"key": key}) + "\n")

    # recordings -------------------------------------------------------
    def recording_plan(self) -> list:
        """``(tier, name, role, AnomalySpec, duration_s)`` for every recording."""
        cfg, rp = self.cfg, self.cfg.recording
        plan = []
        for tier in cfg.snr_tiers_db:
            plan.append((tier, "train", "train", AnomalySpec(), rp.train_duration_s))
            plan.append((tier, "calibration", "calibration", AnomalySpec(), rp.calibration_duration_s))
            for i, a in enumerate(cfg.scenarios):
                for r in range(rp.recordings_per_scenario):
                    plan.append((tier, f"s{i:02d}_{a.kind}_r{r}", "test", a, rp.duration_s))
        return plan

    def iq_path(self, tier: str, name: str) -> Path:
        return self.root / "recordings" / tier / f"{name}.iq"

    def dataset_path(self, det: str, tier: str, name: str) -> Path:
        return self.root / "datasets" / det / tier / name

    def trace_path(self, det: str, tier: str, name: str) -> Path:
        return self.root / "traces" / det / tier / f"{name}.csv"


def _check_detector(det: str) -> None:
    if det not in DETECTORS:
        raise InvalidArgument(f"unknown detector {det!r} (expected one of {DETECTORS})")


# ---------------------------------------------------------------- stages


def simulate(cfg: RunConfig) -> Path:
    run = Run(cfg)
    out = run.root / "recordings"
    plan = run.recording_plan()
    key = _hash_json(
        {"network": asdict(cfg.network), "tiers": cfg.snr_tiers_db, "plan": [(t, n, r, asdict(a), d) for t, n, r, a, d in plan],
         "master_seed": cfg.master_seed}
    )
    seeds = {f"simulate/{t}/{n}": run.seed(f"simulate/{t}/{n}") for t, n, *_ in plan}
    if run.cached(out, key) and all(run.iq_path(t, n).exists() for t, n, *_ in plan):
        log.info("simulate: cached (%s)", out)
    else:
        if not out.exists():
            log.info("creating output directory %s", out)
        out.mkdir(parents=True, exist_ok=True)
        for tier, name, role, anomaly, dur in plan:
            seed = seeds[f"simulate/{tier}/{name}"]
            net = cfg.network.with_snr(cfg.snr_tiers_db[tier])
            rec = generate_scenario(net, anomaly, dur, seed)
            write_iq(run.iq_path(tier, name), rec, seed=seed, cfg_hash=config_hash(net, anomaly))
            log.info("simulate: %s/%s (%s, %d samples)", tier, name, role, len(rec))
        run.mark(out, key)
    run.record(
        "simulate",
        {"key": key, "outputs": _tree_hashes(out, run.root),
         "recordings": [{"tier": t, "name": n, "role": r, "kind": a.kind} for t, n, r, a, _ in plan]},
        seeds,
    )
    return out


def transform_recording(rec, cfg: RunConfig, det: str) -> FrameSequence:
    params = cfg.detectors[det].frames
    if len(rec) == 0:
        raise InvalidArgument("recording is empty")
    if det == "spectrogram":
        return spectrogram_to_frames(stft_spectrogram(rec, cfg.stft), params, rec.labels)
    mats = fam_scf_chunks(rec, cfg.scf.fam, cfg.scf.chunk_samples)
    if not mats:
        raise InvalidArgument("recording shorter than one SCF chunk")
    return scf_to_frames(mats, params, cfg.scf.chunk_samples, rec.labels)


def transform(cfg: RunConfig, det: str) -> Path:
    _check_detector(det)
    run = Run(cfg)
    out = run.root / "datasets" / det
    plan = run.recording_plan()
    inputs = {}
    for t, n, *_ in plan:
        p = run.iq_path(t, n)
        if not p.exists():
            raise DatasetNotFound(f"missing recording {p}; run the simulate stage first")
        inputs[str(p.relative_to(run.root))] = sha256_file(p)
    tparams = asdict(cfg.stft) if det == "spectrogram" else asdict(cfg.scf)
    key = _hash_json({"inputs": inputs, "transform": tparams, "frames": asdict(cfg.detectors[det].frames)})
    if run.cached(out, key):
        log.info("transform/%s: cached", det)
    else:
        out.mkdir(parents=True, exist_ok=True)
        for tier, name, role, *_ in plan:
            fs = transform_recording(read_iq(run.iq_path(tier, name)), cfg, det)
            save_dataset(fs, run.dataset_path(det, tier, name), {"role": role, "tier": tier, "recording": name})
            log.info("transform/%s: %s/%s -> %d frames", det, tier, name, len(fs))
        run.mark(out, key)
    run.record(f"transform/{det}", {"key": key, "inputs": inputs, "outputs": _dataset_hashes(out, run.root)}, {})
    return out


def _load_role(run: Run, det: str, role: str, tier: str | None = None) -> list:
    out = []
    for t, n, r, *_ in run.recording_plan():
        if r == role and (tier is None or t == tier):
            out.append((t, n, load_dataset(run.dataset_path(det, t, n))))
    return out


def train_stage(cfg: RunConfig, det: str) -> Path:
    _check_detector(det)
    run = Run(cfg)
    out = run.root / "models" / det
    data = _load_role(run, det, "train")
    inputs = _dataset_hashes(run.root / "datasets" / det, run.root)
    inputs = {k: v for k, v in inputs.items() if k.endswith("/train")}
    dp = cfg.detectors[det]
    seeds = {f"train/{det}/init": run.seed(f"train/{det}/init"), f"train/{det}/shuffle": run.seed(f"train/{det}/shuffle")}
    key = _hash_json({"inputs": inputs, "model": asdict(cfg.model), "train": asdict(dp.train), "seeds": seeds})
    if run.cached(out, key) and (out / "model.ckpt").exists():
        log.info("train/%s: cached", det)
    else:
        out.mkdir(parents=True, exist_ok=True)
        for t, n, fs in data:
            if fs.anomalous.any():
                raise InvalidArgument(f"training dataset {t}/{n} contains anomaly-labelled frames")
        model = PredictiveModel.init(cfg.model, seed=seeds[f"train/{det}/init"])
        tp = type(dp.train)(**{**asdict(dp.train), "seed": seeds[f"train/{det}/shuffle"]})
        model, history = train(model, [fs for _, _, fs in data], tp)
        save_checkpoint(model, out / "model.ckpt", meta={"detector": det, "dataset_hashes": inputs})
        with open(out / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"])
            w.writerows((i, repr(v)) for i, v in enumerate(history))
        run.mark(out, key)
    run.record(f"train/{det}", {"key": key, "inputs": inputs, "outputs": _tree_hashes(out, run.root)}, seeds)
    return out


def predict_sequences(model: PredictiveModel, seqs: list, window: int) -> list:
    """One-step predictions for each FrameSequence with contexts bounded by ``window`` frames."""
    preds = []
    for s in seqs:
        if len(s) < 2:
            raise InvalidArgument("sequences need >= 2 frames")
        out = windowed_rollout(model, s.frames.astype(model.dtype), window)
        if not np.all(np.isfinite(out)):
            raise NumericalFailure("non-finite prediction")
        preds.append(out)
    return preds


def detect(cfg: RunConfig, det: str, checkpoint=None) -> Path:
    _check_detector(det)
    run = Run(cfg)
    out = run.root / "traces" / det
    ckpt = Path(checkpoint) if checkpoint else run.root / "models" / det / "model.ckpt"
    if not ckpt.exists():
        raise DatasetNotFound(f"missing checkpoint {ckpt}; run the train stage first")
    inputs = _dataset_hashes(run.root / "datasets" / det, run.root)
    inputs = {k: v for k, v in inputs.items() if not k.endswith("/train")}
    inputs[str(ckpt)] = sha256_file(ckpt)
    scp = cfg.scorer
    window = cfg.detectors[det].train.sequence_length
    key = _hash_json({"inputs": inputs, "scorer": asdict(scp), "context_window": window})
    if run.cached(out, key):
        log.info("detect/%s: cached", det)
        run.record(f"detect/{det}", {"key": key, "inputs": inputs, "outputs": _tree_hashes(out, run.root)}, {})
        return out
    model = load_checkpoint(ckpt)
    out.mkdir(parents=True, exist_ok=True)
    target = scp.target_false_alarm_rate
    for tier in cfg.snr_tiers_db:
        calib = _load_role(run, det, "calibration", tier)
        tests = _load_role(run, det, "test", tier)
        for _, n, fs in calib + tests:
            H, W = fs.frames.shape[1:]
            if (H, W) != (cfg.detectors[det].frames.height, cfg.detectors[det].frames.width):
                raise InvalidArgument(f"dataset {tier}/{n} has {H}x{W} frames, model expects the configured size")
        seqs = [fs for _, _, fs in calib + tests]
        preds = predict_sequences(model, seqs, window)
        calib_err = [sc.grid_mae(p[1:], fs.frames[1:], scp.grid) for p, (_, _, fs) in zip(preds, calib)]
        stats = sc.fit_error_stats(np.concatenate(calib_err))
        calib_scores = [np.atleast_1d(sc.frame_score(e, stats)) for e in calib_err]
        calib_slopes = [sc.slope_series(s, scp.slope_window_W) for s in calib_scores]
        thresholds = {
            "level": float(np.quantile(np.concatenate(calib_scores), 1 - target)),
            "slope": float(np.nanquantile(np.concatenate(calib_slopes), 1 - target)),
        }
        tier_dir = out / tier
        tier_dir.mkdir(parents=True, exist_ok=True)
        (tier_dir / "stats.json").write_text(
            json.dumps({"stats": stats.to_dict(), "thresholds": thresholds, "slope_window_W": scp.slope_window_W},
                       indent=2, sort_keys=True) + "\n"
        )
        for p, (_, name, fs) in zip(preds[len(calib):], tests):
            scores = sc.score_sequence(p, fs.frames, stats, scp.grid)
            if not np.all(np.isfinite(scores)):
                raise NumericalFailure(f"non-finite score in {tier}/{name}")
            trace = sc.make_trace(scores, fs)
            slope = sc.slope_series(trace, scp.slope_window_W)
            level_flag = sc.level_detector(trace, thresholds["level"])
            slope_flag = sc.slope_detector(trace, scp.slope_window_W, thresholds["slope"])
            trace.to_csv(
                run.trace_path(det, tier, name),
                {"slope": slope, "level_flag": level_flag, "slope_flag": slope_flag,
                 "flag": slope_flag if RULES[det] == "slope" else level_flag},
            )
        log.info("detect/%s: %s done (%d test traces)", det, tier, len(tests))
    run.mark(out, key)
    run.record(f"detect/{det}", {"key": key, "inputs": inputs, "outputs": _tree_hashes(out, run.root)}, {})
    return out


def tier_recordings(run: Run, det: str, tier: str) -> list:
    """Score series for the evaluation sweep: NLL for the level rule, LS slope for the slope rule."""
    recs = []
    for t, n, role, a, _ in run.recording_plan():
        if role != "test" or t != tier:
            continue
        path = run.trace_path(det, t, n)
        if not path.exists():
            raise DatasetNotFound(f"missing score trace {path}; run the detect stage first")
        trace, extra = sc.read_trace_csv(path)
        series = extra["slope"] if RULES[det] == "slope" else trace.scores
        recs.append({"name": n, "kind": a.kind, "scores": series, "labels": trace.labels, "trace": trace})
    return recs


def evaluate(cfg: RunConfig, det: str) -> Path:
    _check_detector(det)
    run = Run(cfg)
    out = run.root / "eval" / det
    trace_root = run.root / "traces" / det
    if not trace_root.exists():
        raise DatasetNotFound(f"missing traces under {trace_root}; run the detect stage first")
    out.mkdir(parents=True, exist_ok=True)
    scp = cfg.scorer
    summary = []
    for tier in cfg.snr_tiers_db:
        recs = tier_recordings(run, det, tier)
        curve = ev.roc_sweep(recs, scp.num_thresholds, scp.grace_G)
        ev.write_roc_csv(out / f"roc_{tier}.csv", ev.roc_rows(curve, tier, det))
        op = ev.operating_point(curve, scp.target_false_alarm_rate)
        row = {
            "snr_tier": tier,
            "detector_kind": det,
            "rule": RULES[det],
            "dr_at_target_fa_interp": ev.dr_at_fa(curve, scp.target_false_alarm_rate),
            "op_threshold": op.threshold,
            "op_false_alarm_rate": op.false_alarm_rate,
            "op_detection_ratio": op.detection_ratio,
        }
        for kind in sorted(op.result.per_kind):
            row[f"dr_{kind}"] = op.result.kind_ratio(kind)
        summary.append(row)
        log.info("evaluate/%s: %s DR=%.3f FA=%.3f at threshold %.4g", det, tier, op.detection_ratio,
                 op.false_alarm_rate, op.threshold)
    cols = list(dict.fromkeys(k for r in summary for k in r))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, restval="")
        w.writeheader()
        for r in summary:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    run.record(f"evaluate/{det}", {"inputs": _tree_hashes(trace_root, run.root), "outputs": _tree_hashes(out, run.root)}, {})
    return out


def run_all(cfg: RunConfig, detectors=DETECTORS) -> Path:
    simulate(cfg)
    for det in detectors:
        transform(cfg, det)
        train_stage(cfg, det)
        detect(cfg, det)
        evaluate(cfg, det)
    return Run(cfg).root


def format_summary(path) -> str:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    lines = []
    for r in rows:
        lines.append(
            f"{r['detector_kind']:>11} {r['snr_tier']:>7}  DR={float(r['op_detection_ratio']):.3f} "
            f"FA={float(r['op_false_alarm_rate']):.3f}  DR@FA(interp)={float(r['dr_at_target_fa_interp']):.3f}"
        )
    return "\n".join(lines)
