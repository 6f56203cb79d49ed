"""Quality-gated dataset generation pipeline and manifest tooling.

Every text is synthesized in all three dialects, scored, and routed through
the gate: reject on dialect inconsistency, enhance (once) on perceptual
failure, accept otherwise. Records land in a line-delimited JSON manifest.
Worker-pool execution, mid-run kills and resumes all produce record-for-
record identical manifests because each task derives its randomness from
(run seed, text index, dialect id) and the final manifest is rewritten in
task order.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Protocol, Sequence

import numpy as np

from .dialect import DIALECTS
from .dsp import wav_duration_seconds, write_wav
from .model import SynthesisModel
from .text import Vocab

log = logging.getLogger(__name__)

__all__ = [
    "GateConfig", "GateDecision", "gate",
    "UtteranceRecord", "read_manifest", "write_manifest",
    "MetricProvider", "FileMetricProvider", "ConstantMetricProvider",
    "ClassifierDecsProvider", "CommandEnhanceHook", "PipelineHooks",
    "run_pipeline", "dataset_stats", "DatasetStats", "DialectStats",
    "export_review_queue", "import_review_verdicts",
]

KEPT_STATUSES = ("accepted", "enhanced")
ALL_STATUSES = ("accepted", "enhanced", "rejected", "pending_review")


@dataclass(frozen=True)
class GateConfig:
    """Quality thresholds; dialect gate is strict '>', perceptual strict '<'."""

    decs_min: float = 0.8
    pesq_min: float = 3.0
    dnsmos_min: float = 2.7

    def __post_init__(self):
        for name in ("decs_min", "pesq_min", "dnsmos_min"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if not 0.0 < self.decs_min < 1.0:
            raise ValueError("decs_min must lie in (0, 1)")


class GateDecision(enum.Enum):
    ACCEPT = "accept"
    ENHANCE = "enhance"
    REJECT = "reject"


def gate(metrics: Mapping[str, float | None],
         cfg: GateConfig = GateConfig()) -> GateDecision:
    """Route one utterance: reject unless decs exceeds the threshold, enhance
    when a present perceptual metric falls below its bound, else accept.

    Absent pesq/dnsmos are treated as passing (logged); absent decs is an
    error.
    """
    decs_value = metrics.get("decs")
    if decs_value is None:
        raise ValueError("gate requires a dialect consistency (decs) value")
    if not decs_value > cfg.decs_min:
        return GateDecision.REJECT
    for name, bound in (("pesq", cfg.pesq_min), ("dnsmos", cfg.dnsmos_min)):
        value = metrics.get(name)
        if value is None:
            log.debug("gate: %s absent, treated as passing", name)
            continue
        if value < bound:
            return GateDecision.ENHANCE
    return GateDecision.ACCEPT


@dataclass
class UtteranceRecord:
    id: str
    text: str
    dialect: str
    audio_path: str
    duration_seconds: float
    metrics: dict[str, float] = field(default_factory=dict)
    status: str = "pending_review"

    def __post_init__(self):
        if self.status not in ALL_STATUSES:
            raise ValueError(f"invalid status {self.status!r}")

    def to_json(self) -> str:
        return json.dumps({
            "id": self.id, "text": self.text, "dialect": self.dialect,
            "audio_path": self.audio_path,
            "duration_seconds": self.duration_seconds,
            "metrics": self.metrics, "status": self.status,
        }, ensure_ascii=False)

    @classmethod
    def from_json(cls, line: str) -> "UtteranceRecord":
        raw = json.loads(line)
        return cls(id=raw["id"], text=raw["text"], dialect=raw["dialect"],
                   audio_path=raw["audio_path"],
                   duration_seconds=float(raw["duration_seconds"]),
                   metrics={k: float(v) for k, v in raw["metrics"].items()},
                   status=raw["status"])


def read_manifest(path: str | Path) -> list[UtteranceRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            records.append(UtteranceRecord.from_json(line))
    return records


def write_manifest(path: str | Path, records: Sequence[UtteranceRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text("".join(r.to_json() + "\n" for r in records),
                   encoding="utf-8")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# metric providers and hooks

class MetricProvider(Protocol):
    def score(self, utt_id: str, did: int, wav_path: Path,
              mel: np.ndarray | None) -> float | None: ...


class FileMetricProvider:
    """Reads 'utterance-id value' lines; returns None for unknown ids."""

    def __init__(self, path: str | Path):
        self.values: dict[str, float] = {}
        for lineno, line in enumerate(
                Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: expected 'id value'")
            self.values[parts[0]] = float(parts[1])

    def score(self, utt_id, did, wav_path, mel):
        return self.values.get(utt_id)


class ConstantMetricProvider:
    def __init__(self, value: float):
        self.value = float(value)

    def score(self, utt_id, did, wav_path, mel):
        return self.value


class ClassifierDecsProvider:
    """Cosine similarity of the utterance embedding to its dialect centroid."""

    def __init__(self, classifier, mel_fn: Callable[[Path], np.ndarray]):
        self.classifier = classifier
        self.mel_fn = mel_fn

    def score(self, utt_id, did, wav_path, mel):
        if mel is None:
            mel = self.mel_fn(Path(wav_path))
        return self.classifier.decs_to_centroid(mel, did)


class CommandEnhanceHook:
    """External enhancement contract: ``argv... input.wav output.wav``,
    exit code 0 on success."""

    def __init__(self, argv: Sequence[str]):
        if not argv:
            raise ValueError("enhancement command must not be empty")
        self.argv = list(argv)

    def run(self, in_path: Path, out_path: Path) -> None:
        proc = subprocess.run([*self.argv, str(in_path), str(out_path)],
                              capture_output=True, text=True)
        if proc.returncode != 0:
            raise RuntimeError(
                f"enhancement hook exited {proc.returncode}: "
                f"{proc.stderr.strip()[:200]}")
        if not out_path.exists():
            raise RuntimeError("enhancement hook produced no output file")


@dataclass
class PipelineHooks:
    decs: MetricProvider
    pesq: MetricProvider | None = None
    dnsmos: MetricProvider | None = None
    enhance: "CommandEnhanceHook | None" = None


# ---------------------------------------------------------------------------
# pipeline

def _task_seed(run_seed: int, text_index: int, did: int) -> int:
    return int(np.random.SeedSequence(
        entropy=(run_seed, text_index, did)).generate_state(1)[0])


def _score(hooks: PipelineHooks, utt_id: str, did: int, wav_path: Path,
           mel: np.ndarray | None) -> dict[str, float]:
    metrics: dict[str, float] = {}
    decs_value = hooks.decs.score(utt_id, did, wav_path, mel)
    if decs_value is None:
        raise RuntimeError(f"no dialect consistency score for {utt_id}")
    metrics["decs"] = float(decs_value)
    for name, provider in (("pesq", hooks.pesq), ("dnsmos", hooks.dnsmos)):
        if provider is None:
            continue
        value = provider.score(utt_id, did, wav_path, mel)
        if value is None:
            log.warning("%s: %s provider has no value, treated as passing",
                        utt_id, name)
        else:
            metrics[name] = float(value)
    return metrics


def _process_task(model: SynthesisModel, vocab: Vocab, text_index: int,
                  text: str, did: int, gate_cfg: GateConfig,
                  hooks: PipelineHooks, wav_dir: Path,
                  run_seed: int, gl_iters: int) -> UtteranceRecord:
    dialect = DIALECTS[did]
    utt_id = f"utt{text_index:05d}_{dialect}"
    wav_path = wav_dir / f"{utt_id}.wav"
    record = UtteranceRecord(id=utt_id, text=text, dialect=dialect,
                             audio_path=str(wav_path), duration_seconds=0.0)
    try:
        samples, mel, timing = model.synthesize_waveform(
            text, dialect, vocab, seed=_task_seed(run_seed, text_index, did),
            gl_iters=gl_iters)
        write_wav(wav_path, samples, model.config.sample_rate)
        record.duration_seconds = timing["audio_seconds"]
        metrics = _score(hooks, utt_id, did, wav_path, mel)
        metrics["rtf"] = float(timing["rtf"])
        record.metrics = metrics
        decision = gate(metrics, gate_cfg)
        if decision is GateDecision.ACCEPT:
            record.status = "accepted"
        elif decision is GateDecision.REJECT:
            record.status = "rejected"
        elif hooks.enhance is None:
            log.warning("%s needs enhancement but no hook is configured",
                        utt_id)
            record.status = "pending_review"
        else:
            record.status = _enhance_once(model, record, did, gate_cfg,
                                          hooks, wav_path)
    except Exception as exc:  # quarantine, never crash the run
        log.warning("%s quarantined: %s", utt_id, exc)
        record.status = "pending_review"
    return record


def _enhance_once(model: SynthesisModel, record: UtteranceRecord, did: int,
                  gate_cfg: GateConfig, hooks: PipelineHooks,
                  wav_path: Path) -> str:
    """Run the enhancement hook, re-score once, and settle the record."""
    enhanced = wav_path.with_suffix(".enhanced.wav")
    hooks.enhance.run(wav_path, enhanced)
    rescored = _score(hooks, record.id, did, enhanced, None)
    rescored["rtf"] = record.metrics.get("rtf", 0.0)
    decision = gate(rescored, gate_cfg)
    record.metrics = rescored
    if decision is GateDecision.ACCEPT:
        os.replace(enhanced, wav_path)
        return "enhanced"
    enhanced.unlink(missing_ok=True)
    return "rejected"


def run_pipeline(texts: Sequence[str],
                 model: SynthesisModel,
                 vocab: Vocab,
                 gate_cfg: GateConfig,
                 hooks: PipelineHooks,
                 out_dir: str | Path,
                 seed: int = 0,
                 workers: int = 1,
                 limit: int | None = None,
                 resume: bool = True,
                 gl_iters: int = 30) -> list[UtteranceRecord]:
    """Synthesize, score and gate every text in all three dialects.

    Appends each finished record to ``manifest.jsonl`` immediately (so a
    killed run can resume) and rewrites the manifest in deterministic
    (text index, dialect id) order at the end. ``limit`` caps how many new
    records this invocation produces.
    """
    if not texts:
        raise ValueError("text database is empty")
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.jsonl"

    existing: dict[str, UtteranceRecord] = {}
    if resume and manifest_path.exists():
        for rec in read_manifest(manifest_path):
            existing.setdefault(rec.id, rec)

    tasks = [(i, text, did)
             for i, text in enumerate(texts) for did in range(3)]
    todo = [(i, text, did) for i, text, did in tasks
            if f"utt{i:05d}_{DIALECTS[did]}" not in existing]
    if limit is not None:
        todo = todo[:limit]

    append_lock = threading.Lock()
    results: dict[str, UtteranceRecord] = dict(existing)

    def work(task):
        i, text, did = task
        record = _process_task(model, vocab, i, text, did, gate_cfg, hooks,
                               wav_dir, seed, gl_iters)
        with append_lock:
            with manifest_path.open("a", encoding="utf-8") as fh:
                fh.write(record.to_json() + "\n")
            results[record.id] = record
        return record

    if workers <= 1:
        for task in todo:
            work(task)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(work, todo))

    ordered = [results[f"utt{i:05d}_{DIALECTS[did]}"]
               for i, text, did in tasks
               if f"utt{i:05d}_{DIALECTS[did]}" in results]
    write_manifest(manifest_path, ordered)
    log.info("pipeline wrote %d records to %s", len(ordered), manifest_path)
    return ordered


# ---------------------------------------------------------------------------
# statistics

@dataclass
class DialectStats:
    dialect: str
    files: int = 0
    bytes: int = 0
    duration_seconds: float = 0.0
    si_sdr_values: list[float] = field(default_factory=list)
    pesq_values: list[float] = field(default_factory=list)

    @property
    def avg_duration(self) -> float:
        return self.duration_seconds / self.files if self.files else 0.0

    def metric_summary(self, name: str) -> tuple[float, float] | None:
        values = getattr(self, f"{name}_values")
        if not values:
            return None
        arr = np.asarray(values)
        return float(arr.mean()), float(arr.std())


@dataclass
class DatasetStats:
    per_dialect: dict[str, DialectStats]
    total: DialectStats
    missing_audio: list[str]

    @property
    def empty(self) -> bool:
        return self.total.files == 0


def dataset_stats(records: Sequence[UtteranceRecord] | str | Path) -> DatasetStats:
    """Per-dialect and total statistics over kept (accepted/enhanced) records.

    Durations come from the WAV headers; records whose audio file is missing
    are listed and skipped, never fatal.
    """
    if isinstance(records, (str, Path)):
        records = read_manifest(records)
    per = {name: DialectStats(dialect=name) for name in DIALECTS}
    total = DialectStats(dialect="total")
    missing: list[str] = []
    for record in records:
        if record.status not in KEPT_STATUSES:
            continue
        path = Path(record.audio_path)
        if not path.exists():
            missing.append(record.id)
            continue
        size = path.stat().st_size
        duration = wav_duration_seconds(path)
        for bucket in (per.get(record.dialect), total):
            if bucket is None:
                continue
            bucket.files += 1
            bucket.bytes += size
            bucket.duration_seconds += duration
            for name in ("si_sdr", "pesq"):
                if name in record.metrics:
                    getattr(bucket, f"{name}_values").append(
                        record.metrics[name])
    return DatasetStats(per_dialect=per, total=total, missing_audio=missing)


# ---------------------------------------------------------------------------
# review queue

def export_review_queue(records: Sequence[UtteranceRecord] | str | Path,
                        out_csv: str | Path,
                        gate_cfg: GateConfig = GateConfig()) -> int:
    """CSV of pending_review records with the metrics that fail the gate."""
    import csv

    if isinstance(records, (str, Path)):
        records = read_manifest(records)
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with out_csv.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "text", "dialect", "audio_path",
                         "failing_metrics"])
        for record in records:
            if record.status != "pending_review":
                continue
            failing = []
            decs_value = record.metrics.get("decs")
            if decs_value is None:
                failing.append("decs=missing")
            elif not decs_value > gate_cfg.decs_min:
                failing.append(f"decs={decs_value:.4f}<={gate_cfg.decs_min}")
            for name, bound in (("pesq", gate_cfg.pesq_min),
                                ("dnsmos", gate_cfg.dnsmos_min)):
                value = record.metrics.get(name)
                if value is not None and value < bound:
                    failing.append(f"{name}={value:.4f}<{bound}")
            writer.writerow([record.id, record.text, record.dialect,
                             record.audio_path, ";".join(failing)])
            count += 1
    return count


def import_review_verdicts(manifest_path: str | Path,
                           verdict_csv: str | Path
                           ) -> tuple[list[UtteranceRecord], list[str]]:
    """Apply reviewer verdicts (columns: id, verdict) to a manifest.

    Returns the updated records and a list of per-line errors for malformed
    rows; well-formed rows are applied regardless. Idempotent: re-importing
    the same file changes nothing further.
    """
    import csv

    records = read_manifest(manifest_path)
    by_id = {r.id: r for r in records}
    errors: list[str] = []
    with Path(verdict_csv).open(encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "verdict"} <= set(
                reader.fieldnames):
            raise ValueError("verdict file needs 'id' and 'verdict' columns")
        for lineno, row in enumerate(reader, 2):
            utt_id = (row.get("id") or "").strip()
            verdict = (row.get("verdict") or "").strip().lower()
            if not utt_id or utt_id not in by_id:
                errors.append(f"line {lineno}: unknown utterance id {utt_id!r}")
                continue
            if verdict not in ("accepted", "rejected"):
                errors.append(
                    f"line {lineno}: verdict must be accepted or rejected, "
                    f"got {verdict!r}")
                continue
            by_id[utt_id].status = verdict
    write_manifest(manifest_path, records)
    return records, errors
