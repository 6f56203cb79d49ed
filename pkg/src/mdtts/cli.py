"""Command-line entry point.

Subcommands: train, synth, eval, pipeline, stats, export-features,
review-export, review-import. Exit codes: 0 success, 2 usage or
configuration error, 1 runtime failure. Errors print one machine-readable
line: ``error category=<usage|runtime> message="..."``. Log verbosity comes
from the MDTTS_LOG environment variable (debug/info/warning/error).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shlex
import sys
from pathlib import Path

import numpy as np

from .classifier import (
    dca,
    export_dialect_features,
    load_classifier,
    save_classifier,
    train_dialect_classifier,
)
from .cfm import read_mel
from .config import ConfigError, RunConfig, build_run_config, parse_kv_file
from .dialect import DIALECTS, dialect_id
from .dsp import read_wav, write_wav
from .metrics import MetricReport, si_sdr, stoi
from .model import ModelConfig, SynthesisModel, TrainSample, train_model, wav_to_logmel
from .pipeline import (
    ClassifierDecsProvider,
    CommandEnhanceHook,
    FileMetricProvider,
    PipelineHooks,
    dataset_stats,
    export_review_queue,
    import_review_verdicts,
    read_manifest,
    run_pipeline,
)
from .text import build_vocab, load_vocab, save_vocab, tokenize

log = logging.getLogger("mdtts")


class UsageError(Exception):
    """Bad flags, files, or names detected before any real work starts."""


# ---------------------------------------------------------------------------
# helpers

def _require_file(path: str | Path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_config(args) -> RunConfig:
    file_values = {}
    if getattr(args, "config", None):
        file_values = parse_kv_file(_require_file(args.config, "config file"))
    overrides = {}
    for key in ("seed", "workers", "steps", "batch_size", "lr", "gl_iters",
                "sample_seed"):
        if hasattr(args, key.replace("-", "_")):
            overrides[key] = getattr(args, key.replace("-", "_"))
    return build_run_config(file_values, overrides)


def _read_training_manifest(path: Path, config: ModelConfig, vocab):
    """Training manifests carry text, dialect, and a mel_path or audio_path."""
    samples = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        raw = json.loads(line)
        text = raw["text"]
        did = dialect_id(raw["dialect"])
        if raw.get("mel_path"):
            mel = read_mel(raw["mel_path"]).frames
        elif raw.get("audio_path"):
            wav = read_wav(raw["audio_path"])
            mel = wav_to_logmel(wav.samples, config)
        else:
            raise UsageError(
                f"{path}:{lineno}: record needs mel_path or audio_path")
        samples.append(TrainSample(token_ids=tokenize(text, vocab).ids,
                                   did=did, mel=mel, text=text))
    if not samples:
        raise UsageError(f"training manifest {path} is empty")
    return samples


def _labeled_mels(manifest_path: Path, config: ModelConfig):
    """(utt_id, dialect, did, mel) tuples from either manifest schema."""
    out = []
    for lineno, line in enumerate(
            manifest_path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        raw = json.loads(line)
        dialect = raw["dialect"]
        did = dialect_id(dialect)
        if raw.get("mel_path"):
            mel = read_mel(raw["mel_path"]).frames
        elif raw.get("audio_path") and Path(raw["audio_path"]).is_file():
            mel = wav_to_logmel(read_wav(raw["audio_path"]).samples, config)
        else:
            log.warning("%s:%d: no readable mel/audio, skipped",
                        manifest_path, lineno)
            continue
        out.append((raw.get("id", f"line{lineno}"), dialect, did, mel))
    return out


def _get_classifier(args, config: ModelConfig):
    if getattr(args, "classifier", None):
        return load_classifier(_require_file(args.classifier, "classifier"))
    train_manifest = getattr(args, "classifier_train", None)
    if train_manifest:
        labeled = _labeled_mels(
            _require_file(train_manifest, "classifier training manifest"),
            config)
        clf = train_dialect_classifier([(mel, did) for _, _, did, mel in labeled],
                                       seed=getattr(args, "seed", 0) or 0)
        if getattr(args, "classifier_save", None):
            save_classifier(args.classifier_save, clf)
            log.info("classifier saved to %s", args.classifier_save)
        return clf
    return None


def _vocab_path_for(ckpt: Path, explicit: str | None) -> Path:
    if explicit:
        return _require_file(explicit, "vocabulary file")
    return _require_file(ckpt.with_suffix(ckpt.suffix + ".vocab"),
                         "vocabulary file (pass --vocab)")


# ---------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    config = _load_config(args)
    manifest_path = _require_file(args.manifest, "training manifest")
    texts = []
    for line in manifest_path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            texts.append(json.loads(line)["text"])
    if not texts:
        raise UsageError(f"training manifest {manifest_path} is empty")
    vocab = build_vocab(texts, max_size=config.model.vocab_size)
    samples = _read_training_manifest(manifest_path, config.model, vocab)

    model = SynthesisModel(config.model, seed=config.run.seed)
    history = train_model(model, samples, steps=config.run.steps,
                          batch_size=config.run.batch_size, lr=config.run.lr,
                          seed=config.run.seed)
    out = Path(args.out)
    model.save(out)
    save_vocab(vocab, out.with_suffix(out.suffix + ".vocab"))
    loss_log = Path(args.loss_log) if args.loss_log else out.with_suffix(
        out.suffix + ".losses.jsonl")
    loss_log.parent.mkdir(parents=True, exist_ok=True)
    loss_log.write_text(
        "".join(json.dumps(h) + "\n" for h in history), encoding="utf-8")
    print(f"trained steps={len(history)} "
          f"final_loss={history[-1]['total']:.6f} checkpoint={out}")
    return 0


def cmd_synth(args) -> int:
    config = _load_config(args)
    ckpt = _require_file(args.ckpt, "model checkpoint")
    try:
        dialect_id(args.dialect)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    model = SynthesisModel.load(ckpt)
    vocab = load_vocab(_vocab_path_for(ckpt, args.vocab))
    samples, mel, timing = model.synthesize_waveform(
        args.text, args.dialect, vocab, seed=config.run.sample_seed,
        n_steps=args.ode_steps if args.ode_steps else None,
        gl_iters=config.run.gl_iters)
    clipped = write_wav(args.out, samples, model.config.sample_rate)
    print(f"synthesized wav={args.out} frames={mel.shape[0]} "
          f"audio_seconds={timing['audio_seconds']:.3f} "
          f"synthesis_seconds={timing['synthesis_seconds']:.3f} "
          f"rtf={timing['rtf']:.4f} clipped={clipped}")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    manifest_path = _require_file(args.manifest, "manifest")
    records = read_manifest(manifest_path)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    classifier = _get_classifier(args, config.model)

    report = MetricReport()
    unpaired: list[str] = []
    labeled_for_dca = []
    for record in records:
        est_path = Path(record.audio_path)
        if not est_path.is_file():
            unpaired.append(f"{record.id}: missing estimate {est_path}")
            continue
        est = read_wav(est_path)
        values: dict[str, float] = {}
        if "rtf" in record.metrics:
            values["rtf"] = record.metrics["rtf"]
        if args.ref_dir:
            ref_path = Path(args.ref_dir) / f"{record.id}.wav"
            if ref_path.is_file():
                ref = read_wav(ref_path)
                n = min(len(ref.samples), len(est.samples))
                for name, fn in (("stoi", lambda: stoi(
                        ref.samples[:n], est.samples[:n], ref.sample_rate)),
                                 ("si_sdr", lambda: si_sdr(
                                     ref.samples[:n], est.samples[:n]))):
                    try:
                        values[name] = fn()
                    except ValueError as exc:
                        unpaired.append(f"{record.id}: {name}: {exc}")
            else:
                unpaired.append(f"{record.id}: missing reference {ref_path}")
        if classifier is not None:
            mel = wav_to_logmel(est.samples, config.model)
            did = dialect_id(record.dialect)
            values["decs"] = classifier.decs_to_centroid(mel, did)
            labeled_for_dca.append((mel, did))
        if values:
            report.add(record.id, **values)

    report.write_jsonl(out_dir / "metrics.jsonl")
    report.write_csv_summary(out_dir / "metrics_summary.csv")
    from .report import metric_summary_figure

    metric_summary_figure(report, out_dir / "metrics.png")
    for line in unpaired:
        log.warning("unpaired: %s", line)
    summary = {name: round(agg["mean"], 4)
               for name, agg in report.aggregate().items()}
    if classifier is not None and labeled_for_dca:
        summary["dca_percent"] = round(dca(classifier, labeled_for_dca), 2)
    print(f"evaluated utterances={len(report.per_utterance)} "
          f"unpaired={len(unpaired)} summary={json.dumps(summary)} "
          f"out_dir={out_dir}")
    return 0


def cmd_pipeline(args) -> int:
    config = _load_config(args)
    textdb = _require_file(args.textdb, "text database")
    texts = [line.strip() for line in
             textdb.read_text(encoding="utf-8").splitlines() if line.strip()]
    if not texts:
        raise UsageError(f"text database {textdb} is empty")
    ckpt = _require_file(args.ckpt, "model checkpoint")
    model = SynthesisModel.load(ckpt)
    vocab = load_vocab(_vocab_path_for(ckpt, args.vocab))

    if args.decs_file:
        decs_provider = FileMetricProvider(_require_file(args.decs_file,
                                                         "decs file"))
    else:
        classifier = _get_classifier(args, model.config)
        if classifier is None:
            raise UsageError(
                "pipeline needs --classifier, --classifier-train, or "
                "--decs-file for dialect consistency scoring")
        decs_provider = ClassifierDecsProvider(
            classifier,
            mel_fn=lambda p: wav_to_logmel(read_wav(p).samples, model.config))

    hooks = PipelineHooks(
        decs=decs_provider,
        pesq=FileMetricProvider(_require_file(args.pesq_file, "pesq file"))
        if args.pesq_file else None,
        dnsmos=FileMetricProvider(_require_file(args.dnsmos_file,
                                                "dnsmos file"))
        if args.dnsmos_file else None,
        enhance=CommandEnhanceHook(shlex.split(args.enhance_cmd))
        if args.enhance_cmd else None,
    )
    records = run_pipeline(texts, model, vocab, config.gate, hooks,
                           args.out_dir, seed=config.run.seed,
                           workers=config.run.workers, limit=args.limit,
                           resume=not args.no_resume,
                           gl_iters=config.run.gl_iters)
    counts = {status: sum(1 for r in records if r.status == status)
              for status in ("accepted", "enhanced", "rejected",
                             "pending_review")}
    print(f"pipeline records={len(records)} {json.dumps(counts)} "
          f"manifest={Path(args.out_dir) / 'manifest.jsonl'}")
    return 0


def cmd_stats(args) -> int:
    manifest_path = _require_file(args.manifest, "manifest")
    stats = dataset_stats(manifest_path)
    rows = [stats.per_dialect[name] for name in DIALECTS] + [stats.total]
    if stats.empty:
        print("dataset empty (no accepted or enhanced records)")
    header = (f"{'dialect':<10} {'files':>6} {'bytes':>12} {'dur_s':>10} "
              f"{'avg_s':>7} {'si_sdr':>14} {'pesq':>14}")
    print(header)
    for row in rows:
        def fmt(name):
            summary = row.metric_summary(name)
            return "-" if summary is None else f"{summary[0]:.2f}±{summary[1]:.2f}"

        print(f"{row.dialect:<10} {row.files:>6} {row.bytes:>12} "
              f"{row.duration_seconds:>10.2f} {row.avg_duration:>7.2f} "
              f"{fmt('si_sdr'):>14} {fmt('pesq'):>14}")
    for utt_id in stats.missing_audio:
        log.warning("missing audio for %s", utt_id)
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        import csv

        with (out_dir / "stats.csv").open("w", newline="",
                                          encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dialect", "files", "bytes", "duration_seconds",
                             "avg_duration", "si_sdr_mean", "si_sdr_std",
                             "pesq_mean", "pesq_std"])
            for row in rows:
                si = row.metric_summary("si_sdr") or ("", "")
                pe = row.metric_summary("pesq") or ("", "")
                writer.writerow([row.dialect, row.files, row.bytes,
                                 row.duration_seconds, row.avg_duration,
                                 *si, *pe])
        from .report import stats_figure

        stats_figure(stats, out_dir / "stats.png")
        print(f"stats written to {out_dir}")
    return 0


def cmd_export_features(args) -> int:
    config = _load_config(args)
    manifest_path = _require_file(args.manifest, "manifest")
    classifier = _get_classifier(args, config.model)
    if classifier is None:
        raise UsageError("export-features needs --classifier or "
                         "--classifier-train")
    labeled = [(utt_id, dialect, mel)
               for utt_id, dialect, _, mel in _labeled_mels(manifest_path,
                                                            config.model)]
    rows = export_dialect_features(classifier, labeled, args.out)
    figure_path = Path(args.figure) if args.figure else Path(
        args.out).with_suffix(".png")
    from .report import features_figure

    features_figure(rows, figure_path)
    print(f"exported rows={len(rows)} csv={args.out} figure={figure_path}")
    return 0


def cmd_review_export(args) -> int:
    manifest_path = _require_file(args.manifest, "manifest")
    count = export_review_queue(manifest_path, args.out)
    print(f"review queue rows={count} csv={args.out}")
    return 0


def cmd_review_import(args) -> int:
    manifest_path = _require_file(args.manifest, "manifest")
    verdicts = _require_file(args.verdicts, "verdict file")
    records, errors = import_review_verdicts(manifest_path, verdicts)
    for err in errors:
        print(f"verdict-error {err}", file=sys.stderr)
    counts = {status: sum(1 for r in records if r.status == status)
              for status in ("accepted", "enhanced", "rejected",
                             "pending_review")}
    print(f"review import applied={len(records)} errors={len(errors)} "
          f"{json.dumps(counts)}")
    return 0


# ---------------------------------------------------------------------------
# parser

def _add_classifier_flags(sub):
    sub.add_argument("--classifier", help="dialect classifier checkpoint")
    sub.add_argument("--classifier-train",
                     help="labeled manifest to train a classifier on the fly")
    sub.add_argument("--classifier-save",
                     help="where to store a freshly trained classifier")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mdtts",
        description="Multi-dialect speech synthesis toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a synthesis model")
    p.add_argument("--manifest", required=True,
                   help="JSONL with text, dialect, mel_path|audio_path")
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss-log", dest="loss_log",
                   help="loss history JSONL (default <out>.losses.jsonl)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize one utterance to WAV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--dialect", required=True,
                   help="u-tsang | amdo | kham")
    p.add_argument("--out", required=True, help="output WAV path")
    p.add_argument("--vocab", help="vocabulary file (default <ckpt>.vocab)")
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--seed", dest="sample_seed", type=int)
    p.add_argument("--steps", type=int, dest="ode_steps",
                   help="ODE integration steps")
    p.add_argument("--gl-iters", dest="gl_iters", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="objective metrics over a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--ref-dir", dest="ref_dir",
                   help="directory of <id>.wav reference files")
    p.add_argument("--config", help="key=value configuration file")
    _add_classifier_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="quality-gated dataset generation")
    p.add_argument("--textdb", required=True,
                   help="UTF-8 text file, one sentence per line")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--vocab")
    p.add_argument("--config", help="key=value configuration file")
    _add_classifier_flags(p)
    p.add_argument("--decs-file", dest="decs_file",
                   help="'id value' stub instead of a classifier")
    p.add_argument("--pesq-file", dest="pesq_file",
                   help="'id value' perceptual metric provider")
    p.add_argument("--dnsmos-file", dest="dnsmos_file",
                   help="'id value' perceptual metric provider")
    p.add_argument("--enhance-cmd", dest="enhance_cmd",
                   help="command receiving input.wav output.wav")
    p.add_argument("--workers", type=int)
    p.add_argument("--limit", type=int,
                   help="max new records this invocation")
    p.add_argument("--no-resume", action="store_true", dest="no_resume")
    p.add_argument("--seed", type=int)
    p.add_argument("--gl-iters", dest="gl_iters", type=int)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("stats", help="dataset statistics from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", dest="out_dir",
                   help="write stats.csv and stats.png here")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("export-features",
                       help="per-utterance softmax and embedding CSV")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--figure", help="PNG output (default <out>.png)")
    p.add_argument("--config", help="key=value configuration file")
    _add_classifier_flags(p)
    p.set_defaults(func=cmd_export_features)

    p = sub.add_parser("review-export",
                       help="CSV queue of records pending manual review")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_review_export)

    p = sub.add_parser("review-import", help="apply reviewer verdicts")
    p.add_argument("--manifest", required=True)
    p.add_argument("--verdicts", required=True,
                   help="CSV with id,verdict columns")
    p.set_defaults(func=cmd_review_import)

    return parser


def main(argv=None) -> int:
    level = os.environ.get("MDTTS_LOG", "warning").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f'error category=usage message="{exc}"', file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f'error category=runtime message="{exc}"', file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
