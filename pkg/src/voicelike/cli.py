"""Command-line entry point: ``voicelike <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 data error (missing or
malformed inputs), 4 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, audio, formats, manifest, metrics, synth, units
from . import converter as conv
from . import evalharness as ev
from . import predictor as pred
from . import tensorkit as tk
from .augment import load_impulse_responses
from .config import RunConfig, load_config
from .errors import ConfigError, DataError, TrainingDivergedError

log = logging.getLogger("voicelike")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
THREADS_ENV = "VOICELIKE_THREADS"


# ---------------------------------------------------------------------------
# helpers


def _threads(args, cfg: RunConfig) -> int:
    if args.threads is not None:
        n = args.threads
    elif os.environ.get(THREADS_ENV):
        try:
            n = int(os.environ[THREADS_ENV])
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer") from exc
    else:
        n = cfg.threads
    if n < 1:
        raise ConfigError("thread count must be >= 1")
    return n


def _need(path, what) -> Path:
    if path is None:
        raise DataError(f"missing {what}")
    path = Path(path)
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


def _file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_provenance(out_dir: Path, args, cfg: RunConfig, outputs):
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": args.command,
        "version": __version__,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "argv": args.argv,
        "outputs": {str(p): _file_sha(p) for p in outputs if Path(p).is_file()},
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out_dir / f"run_{args.command}.json").write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")


def _write_history(path, history):
    if not history:
        return
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0]))
        writer.writeheader()
        writer.writerows(history)


def _parse_target(text) -> np.ndarray:
    try:
        vals = [float(v) for v in str(text).split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad target {text!r}") from exc
    if len(vals) not in (1, pred.N_GROUPS):
        raise ConfigError("target takes one value or four comma-separated values")
    return np.resize(np.asarray(vals), pred.N_GROUPS)


def _splits(text):
    names = [s for s in text.split(",") if s]
    bad = set(names) - set(manifest.SPLITS)
    if bad:
        raise ConfigError(f"unknown split(s): {sorted(bad)}")
    return names


def _records(path, splits=None):
    recs = manifest.read_manifest(_need(path, "manifest"))
    return recs if splits is None else [r for r in recs if r["split"] in splits]


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth_corpus(args, cfg):
    scfg = synth.SynthConfig(n_speakers=args.speakers, clips_per_speaker=args.clips,
                             duration_sec=args.duration, seed=cfg.seed if args.seed is None else args.seed)
    out = Path(args.out)
    recs = synth.generate_corpus(out, scfg)
    _write_provenance(out, args, cfg, [out / "manifest.jsonl"])
    print(f"wrote {len(recs)} utterances to {out / 'manifest.jsonl'}")


def cmd_train_predictor(args, cfg):
    records = _records(args.manifest)
    tcfg = cfg.predictor
    if args.epochs is not None:
        tcfg = type(tcfg)(**{**tcfg.__dict__, "epochs": args.epochs})
    ir_dir = args.ir_dir or tcfg.augment.ir_dir
    irs = load_impulse_responses(_need(ir_dir, "impulse-response directory")) if ir_dir else ()
    model = pred.build_model(seed=cfg.seed, n_mels=cfg.mel.n_mels)
    model, history = pred.train(model, records, tcfg, cfg.mel, irs)

    val = [r for r in records if r["split"] == "val"]
    raw = pred.predict_many(model, [audio.load_mel(r["audio"], cfg.mel) for r in val])
    calib = pred.fit_calibration(raw, [r["ratings"] for r in val])

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "predictor.lkbl")
    (out / "calibration.json").write_text(json.dumps(calib.to_dict(), indent=2) + "\n", encoding="utf-8")
    _write_history(out / "history.csv", history)
    outputs = [out / "predictor.lkbl", out / "calibration.json", out / "history.csv"]
    _write_provenance(out, args, cfg, outputs)
    best = max(h["val_srcc"] for h in history)
    print(f"best val SRCC {best:.4f} over {len(history)} epochs; checkpoint {out / 'predictor.lkbl'}")


def _load_predictor(args):
    model = pred.PredictorModel.load(_need(args.checkpoint, "predictor checkpoint"))
    cal_path = _need(args.calibration, "calibration file")
    calib = pred.CalibrationParams.from_dict(json.loads(cal_path.read_text(encoding="utf-8")))
    return model, calib


def cmd_annotate(args, cfg):
    model, calib = _load_predictor(args)
    src = _need(args.manifest, "manifest")
    out = Path(args.out)
    rejects_path = Path(args.rejects) if args.rejects else out.with_suffix(".rejects.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    n_ok = n_bad = 0
    with out.open("w", encoding="utf-8") as fo, rejects_path.open("w", encoding="utf-8") as fr:
        for rec, err in pred.iter_annotate(model, calib, manifest.iter_manifest(src), cfg.mel, args.n_threads):
            if err is None:
                fo.write(json.dumps(rec, ensure_ascii=False) + "\n")
                n_ok += 1
            else:
                fr.write(json.dumps(err, ensure_ascii=False) + "\n")
                n_bad += 1
    _write_provenance(out.parent, args, cfg, [out, rejects_path])
    print(f"annotated {n_ok} records, rejected {n_bad} (see {rejects_path})")


def _features(rec, mel_cfg):
    if rec.get("features"):
        return formats.read_features(rec["features"]).astype(np.float64)
    if not rec.get("audio"):
        raise DataError(f"record {rec['id']!r} has neither features nor audio")
    return units.internal_features(audio.load_mel(rec["audio"], mel_cfg).frames)


def cmd_fit_units(args, cfg):
    records = _records(args.manifest, _splits(args.splits))
    if not records:
        raise DataError("no records in the selected splits")
    ucfg = cfg.units
    k = args.k if args.k is not None else ucfg.k
    feats = [_features(r, cfg.mel) for r in records]
    try:
        cb = units.fit_minibatch_kmeans(feats, k, ucfg.batch_size, ucfg.iterations, ucfg.seed, ucfg.n_init)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    cb.save(out)
    _write_provenance(out.parent, args, cfg, [out])
    print(f"fitted k={k} codebook on {sum(f.shape[0] for f in feats)} frames; inertia "
          f"{units.inertia(cb, feats):.4f}")


def cmd_tokenize(args, cfg):
    cb = units.Codebook.load(_need(args.codebook, "codebook"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with out.open("w", encoding="utf-8") as fh:
        for rec in manifest.iter_manifest(_need(args.manifest, "manifest")):
            u = units.dedup_runs(units.quantize(cb, _features(rec, cfg.mel)))
            fh.write(json.dumps({"id": rec["id"], "units": u.ids.tolist(), "runs": u.run_lengths.tolist()}) + "\n")
            n += 1
    _write_provenance(out.parent, args, cfg, [out])
    print(f"tokenized {n} records into {out}")


def cmd_train_converter(args, cfg):
    cb = units.Codebook.load(_need(args.codebook, "codebook"))
    records = _records(args.manifest, _splits(args.splits))
    if not records:
        raise DataError("no records in the selected splits")
    examples = [conv.make_example(r, cb, cfg.mel) for r in records]
    ccfg = type(cfg.converter)(**{**cfg.converter.__dict__, "vocab": cb.k,
                                  "speaker_dim": examples[0].speaker.size, "n_mels": cfg.mel.n_mels})
    tcfg = cfg.converter_train
    overrides = {"scale": args.scale if args.scale is not None else cfg.scale.train}
    if args.steps is not None:
        overrides["steps"] = args.steps
    tcfg = type(tcfg)(**{**tcfg.__dict__, **overrides})
    model, history = conv.train_converter(conv.ConverterModel(ccfg), examples, tcfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save(out / "converter.lkbl")
    _write_history(out / "history.csv", history)
    fit = conv.evaluate_fit(model, examples, tcfg.scale)
    (out / "fit.json").write_text(json.dumps(fit, indent=2) + "\n", encoding="utf-8")
    _write_provenance(out, args, cfg, [out / "converter.lkbl", out / "history.csv", out / "fit.json"])
    print(f"trained converter: mel MSE {fit['mel_mse']:.4f}, duration MAE {fit['duration_mae']:.3f} frames")


def _load_source(path, mel_cfg):
    path = _need(path, "source")
    if path.suffix.lower() == ".wav":
        return audio.load_wav(path)
    return formats.read_features(path).astype(np.float64)


def cmd_convert(args, cfg):
    target = _parse_target(args.target)
    model = conv.ConverterModel.load(_need(args.checkpoint, "converter checkpoint"))
    cb = units.Codebook.load(_need(args.codebook, "codebook"))
    source = _load_source(args.source, cfg.mel)
    if args.speaker:
        speaker = formats.read_embedding(_need(args.speaker, "speaker embedding")).astype(np.float64)
    elif isinstance(source, audio.Waveform):
        speaker = conv.fallback_speaker_embedding(
            audio.log_mel_spectrogram(audio.prepare(source, cfg.mel.sample_rate), cfg.mel).frames)
    else:
        raise DataError("a speaker embedding (--speaker) is required for feature-matrix sources")
    if speaker.size != model.cfg.speaker_dim:
        raise DataError(f"speaker embedding has {speaker.size} dims but the converter was trained on "
                        f"{model.cfg.speaker_dim}; pass a matching --speaker file")
    s = cfg.scale.inference if args.scale is None else args.scale
    mel = conv.convert(model, source, cb, speaker, target, s, cfg.mel)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.wav:
        wave = conv.griffin_lim_vocoder(mel, cfg.evaluation.vocoder_iterations, cfg.seed, cfg.mel)
        audio.write_wav(out, wave, encoding="pcm16")
    else:
        formats.write_features(out, mel.frames)
    _write_provenance(out.parent, args, cfg, [out])
    print(f"wrote {mel.n_frames} frames (s={s}) to {out}")


def _example_for_eval(rec, cb, mel_cfg):
    mel = audio.load_mel(rec["audio"], mel_cfg).frames
    u = units.dedup_runs(units.quantize(cb, _features(rec, mel_cfg)))
    return conv.Example(rec["id"], u.ids, u.run_lengths, mel, conv.record_speaker(rec, mel),
                        np.zeros(pred.N_GROUPS))


def cmd_evaluate(args, cfg):
    if not (args.sweep or args.content or args.similarity or args.predictor_report):
        raise ConfigError("select at least one of --sweep, --content, --similarity, --predictor-report")
    records = _records(args.manifest, _splits(args.splits))
    if args.limit is not None:
        records = records[:args.limit]
    if not records:
        raise DataError("no records in the selected splits")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    targets = list(cfg.evaluation.targets)
    s = cfg.scale.inference if args.scale is None else args.scale
    chash, written = cfg.hash(), []

    def _emit(report, kind):
        path = out / ev.report_name(kind, cfg.seed, chash, args.format)
        report.meta.update({"seed": cfg.seed, "config_hash": chash})
        written.append(ev.emit_report(report, path, args.format))

    if args.predictor_report or args.sweep:
        p_model, calib = _load_predictor(args)
    if args.sweep or args.content or args.similarity:
        c_model = conv.ConverterModel.load(_need(args.converter, "converter checkpoint"))
        cb = units.Codebook.load(_need(args.codebook, "codebook"))
        examples = [_example_for_eval(r, cb, cfg.mel) for r in records]

    if args.predictor_report:
        _emit(ev.predictor_report(p_model, calib, records, cfg.mel, split=None), "predictor")
    if args.sweep:
        sweep = ev.likability_sweep(c_model, p_model, calib, cb, examples, targets, s, cfg.mel, args.n_threads)
        report = sweep.to_report()
        report.meta["scale"] = s
        report.meta["spearman_target_vs_mean"] = metrics.spearman_srcc(targets, sweep.mean_curve())
        _emit(report, "sweep")
        print(f"sweep Spearman(target, mean prediction) = {report.meta['spearman_target_vs_mean']:.4f}")
    if args.content:
        _emit(ev.content_proxy_eval(c_model, cb, examples, targets, s, cfg.mel), "content")
    if args.similarity:
        reference = {}
        for ex in examples:
            spk = next(r["speaker"] for r in records if r["id"] == ex.id)
            reference.setdefault(spk, []).append(conv.fallback_speaker_embedding(ex.mel))
        conversions = []
        for ex, rec in zip(examples, records):
            for t in targets:
                mel = conv.convert_units(c_model, ex.ids, ex.speaker, t, s, mel_cfg=cfg.mel)
                conversions.append((ex.id, rec["speaker"], t, conv.fallback_speaker_embedding(mel.frames)))
        sim = ev.speaker_similarity_eval(conversions, reference)
        _emit(sim.to_report(), "similarity")
        print(f"similarity threshold {sim.threshold:.4f} (EER {sim.eer:.4f}; "
              f"external reference {sim.reference_threshold}); pass rate "
              f"{np.mean([r['pass'] for r in sim.rows]):.3f}")
    _write_provenance(out, args, cfg, written)
    for p in written:
        print(f"wrote {p}")


def cmd_gradcheck(args, cfg):
    rng = np.random.default_rng(cfg.seed)
    p_model = pred.build_model(seed=cfg.seed, n_mels=8).astype(np.float64)
    mel = rng.normal(size=(2, 24, 8))
    target = rng.normal(size=(2, 4))
    err_p = tk.fd_check(lambda: tk.mse(p_model.forward(mel), target), p_model.parameters(),
                        max_elems=args.max_elems, seed=cfg.seed)
    c_model = conv.ConverterModel(conv.ConverterConfig(vocab=6, embed_dim=8, speaker_dim=5, n_mels=7,
                                                       dur_hidden=4, seed=cfg.seed), dtype=np.float64)
    c_model.params["mel.weight"].data[...] = rng.normal(0, 0.3, c_model.params["mel.weight"].shape)
    ex = conv.Example("x", np.array([1, 4, 2]), np.array([2, 1, 3]), rng.normal(size=(6, 7)),
                      rng.normal(size=5), rng.uniform(-1, 1, 4))
    err_c = tk.fd_check(lambda: conv.converter_loss(c_model, ex, 1.0)[0], c_model.parameters(),
                        max_elems=args.max_elems, seed=cfg.seed)
    ok = max(err_p, err_c) < args.tol
    print(f"predictor max rel err {err_p:.3e}\nconverter max rel err {err_c:.3e}\n{'PASS' if ok else 'FAIL'}")
    if not ok:
        raise TrainingDivergedError("gradient check failed")


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="voicelike",
                                description="Voice likability prediction and likability-controlled voice conversion.")
    p.add_argument("--version", action="version", version=f"voicelike {__version__}")
    p.add_argument("--config", help="JSON run configuration (defaults for every omitted field)")
    p.add_argument("--threads", type=int, help=f"worker cap (also ${THREADS_ENV})")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth-corpus", help="generate a synthetic corpus with planted likability")
    s.add_argument("--out", required=True)
    s.add_argument("--speakers", type=int, default=6)
    s.add_argument("--clips", type=int, default=50, help="clips per speaker")
    s.add_argument("--duration", type=float, default=4.0, help="seconds per clip")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth_corpus)

    s = sub.add_parser("train-predictor", help="train the likability predictor and fit calibration")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--ir-dir", help="impulse responses for reverb augmentation")
    s.add_argument("--epochs", type=int)
    s.set_defaults(func=cmd_train_predictor)

    s = sub.add_parser("annotate", help="attach calibrated predictions to every manifest record")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--calibration", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="annotated manifest (JSON Lines)")
    s.add_argument("--rejects", help="rejects sidecar (default: <out>.rejects.jsonl)")
    s.set_defaults(func=cmd_annotate)

    s = sub.add_parser("fit-units", help="fit a mini-batch k-means codebook")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="codebook file")
    s.add_argument("--k", type=int)
    s.add_argument("--splits", default="train,val")
    s.set_defaults(func=cmd_fit_units)

    s = sub.add_parser("tokenize", help="write deduplicated unit strings as JSON Lines")
    s.add_argument("--codebook", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_tokenize)

    s = sub.add_parser("train-converter", help="train the unit-to-mel converter")
    s.add_argument("--codebook", required=True)
    s.add_argument("--manifest", required=True, help="annotated manifest")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--splits", default="train,val")
    s.add_argument("--steps", type=int)
    s.add_argument("--scale", type=float, help=f"rating scale during training (default {conv.TRAIN_SCALE})")
    s.set_defaults(func=cmd_train_converter)

    s = sub.add_parser("convert", help="convert one utterance towards a target likability")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--codebook", required=True)
    s.add_argument("--source", required=True, help="WAV file or LKBF feature matrix")
    s.add_argument("--speaker", help="speaker embedding (LKBE); WAV sources fall back to a mel embedding")
    s.add_argument("--target", required=True, help="one value or four comma-separated values")
    s.add_argument("--scale", type=float, help=f"rating scale (default {conv.INFERENCE_SCALE})")
    s.add_argument("--out", required=True)
    s.add_argument("--wav", action="store_true", help="vocode with Griffin-Lim and write PCM16 WAV")
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("evaluate", help="sweep / content / similarity / predictor reports")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="report directory")
    s.add_argument("--splits", default="test")
    s.add_argument("--limit", type=int, help="evaluate only the first N records")
    s.add_argument("--checkpoint", help="predictor checkpoint")
    s.add_argument("--calibration", help="calibration file")
    s.add_argument("--converter", help="converter checkpoint")
    s.add_argument("--codebook")
    s.add_argument("--scale", type=float)
    s.add_argument("--format", choices=("csv", "json"), default="csv")
    s.add_argument("--sweep", action="store_true")
    s.add_argument("--content", action="store_true")
    s.add_argument("--similarity", action="store_true")
    s.add_argument("--predictor-report", action="store_true")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("gradcheck", help="finite-difference check of predictor and converter gradients")
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--max-elems", type=int, default=None, help="sample at most N entries per tensor")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        args.n_threads = _threads(args, cfg)
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
