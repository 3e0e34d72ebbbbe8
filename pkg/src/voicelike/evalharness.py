"""Objective evaluations of the predictor and of likability-controlled conversion.

Reports are small tables (columns + rows + metadata) that serialise to CSV or
to a versioned JSON object, ready for plotting elsewhere.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audio, metrics, units
from . import converter as conv
from . import predictor as pred
from .errors import DataError

REPORT_VERSION = 1
TARGET_GRID = tuple(np.round(np.arange(-2.0, 2.0001, 0.5), 6).tolist())
REFERENCE_THRESHOLD = 0.48  # external same-speaker threshold (ECAPA-TDNN on JTES), shown for comparison
PREDICTOR_COLUMNS = ("MSE", "Std", "LCC", "SRCC", "KTAU", "GT Std")


@dataclass
class Report:
    kind: str
    columns: list
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"version": REPORT_VERSION, "kind": self.kind, "columns": list(self.columns),
                "rows": [dict(r) for r in self.rows], "meta": dict(self.meta)}

    @classmethod
    def from_dict(cls, d) -> "Report":
        if d.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('version')!r}")
        return cls(d["kind"], list(d["columns"]), [dict(r) for r in d["rows"]], dict(d.get("meta", {})))


def emit_report(report: Report, path, fmt: str | None = None) -> Path:
    """Write ``report`` as CSV (header + one row per record) or JSON."""
    path = Path(path)
    fmt = fmt or path.suffix.lstrip(".")
    if fmt == "csv":
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(report.columns), extrasaction="ignore")
            writer.writeheader()
            writer.writerows(report.rows)
    elif fmt == "json":
        path.write_text(json.dumps(report.to_dict(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def load_report(path) -> Report:
    return Report.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def report_name(kind: str, seed: int, cfg_hash: str, fmt: str) -> str:
    return f"{kind}_seed{seed}_{cfg_hash}.{fmt}"


# ---------------------------------------------------------------------------
# Predictor report (per-group metrics table)


def _group_row(name, p, t):
    return {
        "group": name,
        "MSE": metrics.mse(p, t),
        "Std": float(np.std(p)),
        "LCC": metrics.pearson_lcc(p, t),
        "SRCC": metrics.spearman_srcc(p, t),
        "KTAU": metrics.kendall_tau(p, t),
        "GT Std": float(np.std(t)),
    }


def predictor_metrics(predictions, targets, threshold: float = 0.0) -> Report:
    """Per-group rows plus an ``All`` row (mean over the four groups), and
    liked/disliked accuracy, F1 and the SRCC pooled over all groups in the
    metadata."""
    p = np.asarray(predictions, dtype=np.float64).reshape(-1, pred.N_GROUPS)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, pred.N_GROUPS)
    rows = [_group_row(name, p[:, g], t[:, g]) for g, name in enumerate(pred.GROUP_NAMES)]
    rows.append(_group_row("All", p.mean(axis=1), t.mean(axis=1)))
    acc, f1 = metrics.accuracy_f1([pred.classify_liked(r, threshold) for r in p],
                                  [pred.classify_liked(r, threshold) for r in t])
    return Report("predictor", ["group", *PREDICTOR_COLUMNS], rows,
                  {"accuracy": acc, "f1": f1, "pooled_srcc": pred.pooled_srcc(p, t), "n": int(p.shape[0]), "liked_threshold": threshold})


def predictor_report(model, calib, records, mel_cfg=audio.MelConfig(), split: str | None = "test") -> Report:
    recs = [r for r in records if split is None or r["split"] == split]
    if not recs:
        raise DataError(f"no {split!r} records to evaluate")
    missing = [r["id"] for r in recs if r.get("ratings_orig", r.get("ratings")) is None]
    if missing:
        raise DataError(f"records without ground-truth ratings: {missing[:5]}")
    raw = pred.predict_many(model, [audio.load_mel(r["audio"], mel_cfg) for r in recs])
    targets = [r.get("ratings_orig", r["ratings"]) for r in recs]
    report = predictor_metrics(pred.apply_calibration(calib, raw), targets)
    report.meta["split"] = split
    return report


# ---------------------------------------------------------------------------
# Likability sweep


@dataclass
class SweepReport:
    targets: list
    # (utterance id, target) -> calibrated 4-group prediction
    cells: dict
    # conversions shorter than the predictor's receptive field, edge-padded before scoring
    n_padded: int = 0

    def mean_curve(self) -> np.ndarray:
        """Mean predicted rating over utterances and groups, per target."""
        return np.array([np.mean([self.cells[(u, t)] for u in self.utterances]) for t in self.targets])

    def group_curves(self) -> np.ndarray:
        """(n_targets, 4) per-group mean over utterances."""
        return np.array([np.mean([self.cells[(u, t)] for u in self.utterances], axis=0) for t in self.targets])

    @property
    def utterances(self):
        return list(dict.fromkeys(u for u, _ in self.cells))

    def to_report(self) -> Report:
        cols = ["utterance", "target", *pred.GROUP_NAMES, "mean"]
        rows = []
        for (u, t), v in self.cells.items():
            rows.append({"utterance": u, "target": t, **dict(zip(pred.GROUP_NAMES, map(float, v))),
                         "mean": float(np.mean(v))})
        for t, g, m in zip(self.targets, self.group_curves(), self.mean_curve()):
            rows.append({"utterance": "ALL", "target": t, **dict(zip(pred.GROUP_NAMES, map(float, g))),
                         "mean": float(m)})
        return Report("sweep", cols, rows, {"targets": list(self.targets), "n_padded": self.n_padded})


def likability_sweep(converter_model, predictor_model, calib, codebook, examples,
                     targets=TARGET_GRID, s=conv.INFERENCE_SCALE, mel_cfg=audio.MelConfig(),
                     threads: int = 1) -> SweepReport:
    """Convert each example at every target (same value for all four groups)
    and score the result with the calibrated predictor.

    Conversions shorter than ``predictor.MIN_FRAMES`` are padded by repeating
    their last frame; the count is kept in ``SweepReport.n_padded``.
    """
    if converter_model.cfg.n_mels != mel_cfg.n_mels:
        raise ValueError("converter and predictor mel configurations differ")

    def _cell(job):
        ex, t = job
        frames = conv.convert_units(converter_model, ex.ids, ex.speaker, t, s, mel_cfg=mel_cfg).frames
        short = frames.shape[0] < pred.MIN_FRAMES
        if short:
            frames = np.pad(frames, ((0, pred.MIN_FRAMES - frames.shape[0]), (0, 0)), mode="edge")
        return (ex.id, t), pred.apply_calibration(calib, pred.predict_raw(predictor_model, frames)), short

    jobs = list(itertools.product(examples, targets))
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(_cell, jobs))
    return SweepReport(list(targets), {key: v for key, v, _ in results}, sum(short for *_, short in results))


# ---------------------------------------------------------------------------
# Content preservation proxy


def unit_string(codebook, mel_frames) -> np.ndarray:
    return units.dedup_runs(units.quantize(codebook, units.internal_features(mel_frames))).ids


def content_proxy_eval(converter_model, codebook, examples, targets=TARGET_GRID,
                       s=conv.INFERENCE_SCALE, mel_cfg=audio.MelConfig(), teacher_forced=False) -> Report:
    """CER between the source's deduplicated unit string and that of each
    conversion after re-quantising it through the internal feature path."""
    rows = []
    for t in targets:
        scores = []
        for ex in examples:
            dur = ex.runs if teacher_forced else None
            mel = conv.convert_units(converter_model, ex.ids, ex.speaker, t, s, dur, mel_cfg)
            scores.append(metrics.cer(list(ex.ids), list(unit_string(codebook, mel.frames))))
        rows.append({"target": t, "unit_cer": float(np.mean(scores)), "n": len(scores)})
    return Report("content", ["target", "unit_cer", "n"], rows, {"scale": s, "teacher_forced": teacher_forced})


def transcript_cer(pairs) -> float:
    """Mean CER over (reference, hypothesis) transcript pairs from an external recogniser."""
    return float(np.mean([metrics.cer(r, h) for r, h in pairs]))


# ---------------------------------------------------------------------------
# Speaker similarity


@dataclass
class SimilarityReport:
    rows: list
    threshold: float
    eer: float
    reference_threshold: float = REFERENCE_THRESHOLD

    @property
    def all_pass(self) -> bool:
        return all(r["pass"] for r in self.rows)

    def to_report(self) -> Report:
        return Report("similarity", ["utterance", "speaker", "target", "similarity", "pass"],
                      [dict(r) for r in self.rows],
                      {"eer": self.eer, "threshold": self.threshold,
                       "reference_threshold": self.reference_threshold})


def verification_trials(reference: dict):
    """Genuine / impostor cosine scores over all pairs of reference embeddings."""
    items = [(spk, np.asarray(e)) for spk, embs in reference.items() for e in embs]
    genuine, impostor = [], []
    for (s1, e1), (s2, e2) in itertools.combinations(items, 2):
        (genuine if s1 == s2 else impostor).append(metrics.cosine_similarity(e1, e2))
    return genuine, impostor


def speaker_similarity_eval(conversions, reference: dict) -> SimilarityReport:
    """``conversions``: iterable of (utterance, speaker, target, embedding);
    ``reference``: speaker -> list of reference embeddings.

    Each conversion is compared with the mean reference embedding of its
    speaker; the pass threshold is the EER operating point of the reference
    set's own same/different-speaker trials.
    """
    if not reference:
        raise DataError("no reference embeddings")
    genuine, impostor = verification_trials(reference)
    if not genuine or not impostor:
        raise DataError("speaker verification needs at least two speakers and two references for one of them")
    eer, threshold = metrics.compute_eer(genuine, impostor)
    centroids = {spk: np.mean(np.asarray(embs), axis=0) for spk, embs in reference.items()}
    rows = []
    for utt, spk, target, emb in conversions:
        if spk not in centroids:
            raise DataError(f"no reference embeddings for speaker {spk!r}")
        sim = metrics.cosine_similarity(emb, centroids[spk])
        rows.append({"utterance": utt, "speaker": spk, "target": target, "similarity": sim,
                     "pass": bool(sim >= threshold)})
    return SimilarityReport(rows, threshold, eer)
