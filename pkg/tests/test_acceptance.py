"""Acceptance suite: one test (or test group) per acceptance criterion.

Each criterion records a PASS/FAIL line that is printed in the pytest
terminal summary (see conftest.py). Budgets are measured as process CPU time.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from voicelike import audio, manifest, metrics, synth, units
from voicelike import converter as conv
from voicelike import evalharness as ev
from voicelike import predictor as pred
from voicelike import tensorkit as tk
from voicelike.cli import main

from oracles import (eer_brute, exact_kendall_tau_b, exact_pearson, exact_spearman, levenshtein,
                     lloyd_kmeans)

RESULTS = []  # (criterion, ok, summary) in run order, printed by conftest


def record(num, title, ok, detail):
    line = f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}"
    RESULTS.append(line)
    print(line)
    return ok


class cpu_timer:
    def __enter__(self):
        self.start = time.process_time()
        return self

    def __exit__(self, *exc):
        self.seconds = time.process_time() - self.start


# ---------------------------------------------------------------------------
# 1. Gradient fidelity


def layer_checks(rng):
    """(name, loss_fn, params) for every differentiable building block."""
    def p(*shape):
        return tk.parameter(rng.normal(size=shape))

    x, xs, xd = p(3, 20, 6), p(3, 20, 6), p(9, 6)
    w3, w5, b5 = p(18, 5), p(30, 5), p(5)
    wd, bd, wp = p(6, 4), p(4), p(12, 5)
    wc, bc, table = p(18, 6), p(6), p(7, 6)
    yd, ys = rng.normal(size=(9, 4)), rng.normal(size=(3, 5))
    counts = [2, 1, 3, 1]
    return [
        ("dense", lambda: tk.mse(tk.dense(xd, wd, bd), yd), [xd, wd, bd]),
        ("tdnn context {-2,0,2}", lambda: tk.mean(tk.relu(tk.tdnn_layer(x, (-2, 0, 2), w3, b5))), [x, w3, b5]),
        ("tdnn context {-6..6 step 3}", lambda: tk.mean(tk.tdnn_layer(x, (-6, -3, 0, 3, 6), w5, b5)),
         [x, w5, b5]),
        ("stats pooling", lambda: tk.mse(tk.dense(tk.stats_pooling(xs), wp, b5), ys), [xs, wp, b5]),
        ("conv1d same", lambda: tk.mean(tk.relu(tk.conv1d_same(xd, wc, bc, 3))), [xd, wc, bc]),
        ("embedding + repeat", lambda: tk.mean(tk.mul(tk.repeat_frames(tk.embedding(table, [1, 4, 4, 6]), counts),
                                                       tk.repeat_frames(tk.embedding(table, [0, 2, 3, 5]), counts))),
         [table]),
        ("add / scale / mul", lambda: tk.tensor_sum(tk.mul(tk.add(xd, tk.scale(xd, 2.5)), xd)), [xd]),
    ]


def test_c1_gradient_fidelity():
    rng = np.random.default_rng(0)
    errors = {}
    with cpu_timer() as t:
        for name, fn, params in layer_checks(rng):
            errors[name] = tk.fd_check(fn, params)
        # full-size predictor, every parameter entry
        model = pred.build_model(seed=1).astype(np.float64)
        mel, target = rng.normal(size=(2, 25, 80)), rng.normal(size=(2, 4))
        errors["predictor (all entries)"] = tk.fd_check(lambda: tk.mse(model.forward(mel), target),
                                                        model.parameters())
        # full-size converter; sampled entries per tensor, 60 distinct tokens in use
        c = conv.ConverterModel(conv.ConverterConfig(seed=1), dtype=np.float64)
        c.params["mel.weight"].data[...] = rng.normal(0, 0.05, c.params["mel.weight"].shape)
        ids = rng.permutation(100)[:60]
        runs = rng.integers(1, 3, 60)
        ex = conv.Example("x", ids, runs, rng.normal(size=(runs.sum(), 80)), rng.normal(size=192),
                          rng.uniform(-1, 1, 4))
        errors["converter (96 entries/tensor)"] = tk.fd_check(lambda: conv.converter_loss(c, ex, 1.0)[0],
                                                              c.parameters(), max_elems=96)
    worst = max(errors.values())
    ok = worst < 1e-4 and t.seconds < 30
    record(1, "gradient fidelity", ok, f"max rel err {worst:.2e} over {len(errors)} checks in {t.seconds:.1f}s "
           f"(tol 1e-4, budget 30s)")
    assert worst < 1e-4, errors
    assert t.seconds < 30


# ---------------------------------------------------------------------------
# 2. Calibration contract


def calibration_sets(n_sets=200, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(n_sets):
        n = int(rng.integers(5, 60))
        t = np.clip(rng.normal(0, 0.5, (n, 4)), -1, 1)
        p = rng.uniform(0.1, 3) * t + rng.normal(0, rng.uniform(0.05, 1), (n, 4)) + rng.normal(0, 2)
        yield p, t


def test_c2_calibration_moments_and_rank_metrics():
    worst_moment = 0.0
    rank_ok = True
    for p, t in calibration_sets():
        y = pred.apply_calibration(pred.fit_calibration(p, t), p)
        worst_moment = max(worst_moment, np.abs(y.mean(0) - t.mean(0)).max(), np.abs(y.std(0) - t.std(0)).max())
        for g in range(4):
            rank_ok &= metrics.spearman_srcc(y[:, g], t[:, g]) == metrics.spearman_srcc(p[:, g], t[:, g])
            rank_ok &= metrics.kendall_tau(y[:, g], t[:, g]) == metrics.kendall_tau(p[:, g], t[:, g])
    ok = worst_moment < 1e-9 and rank_ok
    record("2a", "calibration moments, SRCC/KTAU unchanged", ok,
           f"max moment error {worst_moment:.1e} (tol 1e-9); SRCC and KTAU bit-identical: {rank_ok}")
    assert worst_moment < 1e-9
    assert rank_ok


def test_c2_lcc_equal_up_to_rounding():
    worst = 0.0
    for p, t in calibration_sets():
        y = pred.apply_calibration(pred.fit_calibration(p, t), p)
        for g in range(4):
            worst = max(worst, abs(metrics.pearson_lcc(p[:, g], t[:, g]) - metrics.pearson_lcc(y[:, g], t[:, g])))
    assert worst < 1e-13


@pytest.mark.xfail(strict=True, reason="calibrated values are roundings of the exact affine image, so their "
                                        "exactly rounded LCC can differ in the last bits; see README")
def test_c2_lcc_bit_identical():
    same = total = 0
    for p, t in calibration_sets():
        y = pred.apply_calibration(pred.fit_calibration(p, t), p)
        for g in range(4):
            total += 1
            same += metrics.pearson_lcc(p[:, g], t[:, g]) == metrics.pearson_lcc(y[:, g], t[:, g])
    record("2b", "calibration leaves LCC bit-identical", same == total,
           f"{same}/{total} group LCCs bit-identical (the rest differ by < 1e-13; expected failure)")
    assert same == total


# ---------------------------------------------------------------------------
# 3. Metric oracles


def test_c3_metric_oracles():
    rng = np.random.default_rng(3)
    mismatches = {"LCC": 0, "SRCC": 0, "KTAU": 0, "CER": 0, "EER": 0}
    n_inst = 1000
    with cpu_timer() as t:
        done = 0
        while done < n_inst:
            n = int(rng.integers(2, 9))
            # small integer grids give plenty of ties; half the draws use dyadic fractions
            scale = 1.0 if rng.random() < 0.5 else 1 / 8
            p = (rng.integers(-3, 4, n) * scale).tolist()
            q = (rng.integers(-3, 4, n) * scale).tolist()
            if len(set(p)) < 2 or len(set(q)) < 2:
                continue
            done += 1
            mismatches["LCC"] += metrics.pearson_lcc(p, q) != exact_pearson(p, q)
            mismatches["SRCC"] += metrics.spearman_srcc(p, q) != exact_spearman(p, q)
            mismatches["KTAU"] += metrics.kendall_tau(p, q) != exact_kendall_tau_b(p, q)
        for _ in range(n_inst):
            a = rng.integers(0, 4, rng.integers(1, 9)).tolist()
            b = rng.integers(0, 4, rng.integers(0, 9)).tolist()
            mismatches["CER"] += metrics.cer(a, b) != levenshtein(a, b) / len(a)
            g = (rng.integers(0, 6, rng.integers(1, 9)) / 4).tolist()
            i = (rng.integers(0, 6, rng.integers(1, 9)) / 4).tolist()
            mismatches["EER"] += metrics.compute_eer(g, i) != eer_brute(g, i)
    ok = not any(mismatches.values()) and t.seconds < 10
    record(3, "metric oracles", ok, f"{n_inst} instances per metric, mismatches {mismatches}, {t.seconds:.1f}s "
           f"(budget 10s)")
    assert not any(mismatches.values()), mismatches
    assert t.seconds < 10


# ---------------------------------------------------------------------------
# 4. Dedup round trip


def test_c4_dedup_round_trip():
    rng = np.random.default_rng(4)
    bad = 0
    for _ in range(10_000):
        x = rng.integers(0, rng.integers(1, 10), rng.integers(0, 40))
        bad += not np.array_equal(units.expand_runs(units.dedup_runs(x)).ids, x)
    u = units.dedup_runs([13, 7, 7, 21, 21, 5])
    example = u.ids.tolist() == [13, 7, 21, 5] and u.run_lengths.tolist() == [1, 2, 2, 1]
    ok = bad == 0 and example
    record(4, "dedup round trip", ok, f"{bad} failures on 10^4 sequences; [13,7,7,21,21,5] -> {u.ids.tolist()}")
    assert bad == 0 and example


# ---------------------------------------------------------------------------
# 5. k-means quality


def test_c5_kmeans_quality():
    worst = 0.0
    with cpu_timer() as t:
        for k in (2, 4, 8):
            for seed in range(5):
                rng = np.random.default_rng(1000 * k + seed)
                centres = rng.uniform(-10, 10, (k, 2))
                X = centres[rng.integers(k, size=1000)] + rng.normal(size=(1000, 2))
                cb = units.fit_minibatch_kmeans(X, k, batch_size=100, seed=seed)
                worst = max(worst, units.inertia(cb, X) / lloyd_kmeans(X, k, seed=seed))
    ok = worst <= 1.10 and t.seconds < 60
    record(5, "k-means quality", ok, f"worst mini-batch / Lloyd inertia ratio {worst:.4f} (limit 1.10) over 15 fits, "
           f"{t.seconds:.1f}s (budget 60s)")
    assert worst <= 1.10
    assert t.seconds < 60


# ---------------------------------------------------------------------------
# 6 and 9. Synthetic pipeline through the command line

E2E_CONFIG = {"seed": 0}  # every other setting at its default


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    work = tmp_path_factory.mktemp("e2e")
    cfg_path = work / "config.json"
    cfg_path.write_text(json.dumps(E2E_CONFIG))
    corpus = work / "corpus"
    stages = {}

    def run(name, *argv):
        with cpu_timer() as t:
            code = main(["--config", str(cfg_path), *argv])
        stages[name] = t.seconds
        assert code == 0, f"{name} exited with {code}"

    run("synth-corpus", "synth-corpus", "--out", str(corpus), "--speakers", "6", "--clips", "50")
    run("train-predictor", "train-predictor", "--manifest", str(corpus / "manifest.jsonl"),
        "--out", str(work / "pred"), "--ir-dir", str(corpus / "irs"))
    run("annotate", "annotate", "--checkpoint", str(work / "pred/predictor.lkbl"),
        "--calibration", str(work / "pred/calibration.json"), "--manifest", str(corpus / "manifest.jsonl"),
        "--out", str(work / "annotated.jsonl"))
    run("fit-units", "fit-units", "--manifest", str(work / "annotated.jsonl"), "--out", str(work / "units.lkbc"))
    run("train-converter", "train-converter", "--codebook", str(work / "units.lkbc"),
        "--manifest", str(work / "annotated.jsonl"), "--out", str(work / "conv"))
    run("evaluate", "evaluate", "--manifest", str(work / "annotated.jsonl"), "--out", str(work / "reports"),
        "--splits", "test", "--format", "json", "--checkpoint", str(work / "pred/predictor.lkbl"),
        "--calibration", str(work / "pred/calibration.json"), "--converter", str(work / "conv/converter.lkbl"),
        "--codebook", str(work / "units.lkbc"), "--sweep")
    return work, corpus, stages


def test_c6_predictor_learnability(e2e):
    work, corpus, stages = e2e
    recs = manifest.read_manifest(corpus / "manifest.jsonl")
    counts = [sum(r["split"] == s for r in recs) for s in ("train", "val", "test")]
    model = pred.PredictorModel.load(work / "pred/predictor.lkbl")
    calib = pred.CalibrationParams.from_dict(json.loads((work / "pred/calibration.json").read_text()))
    test = manifest.split(recs, "test")
    cfg = audio.MelConfig()
    p = pred.apply_calibration(calib, pred.predict_many(model, [audio.load_mel(r["audio"], cfg) for r in test]))
    t = np.array([r["ratings"] for r in test])
    srcc = pred.pooled_srcc(p, t)
    acc, f1 = metrics.accuracy_f1([pred.classify_liked(r) for r in p], [pred.classify_liked(r) for r in t])
    secs = stages["train-predictor"]
    ok = counts == [200, 50, 50] and srcc >= 0.9 and acc >= 0.9 and secs < 300
    record(6, "predictor learnability", ok, f"splits {counts}; test SRCC {srcc:.3f} (>= 0.9), accuracy {acc:.3f} "
           f"(>= 0.9), F1 {f1:.3f}; training {secs:.0f}s CPU (budget 300s)")
    assert counts == [200, 50, 50]
    assert srcc >= 0.9 and acc >= 0.9
    assert secs < 300


def test_c9_end_to_end_control(e2e):
    work, _, stages = e2e
    sweep = ev.load_report(next((work / "reports").glob("sweep_*.json")))
    rho = sweep.meta["spearman_target_vs_mean"]
    curve = [r["mean"] for r in sweep.rows if r["utterance"] == "ALL"]
    total = sum(stages.values())
    ok = rho >= 0.8 and total < 1800
    record(9, "end-to-end control", ok, f"Spearman(target, mean prediction) {rho:.3f} (>= 0.8); curve "
           f"{np.round(curve, 3).tolist()}; pipeline {total:.0f}s CPU (budget 1800s) "
           f"[{', '.join(f'{k} {v:.0f}s' for k, v in stages.items())}]")
    assert rho >= 0.8
    assert total < 1800


# ---------------------------------------------------------------------------
# 7. Conditioning gate


def test_c7_conditioning_gate():
    rng = np.random.default_rng(7)
    model = conv.ConverterModel(conv.ConverterConfig(seed=7))
    # a zero-initialised output head would make the gate trivially true
    model.params["mel.weight"].data[...] = rng.normal(0, 0.1, model.params["mel.weight"].shape)
    ids, spk = rng.integers(0, 100, 30), rng.normal(size=192)
    durations = rng.integers(1, 5, 30)
    ref = conv.convert_units(model, ids, spk, 0.0, s=0.0, durations=durations).frames
    gate = all(np.array_equal(conv.convert_units(model, ids, spk, t, s=0.0, durations=durations).frames, ref)
               for t in list(ev.TARGET_GRID) + [[2, -2, 0.7, -0.1]])
    # predicted durations must not depend on the target either
    ref_pred = conv.convert_units(model, ids, spk, 0.0, s=0.0).frames
    gate &= all(np.array_equal(conv.convert_units(model, ids, spk, t, s=0.0).frames, ref_pred) for t in (-2.0, 2.0))
    linear = True
    for target in ([0.3, -1.2, 2.0, 0.5], [-2.0] * 4):
        base, unit = model.condition_terms(ids, spk, target, 1.0)
        for a in (0.0, 0.5, 1.0, 2.5, -1.75):
            base_a, r_a = model.condition_terms(ids, spk, target, a)
            h = model.pre_encoder(ids, spk, target, a).data
            linear &= np.array_equal(r_a.data, np.float32(a) * unit.data)
            linear &= np.array_equal(h, base.data + np.float32(a) * unit.data)
    still_conditions = not np.array_equal(conv.convert_units(model, ids, spk, 2.0, s=1.0, durations=durations).frames,
                                          conv.convert_units(model, ids, spk, -2.0, s=1.0, durations=durations).frames)
    ok = gate and linear and still_conditions
    record(7, "conditioning gate", ok, f"s=0 outputs bit-identical across 10 targets: {gate}; pre-encoder exactly "
           f"linear in s: {linear}; s=1 outputs depend on target: {still_conditions}")
    assert gate and linear and still_conditions


# ---------------------------------------------------------------------------
# 8. Converter memorisation

TOY_STEPS = 50_000


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    synth.generate_corpus(out, synth.SynthConfig(n_speakers=4, clips_per_speaker=5, duration_sec=1.0, seed=1))
    recs = manifest.read_manifest(out / "manifest.jsonl")
    cfg = audio.MelConfig()
    cb = units.fit_minibatch_kmeans([units.internal_features(audio.load_mel(r["audio"], cfg).frames)
                                     for r in recs], 100, seed=0)
    examples = [conv.make_example(r, cb, cfg) for r in recs]
    with cpu_timer() as t:
        model, _ = conv.train_converter(conv.ConverterModel(conv.ConverterConfig(vocab=100)), examples,
                                        conv.ConverterTrainConfig(steps=TOY_STEPS))
    return model, cb, examples, t.seconds


def test_c8_converter_memorisation(toy):
    model, _, examples, secs = toy
    fit = conv.evaluate_fit(model, examples)
    ok = len(examples) == 20 and fit["mel_mse"] < 0.01 and fit["duration_mae"] <= 1.0 and secs < 600
    record(8, "converter memorisation", ok, f"20 utterances, {TOY_STEPS} steps: mel MSE {fit['mel_mse']:.4f} "
           f"(< 0.01), duration MAE {fit['duration_mae']:.3f} frames (<= 1); {secs:.0f}s CPU (budget 600s)")
    assert len(examples) == 20
    assert fit["mel_mse"] < 0.01 and fit["duration_mae"] <= 1.0
    assert secs < 600


def test_overfit_model_reconstructs_with_predicted_durations(toy):
    model, cb, examples, _ = toy
    errs = []
    for ex in examples:
        mel = conv.convert_units(model, ex.ids, ex.speaker, ex.rating, s=1.0, durations=ex.runs).frames
        errs.append(np.mean((mel - ex.mel) ** 2))
    assert np.mean(errs) < 0.02
    content = ev.content_proxy_eval(model, cb, examples, targets=(0.0,), s=1.0, teacher_forced=True)
    assert content.rows[0]["unit_cer"] < 0.2


# ---------------------------------------------------------------------------
# 10. Speaker-similarity harness


def test_c10_speaker_similarity():
    rng = np.random.default_rng(10)
    centres = rng.normal(size=(8, 192))
    reference = {f"spk{i}": [c + 0.05 * rng.normal(size=192) * np.linalg.norm(c) / np.sqrt(192)
                             for _ in range(6)] for i, c in enumerate(centres)}
    conversions = [(f"spk{i}_u{j}", f"spk{i}", t, c + 0.05 * rng.normal(size=192) * np.linalg.norm(c) / np.sqrt(192))
                   for i, c in enumerate(centres) for j in range(3) for t in ev.TARGET_GRID]
    rep = ev.speaker_similarity_eval(conversions, reference)
    shown = rep.to_report().meta
    ok = rep.eer < 0.05 and rep.all_pass and shown["reference_threshold"] == 0.48
    record(10, "speaker-similarity harness", ok, f"EER {rep.eer:.4f} (< 0.05); EER threshold {rep.threshold:.4f} "
           f"vs reference 0.48; {sum(r['pass'] for r in rep.rows)}/{len(rep.rows)} same-speaker conversions pass")
    assert rep.eer < 0.05 and rep.all_pass
    assert shown["reference_threshold"] == 0.48


# ---------------------------------------------------------------------------
# 11. Optional corpus path

CORPUS_ENV = "VOICELIKE_CORPUS_MANIFEST"
REFERENCE_NUMBERS = {"MSE": 0.08, "LCC": 0.46, "SRCC": 0.49}  # external reference values, displayed only
REFERENCE_ACCURACY, REFERENCE_F1 = 0.74, 0.70


def test_c11_corpus_report(tmp_path):
    if not os.environ.get(CORPUS_ENV):
        RESULTS.append(f"criterion 11 SKIP  corpus predictor report: non-gating; set {CORPUS_ENV} to run it")
        pytest.skip(f"set {CORPUS_ENV} to a rated corpus manifest")
    path = Path(os.environ[CORPUS_ENV])
    recs = manifest.read_manifest(path)
    ckpt, cal = os.environ.get("VOICELIKE_CORPUS_CHECKPOINT"), os.environ.get("VOICELIKE_CORPUS_CALIBRATION")
    if ckpt and cal:
        model = pred.PredictorModel.load(ckpt)
        calib = pred.CalibrationParams.from_dict(json.loads(Path(cal).read_text()))
    else:
        model, _ = pred.train(pred.build_model(), recs)
        val = manifest.split(recs, "val")
        raw = pred.predict_many(model, [audio.load_mel(r["audio"], audio.MelConfig()) for r in val])
        calib = pred.fit_calibration(raw, [r["ratings"] for r in val])
    report = ev.predictor_report(model, calib, recs)
    ev.emit_report(report, tmp_path / "predictor.csv")
    complete = all(set(ev.PREDICTOR_COLUMNS) <= set(row) for row in report.rows) and len(report.rows) == 5
    all_row = report.rows[-1]
    record(11, "corpus predictor report", complete, "; ".join(
        f"{k} {all_row[k]:.3f} (reference {v})" for k, v in REFERENCE_NUMBERS.items())
        + f"; accuracy {report.meta['accuracy']:.3f} (reference {REFERENCE_ACCURACY}), "
          f"F1 {report.meta['f1']:.3f} (reference {REFERENCE_F1})")
    assert complete
