"""Train the likability predictor on a small synthetic corpus and print its report.

The synthetic corpus plants each clip's rating as a monotone function of its
spectral tilt, so a working predictor should rank the test clips almost
perfectly. Takes well under a minute on one CPU core.

    python3 demos/predict_likability.py [work_dir]
"""

import sys
import tempfile
from pathlib import Path

import numpy as np

from voicelike import audio, manifest, synth
from voicelike import evalharness as ev
from voicelike import predictor as pred
from voicelike.augment import load_impulse_responses


def main(work: Path):
    cfg = synth.SynthConfig(n_speakers=4, clips_per_speaker=30, duration_sec=2.0, seed=0)
    synth.generate_corpus(work, cfg)
    records = manifest.read_manifest(work / "manifest.jsonl")
    print(f"{len(records)} clips; splits:", {s: len(manifest.split(records, s)) for s in manifest.SPLITS})

    # augmentation draws reverb from the corpus' own impulse responses
    irs = load_impulse_responses(work / "irs")
    model, history = pred.train(pred.build_model(seed=0), records, pred.TrainConfig(epochs=12, crop_sec=2.0),
                                irs=irs)
    best = max(history, key=lambda h: h["val_srcc"])
    print(f"best epoch {best['epoch']}: validation SRCC {best['val_srcc']:.3f}")

    # calibration maps raw outputs onto the validation ratings' mean and spread
    mel_cfg = audio.MelConfig()
    val = manifest.split(records, "val")
    raw = pred.predict_many(model, [audio.load_mel(r["audio"], mel_cfg) for r in val])
    calib = pred.fit_calibration(raw, [r["ratings"] for r in val])

    report = ev.predictor_report(model, calib, records, mel_cfg, split="test")
    print(f"\n{'group':<8}" + "".join(f"{c:>9}" for c in ev.PREDICTOR_COLUMNS))
    for row in report.rows:
        print(f"{row['group']:<8}" + "".join(f"{row[c]:>9.3f}" for c in ev.PREDICTOR_COLUMNS))
    print(f"\nliked/disliked accuracy {report.meta['accuracy']:.3f}, F1 {report.meta['f1']:.3f}")

    clip = manifest.split(records, "test")[0]
    rating = pred.apply_calibration(calib, pred.predict_raw(model, audio.load_mel(clip["audio"], mel_cfg)))
    print(f"clip {clip['id']}: predicted {np.round(rating, 2).tolist()}, "
          f"planted {np.round(clip['ratings'], 2).tolist()} -> {pred.classify_liked(rating)}")


if __name__ == "__main__":
    if len(sys.argv) > 1:
        main(Path(sys.argv[1]))
    else:
        with tempfile.TemporaryDirectory() as tmp:
            main(Path(tmp))
