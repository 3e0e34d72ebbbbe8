"""From audio to deduplicated unit strings.

Fits a small codebook on log-Mel features of a few synthetic clips, quantises
one clip and collapses repeated ids into (unit, run length) pairs. Runs in a
few seconds.

    python3 demos/discrete_units.py
"""

import tempfile
from pathlib import Path

from voicelike import audio, manifest, synth, units


def main(work: Path):
    synth.generate_corpus(work, synth.SynthConfig(n_speakers=2, clips_per_speaker=4, duration_sec=1.5, seed=3))
    records = manifest.read_manifest(work / "manifest.jsonl")
    mel_cfg = audio.MelConfig()
    feats = [units.internal_features(audio.load_mel(r["audio"], mel_cfg).frames) for r in records]

    cb = units.fit_minibatch_kmeans(feats, k=16, batch_size=256, seed=0)
    print(f"codebook: {cb.k} centroids of dimension {cb.dim}; inertia {units.inertia(cb, feats):.1f}")

    frames = units.quantize(cb, feats[0])
    deduped = units.dedup_runs(frames)
    print(f"{len(frames)} frames -> {len(deduped)} tokens")
    print("frame ids :", frames.ids[:40].tolist())
    print("tokens    :", deduped.ids[:15].tolist())
    print("run length:", deduped.run_lengths[:15].tolist())
    assert units.expand_runs(deduped).ids.tolist() == frames.ids.tolist()

    # the same collapse on a hand-written sequence
    u = units.dedup_runs([13, 7, 7, 21, 21, 5])
    print("\n[13, 7, 7, 21, 21, 5] ->", u.ids.tolist(), "with runs", u.run_lengths.tolist())


if __name__ == "__main__":
    with tempfile.TemporaryDirectory() as tmp:
        main(Path(tmp))
