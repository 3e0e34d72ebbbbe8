"""Desk-scale synthetic corpus with planted likability.

Each speaker is a harmonic source with its own pitch, formant scaling and
speaking rate. An utterance is a sequence of stationary vowel-like segments;
its likability is planted as a monotone function of spectral tilt (the
exponent ``tilt`` in the harmonic amplitude law ``h ** tilt``), so brighter
voices are rated higher. Per-utterance speaker embeddings are written as
noisy copies of a per-speaker Gaussian centre, standing in for an external
speaker-verification model.

Pitches sit exactly on FFT bin centres (multiples of sample_rate / 1024) so
every stationary segment has a frame-invariant magnitude spectrum.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import formats
from .audio import Waveform, write_wav
from .manifest import write_manifest

# (F1, F2) in Hz and nominal duration in frames
VOWELS = {
    "a": (800.0, 1200.0, 14),
    "i": (300.0, 2300.0, 10),
    "u": (350.0, 800.0, 9),
    "e": (500.0, 1900.0, 12),
    "o": (500.0, 900.0, 13),
    "y": (400.0, 1600.0, 11),
}
GROUP_SCALE = np.array([0.75, 0.65, 0.85, 0.70])
GROUP_OFFSET = np.array([0.0, -0.05, 0.05, 0.0])


@dataclass(frozen=True)
class SynthConfig:
    n_speakers: int = 6
    clips_per_speaker: int = 50
    duration_sec: float = 4.0
    sample_rate: int = 22050
    tilt_range: tuple[float, float] = (-2.0, -0.3)
    rating_noise: float = 0.05
    embed_dim: int = 192
    embed_noise: float = 0.05
    n_irs: int = 3
    split_ratio: tuple[int, int, int] = (4, 1, 1)
    hop: int = 256
    fft_size: int = 1024
    seed: int = 0


def planted_rating(tilt, cfg: SynthConfig = SynthConfig()) -> np.ndarray:
    """Noise-free 4-group rating for a spectral tilt; strictly increasing in tilt."""
    lo, hi = cfg.tilt_range
    z = 2.0 * (np.asarray(tilt, dtype=np.float64) - lo) / (hi - lo) - 1.0
    return np.clip(np.multiply.outer(z, GROUP_SCALE) + GROUP_OFFSET, -1.0, 1.0)


@dataclass
class Speaker:
    name: str
    f0: float
    formant_scale: float
    rate: float
    centre: np.ndarray


def make_speakers(cfg: SynthConfig, rng) -> list[Speaker]:
    bins = np.arange(5, 11)
    f0_bins = rng.choice(bins, size=cfg.n_speakers, replace=cfg.n_speakers > bins.size)
    return [
        Speaker(
            name=f"spk{i:02d}",
            f0=float(b) * cfg.sample_rate / cfg.fft_size,
            formant_scale=float(rng.uniform(0.9, 1.15)),
            rate=float(rng.uniform(0.8, 1.25)),
            centre=rng.standard_normal(cfg.embed_dim),
        )
        for i, b in enumerate(f0_bins)
    ]


def _envelope(f, f1, f2):
    return (0.05 + np.exp(-(((f - f1) / (0.15 * f1 + 60.0)) ** 2))
            + 0.7 * np.exp(-(((f - f2) / (0.1 * f2 + 80.0)) ** 2)))


def render_utterance(spk: Speaker, vowels: str, frames: list[int], tilt: float,
                     cfg: SynthConfig, rng) -> np.ndarray:
    """Sum of phase-continuous harmonics; segments cross-fade over one hop.

    The pitch is a multiple of sample_rate / fft_size, so every harmonic
    completes a whole number of cycles in ``fft_size`` samples and one period
    table per vowel is enough.
    """
    sr, hop, period = cfg.sample_rate, cfg.hop, cfg.fft_size
    n = int(round(cfg.duration_sec * sr))
    harm = np.arange(1, int(0.45 * sr / spk.f0) + 1)
    fh = harm * spk.f0
    phases = rng.uniform(0, 2 * np.pi, size=harm.size)
    basis = np.sin(2 * np.pi * np.outer(fh, np.arange(period)) / sr + phases[:, None])
    tables = {}
    out = np.zeros(n)
    bounds = np.concatenate([[0], np.cumsum(frames) * hop])
    ramp = hop
    for v, start, end in zip(vowels, bounds[:-1], bounds[1:]):
        if start >= n:
            break
        if v not in tables:
            f1, f2, _ = VOWELS[v]
            amp = harm.astype(np.float64) ** tilt * _envelope(fh, f1 * spk.formant_scale,
                                                              f2 * spk.formant_scale)
            tables[v] = amp @ basis
        a, b = max(0, start - ramp), min(n, end + ramp)
        t = np.arange(a, b)
        gain = np.clip(np.minimum(t - (start - ramp), (end + ramp) - t) / (2.0 * ramp), 0.0, 1.0)
        if start == 0:
            gain[t < start + ramp] = 1.0
        out[a:b] += gain * tables[v][t % period]
    return 0.1 * out / np.sqrt(np.mean(out ** 2))


def _segments(spk: Speaker, cfg: SynthConfig, rng):
    total = int(round(cfg.duration_sec * cfg.sample_rate)) // cfg.hop + 1
    vowels, frames = [], []
    names = list(VOWELS)
    while sum(frames) < total:
        v = names[rng.integers(len(names))]
        if vowels and v == vowels[-1]:
            continue
        vowels.append(v)
        frames.append(max(3, int(round(VOWELS[v][2] * spk.rate * rng.uniform(0.9, 1.1)))))
    return "".join(vowels), frames


def synthetic_ir(rng, sample_rate, rt60) -> np.ndarray:
    n = int(rt60 * sample_rate)
    t = np.arange(n) / sample_rate
    ir = rng.standard_normal(n) * np.exp(-6.9 * t / rt60) * 0.3
    ir[0] = 1.0
    return ir


def generate_corpus(out_dir, cfg: SynthConfig = SynthConfig()) -> list[dict]:
    """Write WAVs, embeddings, impulse responses and ``manifest.jsonl`` under ``out_dir``."""
    out = Path(out_dir)
    for sub in ("wavs", "emb", "irs"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    speakers = make_speakers(cfg, rng)

    n_total = cfg.n_speakers * cfg.clips_per_speaker
    ratio = np.asarray(cfg.split_ratio, dtype=np.float64)
    n_train = int(round(n_total * ratio[0] / ratio.sum()))
    n_val = int(round(n_total * ratio[1] / ratio.sum()))
    split_of = np.empty(n_total, dtype=object)
    perm = rng.permutation(n_total)
    split_of[perm[:n_train]] = "train"
    split_of[perm[n_train:n_train + n_val]] = "val"
    split_of[perm[n_train + n_val:]] = "test"

    records = []
    for s, spk in enumerate(speakers):
        for c in range(cfg.clips_per_speaker):
            i = s * cfg.clips_per_speaker + c
            uid = f"{spk.name}_{c:03d}"
            tilt = float(rng.uniform(*cfg.tilt_range))
            vowels, frames = _segments(spk, cfg, rng)
            x = render_utterance(spk, vowels, frames, tilt, cfg, rng)
            ratings = planted_rating(tilt, cfg) + rng.normal(0.0, cfg.rating_noise, size=4)
            emb = spk.centre + rng.normal(0.0, cfg.embed_noise, size=cfg.embed_dim)
            write_wav(out / "wavs" / f"{uid}.wav", Waveform(x, cfg.sample_rate), encoding="float32")
            formats.write_embedding(out / "emb" / f"{uid}.lkbe", emb)
            records.append({
                "id": uid,
                "audio": f"wavs/{uid}.wav",
                "split": str(split_of[i]),
                "ratings": np.clip(ratings, -1.0, 1.0).round(6).tolist(),
                "speaker": spk.name,
                "text": vowels,
                "embedding": f"emb/{uid}.lkbe",
                "tilt": round(tilt, 6),
            })
    for j in range(cfg.n_irs):
        ir = synthetic_ir(rng, cfg.sample_rate, float(rng.uniform(0.15, 0.4)))
        write_wav(out / "irs" / f"ir{j:02d}.wav", Waveform(ir / np.max(np.abs(ir)), cfg.sample_rate),
                  encoding="float32")
    write_manifest(out / "manifest.jsonl", records)
    return records
