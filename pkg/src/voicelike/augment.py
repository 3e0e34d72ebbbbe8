"""Waveform-domain augmentation used while training the likability predictor.

Four transforms: silence padding, reverberation, additive white noise and
time reversal. ``augment_chain`` applies each independently with its own
probability, always in that order.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .audio import Waveform, load_wav, resample, to_mono


@dataclass(frozen=True)
class AugmentConfig:
    max_pad_sec: float = 0.5
    snr_db_range: tuple[float, float] = (10.0, 40.0)
    pad_prob: float = 0.5
    reverb_prob: float = 0.5
    noise_prob: float = 0.5
    reverse_prob: float = 0.5
    ir_dir: str | None = None

    def __post_init__(self):
        for name in ("pad_prob", "reverb_prob", "noise_prob", "reverse_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")
        lo, hi = self.snr_db_range
        if lo > hi:
            raise ValueError("snr_db_range must be (min, max) with min <= max")
        if self.max_pad_sec < 0:
            raise ValueError("max_pad_sec must be >= 0")
        object.__setattr__(self, "snr_db_range", (float(lo), float(hi)))


@dataclass
class ImpulseResponse:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.samples.size == 0:
            raise ValueError("empty impulse response")

    def at_rate(self, rate: int) -> "ImpulseResponse":
        if rate == self.sample_rate:
            return self
        return ImpulseResponse(resample(Waveform(self.samples, self.sample_rate), rate).mono, rate)


def load_impulse_responses(ir_dir) -> list[ImpulseResponse]:
    """All ``*.wav`` files under ``ir_dir`` in sorted order (so seeded sampling is stable)."""
    if ir_dir is None:
        return []
    irs = []
    for p in sorted(Path(ir_dir).glob("*.wav")):
        w = to_mono(load_wav(p))
        irs.append(ImpulseResponse(w.mono, w.sample_rate))
    return irs


def _map_channels(w: Waveform, fn) -> Waveform:
    return Waveform(np.stack([fn(ch.astype(np.float64)) for ch in w.samples]), w.sample_rate)


def pad_silence(w: Waveform, pre_samples: int, post_samples: int) -> Waveform:
    if pre_samples < 0 or post_samples < 0:
        raise ValueError("padding must be non-negative")
    return Waveform(np.pad(w.samples, ((0, 0), (pre_samples, post_samples))), w.sample_rate)


def add_white_noise(w: Waveform, snr_db: float, seed) -> Waveform:
    """Add seeded Gaussian noise rescaled so the realised SNR equals ``snr_db``."""
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    rng = np.random.default_rng(seed)

    def _noisy(x):
        p_sig = np.mean(x ** 2)
        if p_sig <= 0:
            raise ValueError("cannot set an SNR on an all-zero signal")
        noise = rng.standard_normal(x.shape)
        noise *= np.sqrt(p_sig / 10.0 ** (snr_db / 10.0) / np.mean(noise ** 2))
        return x + noise

    return _map_channels(w, _noisy)


def convolve_reverb(w: Waveform, ir: ImpulseResponse, normalize: bool = True) -> Waveform:
    """Convolve with ``ir``, truncate to the input length and restore the input peak."""
    h = ir.at_rate(w.sample_rate).samples

    def _rev(x):
        y = signal.convolve(x, h)[: len(x)]
        if normalize:
            peak_in, peak_out = np.max(np.abs(x)), np.max(np.abs(y))
            if peak_out > 0:
                y *= peak_in / peak_out
        return y

    return _map_channels(w, _rev)


def time_reverse(w: Waveform) -> Waveform:
    return Waveform(w.mono[::-1].copy(), w.sample_rate)


@dataclass(frozen=True)
class AugmentPlan:
    """The random decisions one ``augment_chain`` call makes. ``None`` means skipped."""

    pad: tuple[int, int] | None
    ir_index: int | None
    noise: tuple[float, int] | None  # (snr_db, noise seed)
    reverse: bool


def draw_plan(cfg: AugmentConfig, seed, sample_rate: int, n_irs: int) -> AugmentPlan:
    rng = np.random.default_rng(seed)
    # every draw happens unconditionally so that toggling one probability
    # doesn't reshuffle the parameters of the others
    u = rng.random(4)
    max_pad = int(round(cfg.max_pad_sec * sample_rate))
    pad = tuple(int(v) for v in rng.integers(0, max_pad + 1, size=2))
    ir_index = int(rng.integers(0, max(n_irs, 1)))
    snr = float(rng.uniform(*cfg.snr_db_range))
    noise_seed = int(rng.integers(0, 2 ** 63 - 1))
    return AugmentPlan(
        pad=pad if u[0] < cfg.pad_prob else None,
        ir_index=ir_index if (u[1] < cfg.reverb_prob and n_irs > 0) else None,
        noise=(snr, noise_seed) if u[2] < cfg.noise_prob else None,
        reverse=bool(u[3] < cfg.reverse_prob),
    )


def apply_plan(w: Waveform, plan: AugmentPlan, irs=()) -> Waveform:
    if plan.pad is not None:
        w = pad_silence(w, *plan.pad)
    if plan.ir_index is not None:
        w = convolve_reverb(w, irs[plan.ir_index])
    if plan.noise is not None and np.any(w.samples):
        w = add_white_noise(w, *plan.noise)
    if plan.reverse:
        w = time_reverse(w)
    return w


def augment_chain(w: Waveform, cfg: AugmentConfig, seed, irs=()) -> Waveform:
    """pad -> reverb -> noise -> reverse, each with its configured probability.

    Reverb is skipped when no impulse responses are supplied.
    """
    return apply_plan(w, draw_plan(cfg, seed, w.sample_rate, len(irs)), irs)
