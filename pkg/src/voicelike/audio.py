"""Waveform I/O and the log-Mel front end.

Frames are taken fully inside the signal (no centre padding), so a signal of
``n`` samples yields ``1 + (n - win) // hop`` frames.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import signal

from .errors import WavFormatError

_FMT_PCM = 1
_FMT_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE


@dataclass
class Waveform:
    """Audio samples stored as a ``(channels, n)`` float32 array."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float32)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"samples must be (channels, n), got shape {x.shape}")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        self.samples = x
        self.sample_rate = int(self.sample_rate)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    def __len__(self) -> int:
        return self.samples.shape[1]

    @property
    def mono(self) -> np.ndarray:
        """The single channel of a mono waveform."""
        if self.channels != 1:
            raise ValueError(f"expected mono waveform, got {self.channels} channels")
        return self.samples[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = 22050
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float = 8000.0
    hop: int = 256
    win: int = 1024
    fft_size: int = 1024
    log_floor: float = 1e-10

    def __post_init__(self):
        if not (0 <= self.f_min < self.f_max <= self.sample_rate / 2):
            raise ValueError("need 0 <= f_min < f_max <= sample_rate/2")
        if not (0 < self.hop <= self.win <= self.fft_size):
            raise ValueError("need 0 < hop <= win <= fft_size")
        if self.n_mels < 1 or self.log_floor <= 0:
            raise ValueError("n_mels must be >= 1 and log_floor > 0")

    def n_frames(self, n_samples: int) -> int:
        if n_samples < self.win:
            return 0
        return 1 + (n_samples - self.win) // self.hop


@dataclass
class MelSpectrogram:
    frames: np.ndarray  # (T, n_mels)
    config: MelConfig = field(default_factory=MelConfig)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# WAV I/O


def load_wav(path) -> Waveform:
    """Read a RIFF/WAVE file holding 16-bit PCM or 32-bit IEEE float samples.

    16-bit values are divided by 32768 so that -32768 maps to exactly -1.0.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavFormatError(f"{path}: truncated {cid!r} chunk")
        if cid == b"fmt ":
            if size < 16:
                raise WavFormatError(f"{path}: fmt chunk too short")
            tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", body[:16])
            if tag == _FMT_EXTENSIBLE:
                if size < 40:
                    raise WavFormatError(f"{path}: truncated WAVE_FORMAT_EXTENSIBLE header")
                (tag,) = struct.unpack("<H", body[24:26])
            fmt = (tag, channels, rate, block_align, bits)
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)

    if fmt is None:
        raise WavFormatError(f"{path}: missing fmt chunk")
    if data is None:
        raise WavFormatError(f"{path}: missing data chunk")
    tag, channels, rate, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise WavFormatError(f"{path}: invalid channel count or sample rate")
    if tag == _FMT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _FMT_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise WavFormatError(f"{path}: unsupported encoding (format tag {tag}, {bits} bits)")
    if block_align != channels * dtype.itemsize:
        raise WavFormatError(f"{path}: inconsistent block alignment")
    n = len(data) // block_align
    if n == 0:
        raise WavFormatError(f"{path}: zero-length data chunk")
    x = np.frombuffer(data[: n * block_align], dtype=dtype).reshape(n, channels).T
    return Waveform(x.astype(np.float32) * np.float32(scale), rate)


def write_wav(path, w: Waveform, encoding: str = "pcm16") -> None:
    """Write ``w`` as 16-bit PCM (``"pcm16"``) or 32-bit float (``"float32"``)."""
    x = w.samples.T  # interleave
    if encoding == "pcm16":
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = _FMT_PCM, 16
    elif encoding == "float32":
        payload = np.ascontiguousarray(x, dtype="<f4").tobytes()
        tag, bits = _FMT_FLOAT, 32
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block = w.channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, w.channels, w.sample_rate, w.sample_rate * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    Path(path).write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)


# ---------------------------------------------------------------------------
# Channel / rate conversion


def to_mono(w: Waveform) -> Waveform:
    if w.channels == 1:
        return w
    return Waveform(w.samples.mean(axis=0, dtype=np.float64), w.sample_rate)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Band-limited polyphase resampling with a Kaiser-windowed sinc filter."""
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    x = w.mono
    if target_rate == w.sample_rate:
        return w
    ratio = Fraction(int(target_rate), w.sample_rate)
    y = signal.resample_poly(x.astype(np.float64), ratio.numerator, ratio.denominator,
                             window=("kaiser", 5.0))
    n_out = int(round(len(x) * target_rate / w.sample_rate))
    if len(y) >= n_out:
        y = y[:n_out]
    else:
        y = np.pad(y, (0, n_out - len(y)))
    return Waveform(y, target_rate)


def prepare(w: Waveform, sample_rate: int) -> Waveform:
    """Mix down to mono and resample, as done for every model input."""
    return resample(to_mono(w), sample_rate)


# ---------------------------------------------------------------------------
# Log-Mel


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def _filterbank(sample_rate, n_fft, n_mels, f_min, f_max):
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs - lo) / (mid - lo)
    down = (hi - freqs) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg: MelConfig) -> np.ndarray:
    """HTK-scale triangular filters with unit peak, shape (n_mels, fft_size//2 + 1)."""
    return _filterbank(cfg.sample_rate, cfg.fft_size, cfg.n_mels, cfg.f_min, cfg.f_max)


@lru_cache(maxsize=16)
def _hann(win):
    w = signal.get_window("hann", win)
    w.setflags(write=False)
    return w


def frame_signal(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n_frames = 1 + (len(x) - win) // hop
    return np.lib.stride_tricks.sliding_window_view(x, win)[: n_frames * hop: hop]


def power_spectrogram(x: np.ndarray, cfg: MelConfig) -> np.ndarray:
    frames = frame_signal(np.asarray(x, dtype=np.float64), cfg.win, cfg.hop) * _hann(cfg.win)
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def log_mel_spectrogram(w: Waveform, cfg: MelConfig | None = None) -> MelSpectrogram:
    """Log-Mel frames (T, n_mels); input at another rate is resampled to ``cfg``'s."""
    cfg = cfg or MelConfig(sample_rate=w.sample_rate)
    if w.sample_rate != cfg.sample_rate:
        w = resample(w, cfg.sample_rate)
    x = w.mono
    if len(x) < cfg.win:
        raise ValueError(f"signal of {len(x)} samples is shorter than one window ({cfg.win})")
    energy = power_spectrogram(x, cfg) @ mel_filterbank(cfg).T
    return MelSpectrogram(np.log(np.maximum(energy, cfg.log_floor)), cfg)


def min_log_value(cfg: MelConfig) -> float:
    return math.log(cfg.log_floor)


def load_mel(path, cfg: MelConfig) -> MelSpectrogram:
    """Load a WAV file and run it through mono mixdown, resampling and log-Mel."""
    return log_mel_spectrogram(prepare(load_wav(path), cfg.sample_rate), cfg)
