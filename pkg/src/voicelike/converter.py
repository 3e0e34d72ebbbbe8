"""Likability-conditioned unit-to-mel acoustic model and a Griffin-Lim vocoder.

Deduplicated unit tokens are embedded and summed with projections of the
speaker embedding and of the target rating (the latter multiplied by the
scale ``s``). A residual 1-D convolutional encoder follows, then a duration
head, a length regulator and a convolutional decoder that emits log-Mel
frames.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass

import numpy as np

from . import audio, formats, units
from . import tensorkit as tk
from .errors import DataError, TrainingDivergedError

log = logging.getLogger(__name__)

TRAIN_SCALE = 1.0
INFERENCE_SCALE = 2.5
MAX_DURATION = 100  # frames per token; keeps untrained or diverged heads from exhausting memory


@dataclass(frozen=True)
class ConverterConfig:
    vocab: int = 100
    embed_dim: int = 128
    speaker_dim: int = 192
    enc_blocks: int = 2
    dec_blocks: int = 2
    kernel: int = 3
    n_mels: int = 80
    dur_hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if min(self.vocab, self.embed_dim, self.speaker_dim, self.n_mels, self.dur_hidden) <= 0:
            raise ValueError("converter sizes must be positive")
        if self.kernel % 2 != 1:
            raise ValueError("kernel must be odd")


class ConverterModel(tk.Module):
    def __init__(self, cfg: ConverterConfig = ConverterConfig(), dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        E, p = cfg.embed_dim, self.params
        p["token_emb"] = tk.parameter(rng.normal(0.0, 1.0, (cfg.vocab, E)).astype(dtype))
        p["speaker_proj"] = tk.parameter(tk.kaiming_uniform(rng, cfg.speaker_dim, (cfg.speaker_dim, E), dtype))
        p["rating_proj"] = tk.parameter(tk.kaiming_uniform(rng, 4, (4, E), dtype))
        for stage, n in (("enc", cfg.enc_blocks), ("dec", cfg.dec_blocks)):
            for i in range(n):
                fan_in = cfg.kernel * E
                p[f"{stage}{i}.weight"] = tk.parameter(0.5 * tk.kaiming_uniform(rng, fan_in, (fan_in, E), dtype))
                p[f"{stage}{i}.bias"] = tk.parameter(np.zeros(E, dtype=dtype))
        p["dur.w1"] = tk.parameter(tk.kaiming_uniform(rng, E, (E, cfg.dur_hidden), dtype))
        p["dur.b1"] = tk.parameter(np.zeros(cfg.dur_hidden, dtype=dtype))
        p["dur.w2"] = tk.parameter(tk.kaiming_uniform(rng, cfg.dur_hidden, (cfg.dur_hidden, 1), dtype))
        p["dur.b2"] = tk.parameter(np.zeros(1, dtype=dtype))
        p["mel.weight"] = tk.parameter(np.zeros((E, cfg.n_mels), dtype=dtype))
        p["mel.bias"] = tk.parameter(np.zeros(cfg.n_mels, dtype=dtype))
        self.buffers.update(
            mel_mean=np.zeros(cfg.n_mels, dtype=dtype), mel_std=np.ones(cfg.n_mels, dtype=dtype),
            spk_mean=np.zeros(cfg.speaker_dim, dtype=dtype), spk_std=np.ones(cfg.speaker_dim, dtype=dtype),
        )

    # -- conditioning -------------------------------------------------------

    def _rating_vector(self, target):
        t = np.asarray(target, dtype=self.dtype).ravel()
        if t.size == 1:
            t = np.repeat(t, 4)
        if t.size != 4:
            raise ValueError("target rating must be a scalar or 4 values")
        return t

    def condition_terms(self, ids, speaker, target, s):
        """(token + speaker sum, scaled rating term) before the encoder."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size == 0:
            raise ValueError("empty unit sequence")
        if ids.min() < 0 or ids.max() >= self.cfg.vocab:
            raise ValueError(f"unit id out of range [0, {self.cfg.vocab})")
        spk = np.asarray(speaker, dtype=self.dtype).ravel()
        if spk.size != self.cfg.speaker_dim:
            raise ValueError(f"speaker embedding has {spk.size} dims, model expects {self.cfg.speaker_dim}")
        spk = (spk - self.buffers["spk_mean"]) / self.buffers["spk_std"]
        base = tk.add(tk.embedding(self.params["token_emb"], ids),
                      tk.matmul(tk.Tensor(spk), self.params["speaker_proj"]))
        rating = tk.scale(tk.matmul(tk.Tensor(self._rating_vector(target)), self.params["rating_proj"]), s)
        return base, rating

    def pre_encoder(self, ids, speaker, target, s) -> tk.Tensor:
        base, rating = self.condition_terms(ids, speaker, target, s)
        return tk.add(base, rating)

    def _blocks(self, stage, n, h):
        for i in range(n):
            h = tk.add(h, tk.relu(tk.conv1d_same(h, self.params[f"{stage}{i}.weight"],
                                                 self.params[f"{stage}{i}.bias"], self.cfg.kernel)))
        return h

    def condition(self, ids, speaker, target, s) -> tk.Tensor:
        return self._blocks("enc", self.cfg.enc_blocks, self.pre_encoder(ids, speaker, target, s))

    # -- durations and decoding --------------------------------------------

    def log_durations(self, hidden: tk.Tensor) -> tk.Tensor:
        h = tk.relu(tk.dense(hidden, self.params["dur.w1"], self.params["dur.b1"]))
        return tk.dense(h, self.params["dur.w2"], self.params["dur.b2"])

    def decode(self, frame_hidden: tk.Tensor) -> tk.Tensor:
        h = self._blocks("dec", self.cfg.dec_blocks, frame_hidden)
        out = tk.dense(h, self.params["mel.weight"], self.params["mel.bias"])
        return tk.add(tk.mul(out, tk.Tensor(self.buffers["mel_std"])), tk.Tensor(self.buffers["mel_mean"]))

    def forward(self, ids, speaker, target, s, durations):
        """Teacher-forced pass: returns (mel Tensor, log-duration Tensor)."""
        hidden = self.condition(ids, speaker, target, s)
        return self.decode(tk.repeat_frames(hidden, durations)), self.log_durations(hidden)

    # -- persistence ---------------------------------------------------------

    def copy(self) -> "ConverterModel":
        return copy.deepcopy(self)

    def save(self, path):
        tk.save_checkpoint(path, self.state_dict())

    @classmethod
    def from_state(cls, state) -> "ConverterModel":
        vocab, E = state["token_emb"].shape
        cfg = ConverterConfig(
            vocab=vocab, embed_dim=E, speaker_dim=state["speaker_proj"].shape[0],
            enc_blocks=sum(1 for k in state if k.startswith("enc") and k.endswith(".weight")),
            dec_blocks=sum(1 for k in state if k.startswith("dec") and k.endswith(".weight")),
            kernel=state["enc0.weight"].shape[0] // E if "enc0.weight" in state else 3,
            n_mels=state["mel.weight"].shape[1], dur_hidden=state["dur.w1"].shape[1],
        )
        return cls(cfg).load_state_dict(state)

    @classmethod
    def load(cls, path) -> "ConverterModel":
        return cls.from_state(tk.load_checkpoint(path))


def condition(model: ConverterModel, ids, speaker, target, s) -> tk.Tensor:
    return model.condition(ids, speaker, target, s)


def predict_durations(model: ConverterModel, hidden: tk.Tensor) -> np.ndarray:
    logd = np.minimum(model.log_durations(hidden).data[:, 0].astype(np.float64), np.log(MAX_DURATION))
    return np.clip(np.round(np.exp(logd)), 1, MAX_DURATION).astype(np.int64)


def length_regulate(hidden: tk.Tensor, durations) -> tk.Tensor:
    return tk.repeat_frames(hidden, durations)


def decode_mel(model: ConverterModel, frame_hidden: tk.Tensor, mel_cfg=None) -> audio.MelSpectrogram:
    return audio.MelSpectrogram(model.decode(frame_hidden).data.astype(np.float64),
                                mel_cfg or audio.MelConfig())


# ---------------------------------------------------------------------------
# Data


def fallback_speaker_embedding(mel_frames) -> np.ndarray:
    """Stats-pooled log-Mel ([mean || std] over frames) for corpora without embeddings."""
    return tk.stats_pooling(tk.Tensor(np.asarray(mel_frames, dtype=np.float64))).data


def record_features(rec, mel_frames) -> np.ndarray:
    """External unit features when the record names a file, else the internal fallback.

    External features at a different frame rate are returned as-is; the mel
    target is resampled onto their timeline by ``align_mel``.
    """
    if rec.get("features"):
        return formats.read_features(rec["features"]).astype(np.float64)
    return units.internal_features(mel_frames)


def align_mel(mel_frames, n_frames) -> np.ndarray:
    if mel_frames.shape[0] == n_frames:
        return mel_frames
    idx = np.round(np.linspace(0, mel_frames.shape[0] - 1, n_frames)).astype(np.int64)
    return mel_frames[idx]


def record_speaker(rec, mel_frames) -> np.ndarray:
    if rec.get("embedding"):
        return formats.read_embedding(rec["embedding"]).astype(np.float64)
    return fallback_speaker_embedding(mel_frames)


def record_rating(rec) -> np.ndarray:
    r = rec.get("ratings_pred", rec.get("ratings"))
    if r is None:
        raise DataError(f"record {rec.get('id')!r} has no likability rating")
    return np.asarray(r, dtype=np.float64)


@dataclass
class Example:
    id: str
    ids: np.ndarray
    runs: np.ndarray
    mel: np.ndarray
    speaker: np.ndarray
    rating: np.ndarray


def make_example(rec, codebook: units.Codebook, mel_cfg=audio.MelConfig()) -> Example:
    if not rec.get("audio"):
        raise DataError(f"record {rec.get('id')!r} has no audio for the mel target")
    mel = audio.load_mel(rec["audio"], mel_cfg).frames
    feats = record_features(rec, mel)
    u = units.dedup_runs(units.quantize(codebook, feats))
    return Example(rec["id"], u.ids, u.run_lengths, align_mel(mel, feats.shape[0]),
                   record_speaker(rec, mel), record_rating(rec))


# ---------------------------------------------------------------------------
# Training


@dataclass(frozen=True)
class ConverterTrainConfig:
    steps: int = 3000
    lr: float = 1e-3
    final_lr_ratio: float = 0.05  # cosine decay from lr to lr * ratio
    scale: float = TRAIN_SCALE
    duration_weight: float = 1.0
    fit_normalizers: bool = True
    seed: int = 0


def fit_normalizers(model: ConverterModel, examples):
    mels = np.concatenate([e.mel for e in examples])
    spk = np.stack([e.speaker for e in examples])
    dt = model.dtype
    model.buffers["mel_mean"] = mels.mean(axis=0).astype(dt)
    model.buffers["mel_std"] = np.maximum(mels.std(axis=0), 1e-3).astype(dt)
    model.buffers["spk_mean"] = spk.mean(axis=0).astype(dt)
    model.buffers["spk_std"] = np.maximum(spk.std(axis=0), 1e-3).astype(dt)


def converter_loss(model, ex: Example, s, duration_weight=1.0):
    mel, logd = model.forward(ex.ids, ex.speaker, ex.rating, s, ex.runs)
    mel_loss = tk.mse(mel, ex.mel)
    dur_loss = tk.mse(logd, np.log(ex.runs.astype(np.float64))[:, None])
    return tk.add(mel_loss, tk.scale(dur_loss, duration_weight)), mel_loss, dur_loss


def cosine_lr(lr, final_ratio, step, total):
    frac = step / max(1, total - 1)
    return lr * (final_ratio + (1.0 - final_ratio) * 0.5 * (1.0 + np.cos(np.pi * frac)))


def train_converter(model: ConverterModel, examples, cfg: ConverterTrainConfig = ConverterTrainConfig()):
    """Teacher-forced training with mel MSE + log-duration MSE; returns (model, history)."""
    examples = list(examples)
    if not examples:
        raise DataError("no training examples for the converter")
    model = model.copy()
    if cfg.fit_normalizers:
        fit_normalizers(model, examples)
    rng = np.random.default_rng(cfg.seed)
    opt = tk.Adam(model.parameters(), tk.AdamConfig(lr=cfg.lr))
    history = []
    order = []
    for step in range(cfg.steps):
        if not order:
            order = list(rng.permutation(len(examples)))
        ex = examples[order.pop()]
        opt.zero_grad()
        loss, mel_loss, dur_loss = converter_loss(model, ex, cfg.scale, cfg.duration_weight)
        if not np.isfinite(loss.data):
            raise TrainingDivergedError(f"non-finite converter loss at step {step}")
        loss.backward()
        opt.step(cosine_lr(cfg.lr, cfg.final_lr_ratio, step, cfg.steps))
        history.append({"step": step, "mel_mse": float(mel_loss.data), "dur_mse": float(dur_loss.data)})
        if step % 500 == 0:
            log.info("step %d mel %.4f dur %.4f", step, mel_loss.data, dur_loss.data)
    return model, history


def evaluate_fit(model, examples, s=TRAIN_SCALE) -> dict:
    """Teacher-forced mel MSE and mean absolute duration error (frames) over examples."""
    mel_err, dur_err = [], []
    for ex in examples:
        mel, _ = model.forward(ex.ids, ex.speaker, ex.rating, s, ex.runs)
        mel_err.append(np.mean((mel.data - ex.mel) ** 2))
        hidden = model.condition(ex.ids, ex.speaker, ex.rating, s)
        dur_err.append(np.mean(np.abs(predict_durations(model, hidden) - ex.runs)))
    return {"mel_mse": float(np.mean(mel_err)), "duration_mae": float(np.mean(dur_err))}


# ---------------------------------------------------------------------------
# Inference


def convert_units(model, ids, speaker, target, s=INFERENCE_SCALE, durations=None, mel_cfg=None):
    hidden = model.condition(ids, speaker, target, s)
    if durations is None:
        durations = predict_durations(model, hidden)
    return decode_mel(model, length_regulate(hidden, durations), mel_cfg)


def convert(model, source, codebook: units.Codebook, speaker, target, s=INFERENCE_SCALE,
            mel_cfg=audio.MelConfig(), durations=None) -> audio.MelSpectrogram:
    """Convert ``source`` (Waveform, MelSpectrogram or a (T, D) feature matrix).

    Audio and mels go through the internal feature path; a bare matrix is
    taken as precomputed unit features.
    """
    if isinstance(source, audio.Waveform):
        source = audio.log_mel_spectrogram(audio.prepare(source, mel_cfg.sample_rate), mel_cfg)
    if isinstance(source, audio.MelSpectrogram):
        feats = units.internal_features(source.frames)
    else:
        feats = np.asarray(source, dtype=np.float64)
    u = units.dedup_runs(units.quantize(codebook, feats))
    return convert_units(model, u.ids, speaker, target, s, durations, mel_cfg)


# ---------------------------------------------------------------------------
# Vocoder


def _stft(x, cfg, window):
    frames = audio.frame_signal(x, cfg.win, cfg.hop) * window
    return np.fft.rfft(frames, n=cfg.fft_size, axis=-1)


def _istft(spec, cfg, window, length):
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=-1)[:, :cfg.win] * window
    out = np.zeros(length)
    norm = np.zeros(length)
    for t, f in enumerate(frames):
        out[t * cfg.hop:t * cfg.hop + cfg.win] += f
        norm[t * cfg.hop:t * cfg.hop + cfg.win] += window ** 2
    return out / np.maximum(norm, 1e-8)


def griffin_lim_vocoder(mel: audio.MelSpectrogram, iterations: int = 60, seed: int = 0,
                        mel_cfg: audio.MelConfig | None = None) -> audio.Waveform:
    """Pseudo-invert the mel filterbank, then recover phase by Griffin-Lim."""
    cfg = mel_cfg or mel.config
    if mel.frames.shape[1] != cfg.n_mels:
        raise ValueError(f"mel has {mel.frames.shape[1]} bins, config expects {cfg.n_mels}")
    fb = audio.mel_filterbank(cfg)
    power = np.maximum(np.exp(mel.frames) @ np.linalg.pinv(fb).T, 0.0)
    mag = np.sqrt(power)
    window = audio._hann(cfg.win)
    length = (mel.frames.shape[0] - 1) * cfg.hop + cfg.win
    angles = np.exp(2j * np.pi * np.random.default_rng(seed).random(mag.shape))
    x = _istft(mag * angles, cfg, window, length)
    for _ in range(iterations):
        spec = _stft(x, cfg, window)
        angles = np.exp(1j * np.angle(spec))
        x = _istft(mag * angles, cfg, window, length)
    return audio.Waveform(np.clip(x, -1.0, 1.0), cfg.sample_rate)
