"""Voice likability predictor: TDNN frames, statistics pooling, two segment layers.

    layer      context              in x out
    frame1     {t-2, t, t+2}        240 x 32
    frame2     {t-6, t-3, t, t+3, t+6}  160 x 32
    frame3     {t}                  32 x 32
    pooling    all frames           32T -> 64
    segment4                        64 x 32
    segment5                        32 x 4   (one output per listener group)

ReLU follows every layer except segment5. The network sees log-Mel frames
standardised with per-bin statistics fitted on the training split.
"""

from __future__ import annotations

import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import audio, metrics
from . import tensorkit as tk
from .augment import AugmentConfig, augment_chain
from .errors import DataError, TrainingDivergedError

log = logging.getLogger(__name__)


class ListenerGroup(Enum):
    M_UNDER40 = (0, 202)
    M_40PLUS = (1, 323)
    F_UNDER40 = (2, 143)
    F_40PLUS = (3, 210)

    @property
    def index(self) -> int:
        return self.value[0]

    @property
    def listener_count(self) -> int:
        return self.value[1]


GROUP_NAMES = [g.name for g in ListenerGroup]
N_GROUPS = len(GROUP_NAMES)

LAYERS = {
    # name: (context offsets or None for a segment layer, input width, output width)
    "frame1": ((-2, 0, 2), 80, 32),
    "frame2": ((-6, -3, 0, 3, 6), 32, 32),
    "frame3": ((0,), 32, 32),
    "segment4": (None, 64, 32),
    "segment5": (None, 32, N_GROUPS),
}
MIN_FRAMES = 1 + sum(tk.context_span(ctx) for ctx, _, _ in LAYERS.values() if ctx)


class PredictorModel(tk.Module):
    def __init__(self, seed: int = 0, n_mels: int = 80, dtype=np.float32):
        super().__init__()
        rng = np.random.default_rng(seed)
        for name, (ctx, d_in, d_out) in LAYERS.items():
            if name == "frame1":
                d_in = n_mels
            fan_in = d_in * (len(ctx) if ctx else 1)
            self.params[f"{name}.weight"] = tk.parameter(tk.kaiming_uniform(rng, fan_in, (fan_in, d_out), dtype))
            self.params[f"{name}.bias"] = tk.parameter(np.zeros(d_out, dtype=dtype))
        self.buffers["feat_mean"] = np.zeros(n_mels, dtype=dtype)
        self.buffers["feat_std"] = np.ones(n_mels, dtype=dtype)

    def _layer(self, name, x):
        ctx = LAYERS[name][0]
        w, b = self.params[f"{name}.weight"], self.params[f"{name}.bias"]
        return tk.tdnn_layer(x, ctx, w, b) if ctx else tk.dense(x, w, b)

    def normalize(self, mel_frames) -> np.ndarray:
        x = np.asarray(mel_frames, dtype=self.dtype)
        return (x - self.buffers["feat_mean"]) / self.buffers["feat_std"]

    def forward(self, mel_frames) -> tk.Tensor:
        """(..., T, n_mels) log-Mel frames to (..., 4) ratings."""
        x = np.asarray(mel_frames)
        if x.shape[-2] < MIN_FRAMES:
            raise ValueError(f"predictor needs at least {MIN_FRAMES} frames, got {x.shape[-2]}")
        h = tk.Tensor(self.normalize(x))
        for name in ("frame1", "frame2", "frame3"):
            h = tk.relu(self._layer(name, h))
        h = tk.stats_pooling(h)
        h = tk.relu(self._layer("segment4", h))
        return self._layer("segment5", h)

    def copy(self) -> "PredictorModel":
        return copy.deepcopy(self)

    @classmethod
    def from_state(cls, state) -> "PredictorModel":
        n_mels = state["frame1.weight"].shape[0] // len(LAYERS["frame1"][0])
        return cls(n_mels=n_mels).load_state_dict(state)

    def save(self, path):
        tk.save_checkpoint(path, self.state_dict())

    @classmethod
    def load(cls, path) -> "PredictorModel":
        return cls.from_state(tk.load_checkpoint(path))


def build_model(seed: int = 0, n_mels: int = 80) -> PredictorModel:
    return PredictorModel(seed=seed, n_mels=n_mels)


def predict_raw(model: PredictorModel, mel) -> np.ndarray:
    frames = mel.frames if isinstance(mel, audio.MelSpectrogram) else mel
    return model.forward(frames).data.astype(np.float64)


def predict_many(model: PredictorModel, mels) -> np.ndarray:
    return np.array([predict_raw(model, m) for m in mels]).reshape(-1, N_GROUPS)


# ---------------------------------------------------------------------------
# Calibration


@dataclass
class CalibrationParams:
    """Moments for the post-filter ``y' = sigma / sigma_hat * (y - mu_hat) + mu``.

    Per-group arrays have one entry per listener group; the ``pooled_*``
    scalars are the same moments over all groups' values together.
    """

    mu: np.ndarray
    sigma: np.ndarray
    mu_hat: np.ndarray
    sigma_hat: np.ndarray
    pooled_mu: float = 0.0
    pooled_sigma: float = 1.0
    pooled_mu_hat: float = 0.0
    pooled_sigma_hat: float = 1.0

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d) -> "CalibrationParams":
        d = dict(d)
        for k in ("mu", "sigma", "mu_hat", "sigma_hat"):
            d[k] = np.asarray(d[k], dtype=np.float64)
        return cls(**d)


def fit_calibration(predictions, targets) -> CalibrationParams:
    p = np.asarray(predictions, dtype=np.float64).reshape(-1, N_GROUPS)
    t = np.asarray(targets, dtype=np.float64).reshape(-1, N_GROUPS)
    if p.shape != t.shape:
        raise ValueError("predictions and targets differ in length")
    if p.shape[0] < 2:
        raise ValueError("calibration needs at least two samples")
    sigma_hat = p.std(axis=0)
    if np.any(sigma_hat == 0) or p.std() == 0:
        raise ValueError("predictions have zero variance; calibration is undefined")
    return CalibrationParams(
        mu=t.mean(axis=0), sigma=t.std(axis=0), mu_hat=p.mean(axis=0), sigma_hat=sigma_hat,
        pooled_mu=float(t.mean()), pooled_sigma=float(t.std()),
        pooled_mu_hat=float(p.mean()), pooled_sigma_hat=float(p.std()),
    )


def apply_calibration(params: CalibrationParams, y_hat, pooled: bool = False) -> np.ndarray:
    y = np.asarray(y_hat, dtype=np.float64)
    if pooled:
        return params.pooled_sigma / params.pooled_sigma_hat * (y - params.pooled_mu_hat) + params.pooled_mu
    return params.sigma / params.sigma_hat * (y - params.mu_hat) + params.mu


def classify_liked(rating, threshold: float = 0.0) -> str:
    """'liked' iff the mean over listener groups is >= threshold."""
    return "liked" if float(np.mean(rating)) >= threshold else "disliked"


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 16
    adam: tk.AdamConfig = field(default_factory=tk.AdamConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    patience: int = 10
    crop_sec: float = 4.0
    fit_normalizer: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.patience < 1 or self.crop_sec <= 0:
            raise ValueError("epochs, batch_size, patience and crop_sec must be positive")


def _load_split(records, name, mel_cfg):
    recs = [r for r in records if r["split"] == name]
    if not recs:
        raise DataError(f"manifest has no {name!r} records")
    for r in recs:
        if r.get("ratings") is None:
            raise DataError(f"record {r['id']!r} has no ratings")
    waves = [audio.prepare(audio.load_wav(r["audio"]), mel_cfg.sample_rate).mono for r in recs]
    return waves, np.array([r["ratings"] for r in recs], dtype=np.float64)


def _crop(x, n, rng):
    if len(x) >= n:
        start = int(rng.integers(0, len(x) - n + 1))
        return x[start:start + n]
    return np.pad(x, (0, n - len(x)))


def pooled_srcc(pred, target) -> float:
    return metrics.spearman_srcc(np.ravel(pred), np.ravel(target))


def train(model: PredictorModel, records, cfg: TrainConfig = TrainConfig(),
          mel_cfg: audio.MelConfig = audio.MelConfig(), irs=()):
    """Minibatch MSE training with augmentation; keeps the epoch with the best
    validation SRCC (pooled over the four groups).

    Returns ``(best_model, history)`` where history has one dict per epoch.
    """
    train_x, train_y = _load_split(records, "train", mel_cfg)
    val_x, val_y = _load_split(records, "val", mel_cfg)
    val_mels = [audio.log_mel_spectrogram(audio.Waveform(x, mel_cfg.sample_rate), mel_cfg).frames
                for x in val_x]
    model = model.copy()
    if cfg.fit_normalizer:
        frames = np.concatenate([
            audio.log_mel_spectrogram(audio.Waveform(x, mel_cfg.sample_rate), mel_cfg).frames
            for x in train_x])
        model.buffers["feat_mean"] = frames.mean(axis=0).astype(model.dtype)
        model.buffers["feat_std"] = np.maximum(frames.std(axis=0), 1e-3).astype(model.dtype)

    crop_len = max(int(round(cfg.crop_sec * mel_cfg.sample_rate)), mel_cfg.win)
    rng = np.random.default_rng(cfg.seed)
    opt = tk.Adam(model.parameters(), cfg.adam)
    history = []
    best_srcc, best_state, stale = -np.inf, model.state_dict(), 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train_x))
        losses = []
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            batch = []
            for i in idx:
                w = augment_chain(audio.Waveform(train_x[i], mel_cfg.sample_rate), cfg.augment,
                                  int(rng.integers(2 ** 63 - 1)), irs)
                w = audio.Waveform(_crop(w.mono, crop_len, rng), mel_cfg.sample_rate)
                batch.append(audio.log_mel_spectrogram(w, mel_cfg).frames)
            opt.zero_grad()
            loss = tk.mse(model.forward(np.stack(batch)), train_y[idx])
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            losses.append(float(loss.data))
        val_pred = predict_many(model, val_mels)
        srcc = pooled_srcc(val_pred, val_y)
        history.append({"epoch": epoch, "loss": float(np.mean(losses)), "val_srcc": srcc,
                        "val_mse": metrics.mse(val_pred, val_y)})
        log.info("epoch %d loss %.4f val srcc %.4f", epoch, history[-1]["loss"], srcc)
        if srcc > best_srcc:
            best_srcc, best_state, stale = srcc, model.state_dict(), 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return model.load_state_dict(best_state), history


# ---------------------------------------------------------------------------
# Corpus annotation


def annotate_record(model, params, rec, mel_cfg) -> dict:
    mel = audio.load_mel(rec["audio"], mel_cfg)
    pred = apply_calibration(params, predict_raw(model, mel)).tolist()
    out = dict(rec)
    if rec.get("ratings") is not None:
        out["ratings_orig"] = rec["ratings"]
    out["ratings"] = pred
    out["ratings_pred"] = pred
    return out


def iter_annotate(model, params, records, mel_cfg=audio.MelConfig(), threads: int = 1, chunk: int = 64):
    """Yield ``(record, error)`` pairs in input order; one of the two is None.

    Records are consumed lazily in chunks, so memory stays bounded for large
    corpora.
    """
    def _one(rec):
        try:
            return annotate_record(model, params, rec, mel_cfg), None
        except (OSError, ValueError) as exc:
            return None, {"id": rec.get("id"), "audio": rec.get("audio"), "error": str(exc)}

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        buf = []
        for rec in records:
            buf.append(rec)
            if len(buf) >= chunk:
                yield from pool.map(_one, buf)
                buf = []
        yield from pool.map(_one, buf)


def annotate_corpus(model, params, records, mel_cfg=audio.MelConfig(), threads: int = 1):
    """Attach calibrated per-utterance predictions. Returns ``(annotated, rejects)``."""
    annotated, rejects = [], []
    for rec, err in iter_annotate(model, params, records, mel_cfg, threads):
        if err is None:
            annotated.append(rec)
        else:
            rejects.append(err)
    return annotated, rejects
