"""Discrete units: mini-batch k-means codebooks, quantisation and run-length dedup."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import formats


@dataclass
class Codebook:
    centroids: np.ndarray  # (k, D)
    counts: np.ndarray  # (k,) cumulative assignment counts
    seed: int = 0

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def save(self, path):
        formats.write_codebook(path, self.centroids, self.counts)

    @classmethod
    def load(cls, path) -> "Codebook":
        centroids, counts = formats.read_codebook(path)
        return cls(centroids.astype(np.float64), counts)


@dataclass
class UnitSequence:
    ids: np.ndarray
    run_lengths: np.ndarray | None = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).ravel()
        if self.run_lengths is not None:
            self.run_lengths = np.asarray(self.run_lengths, dtype=np.int64).ravel()
            if self.run_lengths.shape != self.ids.shape:
                raise ValueError("run_lengths must align with ids")

    def __len__(self):
        return self.ids.size


def _stack(features) -> np.ndarray:
    if isinstance(features, np.ndarray):
        X = features
    else:
        X = np.concatenate([np.atleast_2d(np.asarray(f)) for f in features], axis=0)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("features must be (n, D)")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    return X


EVAL_FRAMES = 1 << 16  # restarts are compared on at most this many frames


def _fast_sq_dists(X, C):
    d = (X * X).sum(1)[:, None] - 2.0 * X @ C.T + (C * C).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _exact_sq_dists(X, C, chunk_elems=1 << 23):
    rows = max(1, chunk_elems // max(1, C.size))
    out = np.empty((X.shape[0], C.shape[0]))
    for s in range(0, X.shape[0], rows):
        diff = X[s:s + rows, None, :] - C[None, :, :]
        out[s:s + rows] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def kmeans_plus_plus(X, k, rng, local_trials: int | None = None) -> np.ndarray:
    """Greedy D^2-weighted seeding.

    Each new centre is the best of ``local_trials`` D^2-weighted candidates
    (default ``2 + ln k``), judged by the resulting potential. One trial is the
    plain k-means++ rule.
    """
    n = X.shape[0]
    trials = 2 + int(np.log(k)) if local_trials is None else local_trials
    centres = [X[rng.integers(n)]]
    closest = _exact_sq_dists(X, centres[0][None])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            raise ValueError("fewer distinct frames than clusters")
        cand = rng.choice(n, size=trials, p=closest / total)
        pots = np.minimum(closest[None, :], _exact_sq_dists(X[cand], X).reshape(trials, n))
        best = int(np.argmin(pots.sum(axis=1)))
        centres.append(X[cand[best]])
        closest = pots[best]
    return np.array(centres)


def _check_fit_args(X, k):
    if k <= 0:
        raise ValueError("k must be positive")
    if X.shape[0] < k or np.unique(X, axis=0).shape[0] < k:
        raise ValueError(f"need at least {k} distinct frames to fit {k} clusters")


def _init_from(X, k, batch_size, rng):
    n = X.shape[0]
    size = min(n, max(3 * k, batch_size))
    sample = X[rng.choice(n, size=size, replace=False)]
    if np.unique(sample, axis=0).shape[0] < k:
        sample = X
    return kmeans_plus_plus(sample, k, rng)


def init_centroids(features, k: int, batch_size: int = 1024, seed: int = 0) -> np.ndarray:
    """The k-means++ starting point ``fit_minibatch_kmeans`` uses for the same arguments."""
    X = _stack(features)
    _check_fit_args(X, k)
    return _init_from(X, k, batch_size, np.random.default_rng(seed))


def _fit_once(X, k, batch_size, iterations, rng):
    C = _init_from(X, k, batch_size, rng)
    counts = np.zeros(k, dtype=np.int64)
    n = X.shape[0]
    for _ in range(iterations):
        batch = X[rng.choice(n, size=min(batch_size, n), replace=False)]
        assign = np.argmin(_fast_sq_dists(batch, C), axis=1)
        n_j = np.bincount(assign, minlength=k)
        sums = np.zeros_like(C)
        np.add.at(sums, assign, batch)
        hit = n_j > 0
        counts[hit] += n_j[hit]
        eta = n_j[hit] / counts[hit]
        C[hit] += eta[:, None] * (sums[hit] / n_j[hit, None] - C[hit])
        dead = np.flatnonzero(counts == 0)
        if dead.size:
            C[dead] = batch[rng.choice(batch.shape[0], size=dead.size, replace=dead.size > batch.shape[0])]
    return C, counts


def fit_minibatch_kmeans(features, k: int, batch_size: int = 1024,
                         iterations: int | None = None, seed: int = 0, n_init: int = 10) -> Codebook:
    """Mini-batch k-means with per-centre learning rate 1/count.

    Each iteration assigns a random batch to the nearest centres and moves each
    centre towards the mean of its batch members by ``n_batch / count``, which
    is the per-sample ``1/count`` running-average update applied in one go.
    Centres that have never received a frame are reseeded from the batch.
    The fit is repeated ``n_init`` times from fresh seedings and the run with
    the lowest inertia (on up to ``EVAL_FRAMES`` frames) is kept; the first
    run starts from ``init_centroids`` with the same arguments.
    """
    X = _stack(features)
    _check_fit_args(X, k)
    if n_init < 1:
        raise ValueError("n_init must be positive")
    if iterations is None:
        iterations = 10 * k
    rng = np.random.default_rng(seed)
    runs = [_fit_once(X, k, batch_size, iterations, rng) for _ in range(n_init)]
    if n_init == 1:
        return Codebook(*runs[0], seed)
    sample = X
    if X.shape[0] > EVAL_FRAMES:
        sample = X[np.random.default_rng([seed, 1]).choice(X.shape[0], size=EVAL_FRAMES, replace=False)]
    scores = [_exact_sq_dists(sample, C).min(axis=1).sum() for C, _ in runs]
    return Codebook(*runs[int(np.argmin(scores))], seed)


def quantize(cb: Codebook, feats) -> UnitSequence:
    """Nearest-centroid ids (Euclidean); ties go to the lowest index."""
    X = np.asarray(feats, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != cb.dim:
        raise ValueError(f"feature dim {X.shape[-1]} does not match codebook dim {cb.dim}")
    return UnitSequence(np.argmin(_exact_sq_dists(X, cb.centroids), axis=1))


def inertia(cb: Codebook, feats) -> float:
    """Sum of squared distances from each frame to its nearest centroid."""
    X = _stack(feats)
    if X.shape[1] != cb.dim:
        raise ValueError("dimension mismatch")
    return float(_exact_sq_dists(X, cb.centroids).min(axis=1).sum())


def dedup_runs(u) -> UnitSequence:
    """Collapse maximal runs of identical ids, recording run lengths.

    >>> dedup_runs([13, 7, 7, 21, 21, 5]).ids.tolist()
    [13, 7, 21, 5]
    """
    ids = u.ids if isinstance(u, UnitSequence) else np.asarray(u, dtype=np.int64)
    if ids.size == 0:
        return UnitSequence([], [])
    starts = np.flatnonzero(np.concatenate([[True], ids[1:] != ids[:-1]]))
    lengths = np.diff(np.append(starts, ids.size))
    return UnitSequence(ids[starts], lengths)


def expand_runs(u: UnitSequence) -> UnitSequence:
    if u.run_lengths is None:
        raise ValueError("sequence has no run lengths to expand")
    return UnitSequence(np.repeat(u.ids, u.run_lengths))


def internal_features(mel_frames) -> np.ndarray:
    """Fallback unit features: log-Mel frames with the per-utterance mean removed.

    Removing the utterance mean strips static spectral colouring (channel,
    overall tilt) so units mostly track what changes over time.
    """
    mel_frames = np.asarray(mel_frames, dtype=np.float64)
    return mel_frames - mel_frames.mean(axis=0, keepdims=True)
