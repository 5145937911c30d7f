"""Adam training loop for the CRNN detector."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from ..annotations import SpeciesVocabulary, to_event_roll
from ..features import FeatureConfig, compute_norm_stats, log_mel
from ..rng import substream
from .network import (
    CrnnConfig,
    CrnnParams,
    backward_batch,
    bce_loss,
    forward_batch,
    init_params,
)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 128
    n_train_samples: int = 10000
    train_fraction: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossHistory:
    """Mean training loss per completed epoch."""

    losses: list[float] = field(default_factory=list)

    def append(self, value: float) -> None:
        self.losses.append(float(value))

    def __len__(self) -> int:
        return len(self.losses)

    def __getitem__(self, i):
        return self.losses[i]


class AdamOptimizer:
    """Standard Adam with bias correction, fixed update order."""

    def __init__(self, tensors: dict[str, np.ndarray], config: TrainConfig):
        self.config = config
        self.step = 0
        self.m = {k: np.zeros_like(v) for k, v in tensors.items()}
        self.v = {k: np.zeros_like(v) for k, v in tensors.items()}

    def update(self, tensors: dict[str, np.ndarray],
               grads: dict[str, np.ndarray]) -> None:
        c = self.config
        self.step += 1
        bc1 = 1.0 - c.beta1 ** self.step
        bc2 = 1.0 - c.beta2 ** self.step
        for name in sorted(tensors):
            g = grads[name]
            self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * (g * g)
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            tensors[name] -= c.learning_rate * m_hat / (np.sqrt(v_hat) + c.adam_eps)


def prepare_training_arrays(clips, vocabulary: SpeciesVocabulary,
                            feature_config: FeatureConfig,
                            dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Featurize scene clips and rasterize their annotations.

    Returns (X, Y): X is (n, N, n_mels) log-mel features, Y the matching
    (n, N, S) frame targets. All clips must produce the same frame count.
    """
    feats, targets = [], []
    n_frames = None
    for clip in clips:
        mel = log_mel(clip.samples, feature_config)
        if n_frames is None:
            n_frames = mel.n_frames
        elif mel.n_frames != n_frames:
            raise ValueError(
                f"clip {clip.source_id!r} yields {mel.n_frames} frames, "
                f"expected {n_frames}; batch training needs uniform lengths")
        roll = to_event_roll(clip.annotations, vocabulary, mel.frame_hop,
                             mel.n_frames)
        feats.append(mel.values.astype(dtype))
        targets.append(roll.matrix.T.astype(dtype))
    return np.stack(feats), np.stack(targets)


def train_on_arrays(features: np.ndarray, targets: np.ndarray,
                    crnn_config: CrnnConfig, train_config: TrainConfig,
                    norm_stats: tuple[np.ndarray, np.ndarray] | None = None,
                    dtype=np.float32) -> tuple[CrnnParams, LossHistory]:
    """Adam on shuffled mini-batches over pre-featurized arrays.

    Deterministic given the training seed: init, per-epoch shuffles, and
    dropout masks all come from named substreams of train_config.seed.
    """
    n = features.shape[0]
    if n == 0:
        raise ValueError("no training samples")
    params = init_params(crnn_config, train_config.seed, dtype=dtype)
    if norm_stats is None:
        flat = features.reshape(-1, features.shape[2])
        params.norm_mean = flat.mean(axis=0)
        params.norm_std = np.maximum(flat.std(axis=0), 1e-6)
    else:
        params.norm_mean = np.asarray(norm_stats[0], dtype=np.float64)
        params.norm_std = np.asarray(norm_stats[1], dtype=np.float64)

    optimizer = AdamOptimizer(params.tensors, train_config)
    history = LossHistory()
    drop_rng = substream(train_config.seed, "dropout")

    for epoch in range(train_config.epochs):
        order = substream(train_config.seed, "shuffle", epoch).permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, train_config.batch_size):
            idx = order[start:start + train_config.batch_size]
            x = features[idx]
            y = targets[idx].astype(dtype)
            probs, cache = forward_batch(params, x, train=True, rng=drop_rng)
            loss = bce_loss(probs, y)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch + 1}, "
                    f"batch {start // train_config.batch_size + 1}")
            grads = backward_batch(params, cache, y)
            optimizer.update(params.tensors, grads)
            epoch_loss += loss * len(idx)
        history.append(epoch_loss / n)
    return params, history


def train(scene_clips, crnn_config: CrnnConfig, train_config: TrainConfig,
          vocabulary: SpeciesVocabulary, feature_config: FeatureConfig,
          dtype=np.float32) -> tuple[CrnnParams, LossHistory]:
    """Full training entry point on scene clips (loaded from a manifest or
    built in memory); uses at most train_config.n_train_samples scenes."""
    clips = list(scene_clips)[:train_config.n_train_samples]
    features, targets = prepare_training_arrays(
        clips, vocabulary, feature_config, dtype=dtype)
    return train_on_arrays(features, targets, crnn_config, train_config,
                           dtype=dtype)
