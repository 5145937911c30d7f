"""Frame-wise CRNN detector.

Pipeline: per conv block [3x3 same-padding conv -> layer norm -> leaky
ReLU -> max pool on frequency], then each time step is flattened to a
(channels x remaining-frequency) vector, passed through stacked
bidirectional GRUs (dropout between recurrent layers in train mode), a
time-distributed dense stack with leaky ReLU + dropout, and a final
sigmoid layer emitting one probability per class per frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from ..annotations import EventRoll, SpeciesVocabulary
from . import layers

BCE_EPS = 1e-7


@dataclass(frozen=True)
class CrnnConfig:
    n_mels: int = 128
    n_classes: int = 20
    conv_channels: tuple[int, ...] = (64, 128, 128, 128, 264)
    freq_pool: tuple[int, ...] = (2, 2, 2, 2, 2)
    gru_units: int = 128
    gru_layers: int = 2
    dense_units: tuple[int, ...] = (128, 128)
    dropout: float = 0.5
    leaky_slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(self.conv_channels))
        object.__setattr__(self, "freq_pool", tuple(self.freq_pool))
        object.__setattr__(self, "dense_units", tuple(self.dense_units))
        if len(self.conv_channels) != len(self.freq_pool):
            raise ValueError("need one pool width per conv layer")
        if not self.conv_channels:
            raise ValueError("need at least one conv layer")
        pool_total = math.prod(self.freq_pool)
        if self.n_mels % pool_total != 0:
            raise ValueError(
                f"pool widths {self.freq_pool} do not divide {self.n_mels} mel bands")
        if self.gru_layers < 1 or self.gru_units < 1:
            raise ValueError("need at least one GRU layer with >= 1 unit")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def freq_remaining(self) -> int:
        return self.n_mels // math.prod(self.freq_pool)

    @property
    def gru_input_size(self) -> int:
        return self.conv_channels[-1] * self.freq_remaining

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "CrnnConfig":
        return cls(
            n_mels=data["n_mels"], n_classes=data["n_classes"],
            conv_channels=tuple(data["conv_channels"]),
            freq_pool=tuple(data["freq_pool"]),
            gru_units=data["gru_units"], gru_layers=data["gru_layers"],
            dense_units=tuple(data["dense_units"]),
            dropout=data["dropout"], leaky_slope=data["leaky_slope"],
        )


GRU_TENSORS = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h")


def tensor_shapes(config: CrnnConfig) -> dict[str, tuple[int, ...]]:
    """Canonical tensor name -> shape map; fixes init, checkpoint, and
    gradient iteration order."""
    shapes: dict[str, tuple[int, ...]] = {}
    c_in = 1
    for i, c_out in enumerate(config.conv_channels, start=1):
        shapes[f"conv{i}/kernel"] = (3, 3, c_in, c_out)
        shapes[f"conv{i}/bias"] = (c_out,)
        shapes[f"conv{i}/ln_scale"] = (c_out,)
        shapes[f"conv{i}/ln_shift"] = (c_out,)
        c_in = c_out
    d_in = config.gru_input_size
    H = config.gru_units
    for layer in range(1, config.gru_layers + 1):
        for direction in ("fw", "bw"):
            for name in GRU_TENSORS:
                if name.startswith("W"):
                    shape = (d_in, H)
                elif name.startswith("U"):
                    shape = (H, H)
                else:
                    shape = (H,)
                shapes[f"gru{layer}/{direction}/{name}"] = shape
        d_in = 2 * H
    for j, units in enumerate(config.dense_units, start=1):
        shapes[f"dense{j}/weight"] = (d_in, units)
        shapes[f"dense{j}/bias"] = (units,)
        d_in = units
    shapes["out/weight"] = (d_in, config.n_classes)
    shapes["out/bias"] = (config.n_classes,)
    return shapes


@dataclass
class CrnnParams:
    """Learned tensors plus the input-standardization statistics and the
    species list the output classes correspond to."""

    config: CrnnConfig
    tensors: dict[str, np.ndarray]
    norm_mean: np.ndarray
    norm_std: np.ndarray
    seed: int = 0
    species_codes: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.species_codes is not None:
            codes = tuple(self.species_codes)
            if len(codes) != self.config.n_classes:
                raise ValueError(
                    f"{len(codes)} species codes for {self.config.n_classes} classes")
            self.species_codes = codes
        expected = tensor_shapes(self.config)
        if set(self.tensors) != set(expected):
            missing = set(expected) - set(self.tensors)
            extra = set(self.tensors) - set(expected)
            raise ValueError(
                f"tensor names do not match config (missing {sorted(missing)}, "
                f"unexpected {sorted(extra)})")
        for name, shape in expected.items():
            if tuple(self.tensors[name].shape) != shape:
                raise ValueError(
                    f"{name}: expected shape {shape}, got "
                    f"{self.tensors[name].shape}")
        self.norm_mean = np.asarray(self.norm_mean, dtype=np.float64).reshape(-1)
        self.norm_std = np.asarray(self.norm_std, dtype=np.float64).reshape(-1)
        if self.norm_mean.size != self.config.n_mels or \
                self.norm_std.size != self.config.n_mels:
            raise ValueError("normalization statistics must have one entry per mel band")


def init_params(config: CrnnConfig, seed: int,
                dtype=np.float64) -> CrnnParams:
    """Glorot-uniform weights (a = sqrt(6/(fan_in+fan_out)) per tensor),
    zero biases and shifts, unit layer-norm scales; deterministic per seed."""
    from ..rng import substream

    rng = substream(seed, "init")
    tensors: dict[str, np.ndarray] = {}
    for name, shape in tensor_shapes(config).items():
        leaf = name.rsplit("/", 1)[1]
        if leaf in ("bias", "ln_shift") or leaf.startswith("b_"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        elif leaf == "ln_scale":
            tensors[name] = np.ones(shape, dtype=dtype)
        elif leaf == "kernel":
            fan_in = shape[0] * shape[1] * shape[2]
            fan_out = shape[0] * shape[1] * shape[3]
            a = math.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-a, a, size=shape).astype(dtype)
        else:
            fan_in, fan_out = shape[0], shape[1]
            a = math.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-a, a, size=shape).astype(dtype)
    return CrnnParams(
        config=config, tensors=tensors,
        norm_mean=np.zeros(config.n_mels), norm_std=np.ones(config.n_mels),
        seed=seed)


def _gru_params(tensors: dict, layer: int, direction: str) -> dict:
    return {name: tensors[f"gru{layer}/{direction}/{name}"]
            for name in GRU_TENSORS}


def conv_stack_forward(params: CrnnParams, feats: np.ndarray):
    """Conv blocks only: (B, T, n_mels) standardized input ->
    (B, T, F_rem, C_last); exposed for receptive-field checks."""
    cfg = params.config
    x = feats[:, :, :, None]
    caches = []
    for i, width in enumerate(cfg.freq_pool, start=1):
        t = params.tensors
        x, c_conv = layers.conv3x3_forward(
            x, t[f"conv{i}/kernel"], t[f"conv{i}/bias"])
        x, c_ln = layers.layernorm_forward(
            x, t[f"conv{i}/ln_scale"], t[f"conv{i}/ln_shift"])
        x, c_act = layers.leaky_relu_forward(x, cfg.leaky_slope)
        x, c_pool = layers.maxpool_freq_forward(x, width, f"conv{i}")
        caches.append((c_conv, c_ln, c_act, c_pool))
    return x, caches


def _conv_stack_backward(params: CrnnParams, grad, caches, grads: dict):
    for i in range(len(caches), 0, -1):
        c_conv, c_ln, c_act, c_pool = caches[i - 1]
        grad = layers.maxpool_freq_backward(grad, c_pool)
        grad = layers.leaky_relu_backward(grad, c_act)
        grad, dscale, dshift = layers.layernorm_backward(grad, c_ln)
        grads[f"conv{i}/ln_scale"] = dscale
        grads[f"conv{i}/ln_shift"] = dshift
        grad, dkernel, dbias = layers.conv3x3_backward(grad, c_conv)
        grads[f"conv{i}/kernel"] = dkernel
        grads[f"conv{i}/bias"] = dbias
    return grad


def forward_batch(params: CrnnParams, feats: np.ndarray, train: bool = False,
                  rng: np.random.Generator | None = None):
    """(B, T, n_mels) log-mel features -> (B, T, n_classes) probabilities
    plus the cache needed by backward_batch."""
    cfg = params.config
    if feats.ndim != 3 or feats.shape[2] != cfg.n_mels:
        raise ValueError(
            f"input: expected (batch, frames, {cfg.n_mels}) features, "
            f"got {feats.shape}")
    if train and cfg.dropout > 0 and rng is None:
        raise ValueError("train-mode forward needs an rng for dropout")
    drop_rng = rng if train else None
    dtype = params.tensors["out/weight"].dtype

    x = ((feats - params.norm_mean) / params.norm_std).astype(dtype)
    x, conv_caches = conv_stack_forward(params, x)

    B, T, F_rem, C = x.shape
    # time step vector ordered channels-major: (c, f) -> c * F_rem + f
    x = np.ascontiguousarray(x.transpose(0, 1, 3, 2)).reshape(B, T, C * F_rem)

    gru_caches = []
    for layer in range(1, cfg.gru_layers + 1):
        x, c_gru = layers.bigru_forward(
            x, _gru_params(params.tensors, layer, "fw"),
            _gru_params(params.tensors, layer, "bw"))
        c_drop = None
        if layer < cfg.gru_layers:
            x, c_drop = layers.dropout_forward(x, cfg.dropout, drop_rng)
        gru_caches.append((c_gru, c_drop))

    dense_caches = []
    for j in range(1, len(cfg.dense_units) + 1):
        t = params.tensors
        x, c_dense = layers.dense_forward(
            x, t[f"dense{j}/weight"], t[f"dense{j}/bias"])
        x, c_act = layers.leaky_relu_forward(x, cfg.leaky_slope)
        x, c_drop = layers.dropout_forward(x, cfg.dropout, drop_rng)
        dense_caches.append((c_dense, c_act, c_drop))

    logits, c_out = layers.dense_forward(
        x, params.tensors["out/weight"], params.tensors["out/bias"])
    probs = layers.sigmoid(logits)
    cache = (conv_caches, (B, T, F_rem, C), gru_caches, dense_caches, c_out,
             probs)
    return probs, cache


def backward_batch(params: CrnnParams, cache, targets: np.ndarray) -> dict:
    """Gradients of the mean binary cross-entropy w.r.t. every tensor."""
    cfg = params.config
    conv_caches, conv_shape, gru_caches, dense_caches, c_out, probs = cache
    n_cells = probs.size
    in_bounds = (probs > BCE_EPS) & (probs < 1.0 - BCE_EPS)
    # d(loss)/d(logit) = (p - y)/n on unclipped cells, 0 where the clip binds
    dlogits = np.where(in_bounds, probs - targets, 0.0) / n_cells

    grads: dict[str, np.ndarray] = {}
    grad, dw, db = layers.dense_backward(dlogits, c_out)
    grads["out/weight"] = dw
    grads["out/bias"] = db

    for j in range(len(cfg.dense_units), 0, -1):
        c_dense, c_act, c_drop = dense_caches[j - 1]
        grad = layers.dropout_backward(grad, c_drop)
        grad = layers.leaky_relu_backward(grad, c_act)
        grad, dw, db = layers.dense_backward(grad, c_dense)
        grads[f"dense{j}/weight"] = dw
        grads[f"dense{j}/bias"] = db

    for layer in range(cfg.gru_layers, 0, -1):
        c_gru, c_drop = gru_caches[layer - 1]
        grad = layers.dropout_backward(grad, c_drop)
        grad, g_fw, g_bw = layers.bigru_backward(grad, c_gru)
        for name in GRU_TENSORS:
            grads[f"gru{layer}/fw/{name}"] = g_fw[name]
            grads[f"gru{layer}/bw/{name}"] = g_bw[name]

    B, T, F_rem, C = conv_shape
    grad = grad.reshape(B, T, C, F_rem).transpose(0, 1, 3, 2)
    _conv_stack_backward(params, grad, conv_caches, grads)
    return grads


def forward(features: np.ndarray, params: CrnnParams, mode: str = "eval",
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Single input (N, n_mels) -> (N, n_classes) probability matrix."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise ValueError(f"expected a 2-D feature matrix, got {feats.shape}")
    probs, _ = forward_batch(params, feats[None], train=(mode == "train"),
                             rng=rng)
    return probs[0]


def bce_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean binary cross-entropy over all cells; predictions are clipped
    to [eps, 1-eps] with eps = 1e-7."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    losses = -(target * np.log(p) + (1.0 - target) * np.log1p(-p))
    return float(losses.mean())


def bce_loss_grad(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Analytic d(bce_loss)/d(pred): (p - y) / (p (1 - p)) / n_cells on
    unclipped cells."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    p = np.clip(pred, BCE_EPS, 1.0 - BCE_EPS)
    grad = (p - target) / (p * (1.0 - p)) / pred.size
    grad[(pred < BCE_EPS) | (pred > 1.0 - BCE_EPS)] = 0.0
    return grad


def binarize(probs: np.ndarray, vocabulary: SpeciesVocabulary,
             frame_hop: float, threshold: float = 0.5) -> EventRoll:
    """Strict thresholding of an (N, S) probability matrix into an event
    roll: a cell is active iff its probability exceeds the threshold."""
    probs = np.asarray(probs)
    if probs.ndim != 2 or probs.shape[1] != vocabulary.size:
        raise ValueError(
            f"expected (frames, {vocabulary.size}) probabilities, got {probs.shape}")
    return EventRoll((probs > threshold).astype(np.uint8).T, frame_hop,
                     vocabulary)
