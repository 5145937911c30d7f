"""Log-mel spectrogram front end.

Waveforms become N x M matrices of natural-log power in M mel bands,
computed from a centered power STFT (1024-point Hann window, hop 512)
so that a 5 s clip at 32 kHz yields exactly 313 frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

LOG_FLOOR_EPS = 1e-10

CACHE_MAGIC = b"CBMELF01"


@dataclass(frozen=True)
class StftConfig:
    """Centered power-STFT settings; hop is pinned to half the window."""

    n_fft: int = 1024
    hop: int = 512
    center: bool = True

    def __post_init__(self):
        if self.n_fft <= 0 or (self.n_fft & (self.n_fft - 1)) != 0:
            raise ValueError(f"n_fft must be a power of two, got {self.n_fft}")
        if self.hop != self.n_fft // 2:
            raise ValueError(
                f"hop must be n_fft/2 ({self.n_fft // 2}), got {self.hop}"
            )


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 32000
    stft: StftConfig = field(default_factory=StftConfig)
    n_mels: int = 128
    f_min: float = 0.0
    f_max: float | None = None  # None -> Nyquist

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        f_max = self.sample_rate / 2 if self.f_max is None else self.f_max
        if not (0 <= self.f_min < f_max <= self.sample_rate / 2):
            raise ValueError(
                f"need 0 <= f_min < f_max <= Nyquist, got "
                f"[{self.f_min}, {f_max}] at sr {self.sample_rate}"
            )

    @property
    def frame_hop(self) -> float:
        return self.stft.hop / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    """N x M matrix of log-power mel features."""

    values: np.ndarray
    frame_hop: float

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"expected 2-D feature matrix, got {v.shape}")
        if not np.isfinite(v).all():
            raise ValueError("mel spectrogram contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bands(self) -> int:
        return self.values.shape[1]


def hann_window(n: int) -> np.ndarray:
    # Periodic form: w[k] = 0.5 * (1 - cos(2 pi k / n)).
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def stft_power(samples: np.ndarray, config: StftConfig) -> np.ndarray:
    """Squared-magnitude STFT, shape (n_frames, n_fft/2 + 1).

    With centering the signal is reflect-padded by n_fft/2 on each side and
    the frame count is floor(len/hop) + 1.
    """
    x = np.asarray(samples, dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise ValueError("empty sample sequence")
    n_fft, hop = config.n_fft, config.hop
    if config.center:
        pad = n_fft // 2
        if x.size > 1:
            x = np.pad(x, pad, mode="reflect")
        else:
            x = np.pad(x, pad, mode="constant")
    if x.size < n_fft:
        x = np.pad(x, (0, n_fft - x.size), mode="constant")
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop]
    spectrum = np.fft.rfft(frames * hann_window(n_fft), axis=1)
    return np.abs(spectrum) ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int,
                   f_min: float = 0.0,
                   f_max: float | None = None) -> np.ndarray:
    """Triangular filters, centers equally spaced on the mel scale,
    shape (n_mels, n_fft/2 + 1). Each row is nonnegative and unimodal
    with peak 1."""
    if f_max is None:
        f_max = sample_rate / 2
    if not (0 <= f_min < f_max <= sample_rate / 2):
        raise ValueError(f"bad band edges [{f_min}, {f_max}]")
    mel_points = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)

    fb = np.zeros((n_mels, bin_freqs.size))
    for m in range(n_mels):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_freqs - left) / (center - left)
        falling = (right - bin_freqs) / (right - center)
        fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
        if not fb[m].any():
            raise ValueError(
                f"mel filter {m} is empty: {n_mels} bands exceed the "
                f"frequency resolution of n_fft={n_fft}"
            )
    return fb


def filterbank_centers(sample_rate: int, n_mels: int, f_min: float = 0.0,
                       f_max: float | None = None) -> np.ndarray:
    """Center frequency (Hz) of each mel filter."""
    if f_max is None:
        f_max = sample_rate / 2
    mel_points = np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2)
    return mel_to_hz(mel_points)[1:-1]


def log_mel(samples: np.ndarray, config: FeatureConfig) -> MelSpectrogram:
    """Natural-log mel-power features: ln(filterbank @ power + eps)."""
    power = stft_power(samples, config.stft)
    fb = mel_filterbank(config.sample_rate, config.stft.n_fft, config.n_mels,
                        config.f_min, config.f_max)
    values = np.log(power @ fb.T + LOG_FLOOR_EPS)
    return MelSpectrogram(values, frame_hop=config.frame_hop)


def compute_norm_stats(features: list[MelSpectrogram]) -> tuple[np.ndarray, np.ndarray]:
    """Per-band mean and standard deviation over all frames of all inputs.

    Stored alongside model parameters so inference standardizes inputs the
    same way training did. Std is floored at 1e-6 to avoid division blowups
    on constant bands.
    """
    if not features:
        raise ValueError("no feature matrices given")
    stacked = np.concatenate([f.values for f in features], axis=0)
    mean = stacked.mean(axis=0)
    std = np.maximum(stacked.std(axis=0), 1e-6)
    return mean, std


def save_features(path, mel: MelSpectrogram) -> None:
    """Write one feature matrix to the cache format.

    Layout: 8-byte magic "CBMELF01", uint32 little-endian N, uint32
    little-endian M (16-byte header total), then N*M row-major
    little-endian float32 values.
    """
    n, m = mel.values.shape
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<II", n, m))
        fh.write(np.ascontiguousarray(mel.values, dtype="<f4").tobytes())


def load_features(path, frame_hop: float) -> MelSpectrogram:
    """Read a cached feature matrix written by save_features."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CACHE_MAGIC:
            raise ValueError(f"{path}: not a feature cache file")
        n, m = struct.unpack("<II", fh.read(8))
        data = np.frombuffer(fh.read(4 * n * m), dtype="<f4")
        if data.size != n * m:
            raise ValueError(f"{path}: truncated feature cache file")
    return MelSpectrogram(data.reshape(n, m).astype(np.float64),
                          frame_hop=frame_hop)
