import math

import numpy as np
import pytest

from chorusbench.features import (
    CACHE_MAGIC,
    FeatureConfig,
    MelSpectrogram,
    StftConfig,
    compute_norm_stats,
    filterbank_centers,
    hann_window,
    hz_to_mel,
    load_features,
    log_mel,
    mel_filterbank,
    save_features,
    stft_power,
)

SR = 32000


def tone(freq, duration=5.0, sr=SR, amp=0.7):
    t = np.arange(round(duration * sr)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


class TestStftConfig:
    def test_hop_pinned_to_half_window(self):
        with pytest.raises(ValueError):
            StftConfig(n_fft=1024, hop=256)

    def test_power_of_two(self):
        with pytest.raises(ValueError):
            StftConfig(n_fft=1000, hop=500)


class TestStftPower:
    def test_five_seconds_is_313_frames(self):
        p = stft_power(np.zeros(160000), StftConfig())
        assert p.shape == (313, 513)

    def test_zero_signal_zero_matrix(self):
        p = stft_power(np.zeros(160000), StftConfig())
        assert p.sum() == 0.0

    def test_impulse_at_window_center_flat_spectrum(self):
        # the periodic Hann window equals 1 at its center, so a centered
        # unit impulse gives unit power in all 513 bins
        x = np.zeros(160000)
        frame = 100
        x[frame * 512] = 1.0
        p = stft_power(x, StftConfig())
        assert np.allclose(p[frame], 1.0, atol=1e-12)

    def test_impulse_frame_matches_direct_dft(self):
        x = np.zeros(16000)
        frame = 10
        x[frame * 512] = 1.0
        p = stft_power(x, StftConfig())
        padded = np.pad(x, 512, mode="reflect")
        windowed = padded[frame * 512:frame * 512 + 1024] * hann_window(1024)
        k = np.arange(513)[:, None]
        n = np.arange(1024)[None, :]
        dft = (windowed[None, :] * np.exp(-2j * np.pi * k * n / 1024)).sum(axis=1)
        assert np.allclose(np.abs(dft) ** 2, p[frame], atol=1e-10)

    def test_frame_count_formula_random_lengths(self, rng):
        cfg = StftConfig()
        for _ in range(100):
            n = int(rng.integers(1, 50000))
            p = stft_power(rng.normal(size=n), cfg)
            # literal sliding-window enumeration over the padded signal
            padded = n + 1024
            count = len(range(0, padded - 1024 + 1, 512))
            assert p.shape[0] == n // 512 + 1 == count

    def test_energy_scales_quadratically(self):
        x = tone(1000)
        e1 = stft_power(x, StftConfig()).sum()
        e3 = stft_power(3.0 * x, StftConfig()).sum()
        assert abs(e3 - 9.0 * e1) <= 1e-6 * 9.0 * e1


class TestMelFilterbank:
    def test_htk_formula_at_700(self):
        assert hz_to_mel(700.0) == pytest.approx(2595.0 * math.log10(2.0),
                                                 rel=1e-12)

    def test_mel_of_zero(self):
        assert hz_to_mel(0.0) == 0.0

    def test_center_bins_strictly_increasing(self):
        # filter centers, in bin units, rise strictly; the integer peak
        # bins can only tie where filters are narrower than one bin
        bin_width = SR / 1024
        centers = filterbank_centers(SR, 128) / bin_width
        assert np.all(np.diff(centers) > 0)
        peaks = mel_filterbank(SR, 1024, 128).argmax(axis=1)
        assert np.all(np.diff(peaks) >= 0)

    def test_rows_nonnegative_unimodal(self):
        fb = mel_filterbank(SR, 1024, 128)
        assert (fb >= 0).all()
        for row in fb:
            support = np.flatnonzero(row)
            peak = row.argmax()
            assert np.all(np.diff(row[support[0]:peak + 1]) >= 0)
            assert np.all(np.diff(row[peak:support[-1] + 1]) <= 0)

    def test_too_many_bands_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            mel_filterbank(SR, 64, 128)


class TestLogMel:
    def test_shape_313_by_128(self):
        m = log_mel(tone(2000), FeatureConfig())
        assert (m.n_frames, m.n_bands) == (313, 128)
        assert m.frame_hop == 512 / SR

    def test_zero_input_hits_floor(self):
        m = log_mel(np.zeros(160000), FeatureConfig())
        assert np.allclose(m.values, math.log(1e-10))

    def test_tone_argmax_matches_center_oracle(self):
        m = log_mel(tone(1000), FeatureConfig())
        centers = filterbank_centers(SR, 128)
        oracle = int(np.argmin(np.abs(centers - 1000.0)))
        interior = m.values.argmax(axis=1)[2:-2]
        assert (interior == oracle).mean() >= 0.95

    def test_no_nonfinite_for_bounded_input(self, rng):
        for _ in range(5):
            x = rng.uniform(-1, 1, size=int(rng.integers(600, 30000)))
            m = log_mel(x, FeatureConfig())
            assert np.isfinite(m.values).all()

    def test_shift_by_hop_reindexes_interior_frames(self, rng):
        x = rng.normal(0, 0.2, 32000)
        cfg = FeatureConfig()
        k = 3
        shifted = np.concatenate([np.zeros(k * 512), x])
        a = log_mel(x, cfg).values
        b = log_mel(shifted, cfg).values
        # away from both signals' padded edges, frame m of x equals
        # frame m+k of the shifted signal
        for m in range(2, a.shape[0] - 2):
            assert np.allclose(a[m], b[m + k], rtol=1e-9, atol=1e-9)


class TestNormStats:
    def test_mean_zero_std_one_after_standardizing(self, rng):
        mels = [MelSpectrogram(rng.normal(2.0, 3.0, (40, 8)), 0.016)
                for _ in range(4)]
        mean, std = compute_norm_stats(mels)
        stacked = np.concatenate([m.values for m in mels], axis=0)
        z = (stacked - mean) / std
        assert np.allclose(z.mean(axis=0), 0.0, atol=1e-9)
        assert np.allclose(z.std(axis=0), 1.0, atol=1e-6)


class TestFeatureCache:
    def test_roundtrip(self, tmp_path, rng):
        mel = MelSpectrogram(rng.normal(size=(50, 16)).astype(np.float32),
                             0.016)
        path = tmp_path / "scene.melf"
        save_features(path, mel)
        raw = path.read_bytes()
        assert raw[:8] == CACHE_MAGIC
        assert len(raw) == 16 + 4 * 50 * 16
        loaded = load_features(path, frame_hop=0.016)
        assert loaded.values.shape == (50, 16)
        assert np.allclose(loaded.values, mel.values)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.melf"
        path.write_bytes(b"NOTMAGIC" + b"\0" * 8)
        with pytest.raises(ValueError, match="not a feature cache"):
            load_features(path, 0.016)
