"""Independent brute-force oracles used to check the optimized paths.

These intentionally re-derive results from first principles (python loops,
sets, literal formulas) instead of sharing code with the package.
"""

from __future__ import annotations

import math

import numpy as np


def brute_force_polyphony(events) -> int:
    """Count active events at every onset instant (intervals half-open)."""
    best = 0
    for probe in events:
        t = probe.onset
        active = sum(1 for e in events if e.onset <= t < e.offset)
        best = max(best, active)
    return best


def brute_force_segment_counts(ref_matrix, pred_matrix, frame_hop,
                               segment_length):
    """Materialize per-segment active-class sets and compare them.

    Returns dict of aggregate integers: tp, fp, fn, n, s, d, i.
    """
    n_classes, n_frames = ref_matrix.shape
    seg_of_frame = [math.floor(n * frame_hop / segment_length)
                    for n in range(n_frames)]
    segments = sorted(set(seg_of_frame))
    ref_sets = {g: set() for g in segments}
    pred_sets = {g: set() for g in segments}
    for n in range(n_frames):
        g = seg_of_frame[n]
        for c in range(n_classes):
            if ref_matrix[c, n]:
                ref_sets[g].add(c)
            if pred_matrix[c, n]:
                pred_sets[g].add(c)
    agg = {"tp": 0, "fp": 0, "fn": 0, "n": 0, "s": 0, "d": 0, "i": 0}
    for g in segments:
        r, p = ref_sets[g], pred_sets[g]
        tp = len(r & p)
        fp = len(p - r)
        fn = len(r - p)
        agg["tp"] += tp
        agg["fp"] += fp
        agg["fn"] += fn
        agg["n"] += len(r)
        agg["s"] += min(fn, fp)
        agg["d"] += max(0, fn - fp)
        agg["i"] += max(0, fp - fn)
    return agg


def fft_peak_hz(samples, sample_rate) -> float:
    """Frequency of the dominant rFFT magnitude bin."""
    spectrum = np.abs(np.fft.rfft(samples))
    freqs = np.fft.rfftfreq(len(samples), 1.0 / sample_rate)
    return float(freqs[int(np.argmax(spectrum))])


def fft_bin_width(n_samples, sample_rate) -> float:
    return sample_rate / n_samples


def frame_level_f1(pred_cells, target_cells) -> float:
    """Micro F1 over binary (frame, class) cells."""
    pred = np.asarray(pred_cells, dtype=bool)
    target = np.asarray(target_cells, dtype=bool)
    tp = int(np.sum(pred & target))
    fp = int(np.sum(pred & ~target))
    fn = int(np.sum(~pred & target))
    if 2 * tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2 * tp + fp + fn)


def finite_difference_grads(loss_fn, tensor, step=1e-4):
    """Central finite differences of loss_fn() w.r.t. every tensor element
    (tensor is perturbed in place and restored)."""
    grad = np.zeros_like(tensor)
    flat = tensor.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn()
        flat[i] = orig - step
        down = loss_fn()
        flat[i] = orig
        grad_flat[i] = (up - down) / (2.0 * step)
    return grad


def relative_error(a, b, floor=1e-6):
    """Elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def frame_energy(samples, sample_rate, frame_hop) -> np.ndarray:
    """RMS per frame-hop window (uncentered), one value per hop."""
    hop = round(frame_hop * sample_rate)
    n_frames = len(samples) // hop
    trimmed = samples[:n_frames * hop].reshape(n_frames, hop)
    return np.sqrt((trimmed ** 2).mean(axis=1))
