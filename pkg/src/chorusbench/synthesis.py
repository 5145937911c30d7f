"""Polyphony-controlled scene synthesis.

Long recordings are blocked into fixed-length clips, optionally augmented
(time stretch, pitch shift, circular time shift), and mixed into scenes
whose measured polyphony never exceeds the subset's cap. A synthetic
tone-burst pool stands in for real recordings in tests.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.signal
from scipy.io import wavfile

from .annotations import (
    AnnotationSet,
    Event,
    max_polyphony,
    merge_annotation_sets,
    parse_selection_table,
    serialize_selection_table,
)
from .rng import substream

DEFAULT_SAMPLE_RATE = 32000
DEFAULT_SCENE_SECONDS = 5.0

# One failed clip-slot draw chain this long aborts the slot (scene keeps
# whatever already fit, matching the "or less" polyphony contract).
REJECTION_CAP = 50


class SynthesisError(RuntimeError):
    pass


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform in [-1, 1] plus its annotations."""

    samples: np.ndarray
    sample_rate: int
    annotations: AnnotationSet

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        expected = self.annotations.duration * self.sample_rate
        if abs(samples.size - expected) > 1.0:
            raise ValueError(
                f"annotation duration {self.annotations.duration}s does not "
                f"match {samples.size} samples at {self.sample_rate} Hz"
            )

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def source_id(self) -> str:
        return self.annotations.source_id


@dataclass(frozen=True)
class Provenance:
    source_id: str
    gain: float
    augmentation: str = "none"

    def to_dict(self) -> dict:
        return {"source": self.source_id, "gain": self.gain,
                "augmentation": self.augmentation}


@dataclass(frozen=True)
class Scene:
    clip: AudioClip
    target_polyphony: int
    provenance: tuple[Provenance, ...]

    def __post_init__(self):
        peak = float(np.max(np.abs(self.clip.samples))) if self.clip.samples.size else 0.0
        if peak > 1.0 + 1e-9:
            raise ValueError(f"scene peak {peak} exceeds 1.0")
        measured = max_polyphony(self.clip.annotations)
        if measured > self.target_polyphony:
            raise ValueError(
                f"scene polyphony {measured} exceeds target {self.target_polyphony}"
            )


@dataclass(frozen=True)
class SceneRecord:
    audio_path: str
    annotation_path: str
    measured_polyphony: int
    provenance: tuple[Provenance, ...]

    def to_dict(self) -> dict:
        return {
            "audio_path": self.audio_path,
            "annotation_path": self.annotation_path,
            "measured_polyphony": self.measured_polyphony,
            "provenance": [p.to_dict() for p in self.provenance],
        }


@dataclass(frozen=True)
class SubsetManifest:
    scenes: tuple[SceneRecord, ...]
    max_polyphony: int
    seed: int
    split: str
    sample_rate: int = DEFAULT_SAMPLE_RATE
    scene_duration: float = DEFAULT_SCENE_SECONDS
    exact_polyphony: bool = False
    augment: bool = False
    pool_note: str = ""

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "max_polyphony": self.max_polyphony,
            "split": self.split,
            "sample_rate": self.sample_rate,
            "scene_duration": self.scene_duration,
            "exact_polyphony": self.exact_polyphony,
            "augment": self.augment,
            "pool_note": self.pool_note,
            "scenes": [s.to_dict() for s in self.scenes],
        }


def save_manifest(manifest: SubsetManifest, path) -> None:
    Path(path).write_text(
        json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")


def load_manifest(path) -> SubsetManifest:
    data = json.loads(Path(path).read_text())
    scenes = tuple(
        SceneRecord(
            audio_path=s["audio_path"],
            annotation_path=s["annotation_path"],
            measured_polyphony=s["measured_polyphony"],
            provenance=tuple(Provenance(p["source"], p["gain"], p["augmentation"])
                             for p in s["provenance"]),
        )
        for s in data["scenes"]
    )
    return SubsetManifest(
        scenes=scenes,
        max_polyphony=data["max_polyphony"],
        seed=data["seed"],
        split=data["split"],
        sample_rate=data.get("sample_rate", DEFAULT_SAMPLE_RATE),
        scene_duration=data.get("scene_duration", DEFAULT_SCENE_SECONDS),
        exact_polyphony=data.get("exact_polyphony", False),
        augment=data.get("augment", False),
        pool_note=data.get("pool_note", ""),
    )


def save_clip(clip: AudioClip, audio_path, annotation_path=None) -> None:
    """Write a clip as 32-bit float WAV plus a sibling annotation TSV."""
    wavfile.write(audio_path, clip.sample_rate,
                  clip.samples.astype(np.float32))
    if annotation_path is not None:
        Path(annotation_path).write_text(
            serialize_selection_table(clip.annotations))


def load_clip(audio_path, annotation_path=None, source_id=None) -> AudioClip:
    """Read a WAV (float or 16-bit PCM) and its optional annotation TSV."""
    rate, data = wavfile.read(audio_path)
    if data.ndim > 1:
        data = data[:, 0]
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    else:
        samples = data.astype(np.float64)
    duration = samples.size / rate
    sid = source_id if source_id is not None else Path(audio_path).stem
    if annotation_path is not None:
        annotations = parse_selection_table(
            Path(annotation_path).read_text(), duration=duration, source_id=sid)
    else:
        annotations = AnnotationSet((), source_id=sid, duration=duration)
    return AudioClip(samples, rate, annotations)


def load_scene_clips(manifest: SubsetManifest, base_dir=None) -> list[AudioClip]:
    base = Path(base_dir) if base_dir is not None else None
    clips = []
    for record in manifest.scenes:
        audio = Path(record.audio_path)
        anns = Path(record.annotation_path)
        if base is not None and not audio.is_absolute():
            audio, anns = base / audio, base / anns
        clips.append(load_clip(audio, anns))
    return clips


def frame_blocking(recording: AudioClip, frame_len: float = DEFAULT_SCENE_SECONDS,
                   hop: float = 2.5) -> list[AudioClip]:
    """Slice a recording into fixed-length clips at a fixed hop.

    Clips start at 0, hop, 2*hop, ...; the tail shorter than frame_len is
    discarded. Each clip's annotations are the source events intersected
    with its window, re-timed to clip-local coordinates.
    """
    if frame_len <= 0 or hop <= 0:
        raise ValueError("frame_len and hop must be positive")
    sr = recording.sample_rate
    frame_samples = round(frame_len * sr)
    hop_samples = round(hop * sr)
    n = recording.samples.size
    if n < frame_samples:
        return []
    count = (n - frame_samples) // hop_samples + 1

    clips = []
    for k in range(count):
        start = k * hop_samples
        window = recording.samples[start:start + frame_samples]
        t0 = start / sr
        t1 = t0 + frame_samples / sr
        events = []
        for e in recording.annotations.events:
            if e.offset <= t0 or e.onset >= t1:
                continue
            events.append(Event(max(e.onset, t0) - t0, min(e.offset, t1) - t0,
                                e.species_code, e.low_freq, e.high_freq))
        annotations = AnnotationSet(
            tuple(events), source_id=f"{recording.source_id}[{k}]",
            duration=frame_samples / sr)
        clips.append(AudioClip(window.copy(), sr, annotations))
    return clips


def _stft_frames(x: np.ndarray, n_fft: int, hop: int) -> np.ndarray:
    n_frames = max(1, 1 + (x.size - n_fft) // hop) if x.size >= n_fft else 1
    needed = (n_frames - 1) * hop + n_fft
    if x.size < needed:
        x = np.pad(x, (0, needed - x.size))
    return np.lib.stride_tricks.sliding_window_view(x, n_fft)[::hop][:n_frames]


def _istft_overlap_add(frames: np.ndarray, window: np.ndarray, hop: int,
                       length: int) -> np.ndarray:
    n_fft = window.size
    total = (frames.shape[0] - 1) * hop + n_fft
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = window * window
    for t in range(frames.shape[0]):
        seg = np.fft.irfft(frames[t], n=n_fft)
        out[t * hop:t * hop + n_fft] += seg * window
        norm[t * hop:t * hop + n_fft] += wsq
    out /= np.maximum(norm, 1e-8)
    if out.size < length:
        out = np.pad(out, (0, length - out.size))
    return out[:length]


def _phase_vocoder(x: np.ndarray, rate: float, n_fft: int = 1024,
                   hop: int = 256) -> np.ndarray:
    """Time-stretch a waveform by 1/rate without changing pitch."""
    window = 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n_fft) / n_fft))
    spec = np.fft.rfft(_stft_frames(x, n_fft, hop) * window, axis=1)
    n_frames = spec.shape[0]
    out_len = int(round(x.size / rate))

    steps = np.arange(0, max(n_frames - 1, 1), rate)
    omega = 2.0 * np.pi * hop * np.arange(spec.shape[1]) / n_fft
    out_spec = np.zeros((steps.size, spec.shape[1]), dtype=complex)
    phase = np.angle(spec[0])
    mag_pad = np.vstack([np.abs(spec), np.abs(spec[-1:])])
    ang = np.angle(spec)
    ang_pad = np.vstack([ang, ang[-1:]])

    for i, s in enumerate(steps):
        lo = int(s)
        frac = s - lo
        mag = (1.0 - frac) * mag_pad[lo] + frac * mag_pad[lo + 1]
        out_spec[i] = mag * np.exp(1j * phase)
        dphi = ang_pad[lo + 1] - ang_pad[lo] - omega
        dphi -= 2.0 * np.pi * np.round(dphi / (2.0 * np.pi))
        phase = phase + omega + dphi

    return _istft_overlap_add(out_spec, window, hop, out_len)


def fit_to_duration(clip: AudioClip, duration: float) -> AudioClip:
    """Crop or zero-pad a clip (and its annotations) to an exact duration."""
    target = round(duration * clip.sample_rate)
    x = clip.samples
    if x.size > target:
        x = x[:target]
    elif x.size < target:
        x = np.pad(x, (0, target - x.size))
    events = []
    for e in clip.annotations.events:
        if e.onset >= duration:
            continue
        events.append(Event(e.onset, min(e.offset, duration), e.species_code,
                            e.low_freq, e.high_freq))
    annotations = AnnotationSet(tuple(events), clip.annotations.source_id,
                                duration=target / clip.sample_rate)
    return AudioClip(x, clip.sample_rate, annotations)


def time_stretch(clip: AudioClip, rate: float,
                 target_duration: float | None = None) -> AudioClip:
    """Stretch duration by 1/rate, preserving pitch (phase vocoder).

    Event times are divided by rate. If target_duration is given, the
    result is re-cropped or zero-padded to that length (used when feeding
    augmented clips back into fixed-length scenes).
    """
    if not 0.5 <= rate <= 2.0:
        raise ValueError(f"stretch rate must be in [0.5, 2.0], got {rate}")
    if rate == 1.0:
        out = clip
    else:
        stretched = _phase_vocoder(clip.samples, rate)
        events = tuple(Event(e.onset / rate, e.offset / rate, e.species_code,
                             e.low_freq, e.high_freq)
                       for e in clip.annotations.events)
        annotations = AnnotationSet(
            events, source_id=clip.source_id,
            duration=stretched.size / clip.sample_rate)
        out = AudioClip(np.clip(stretched, -1.0, 1.0), clip.sample_rate,
                        annotations)
    if target_duration is not None:
        out = fit_to_duration(out, target_duration)
    return out


def pitch_shift(clip: AudioClip, semitones: float) -> AudioClip:
    """Scale spectral content by 2^(semitones/12); duration and annotations
    are unchanged."""
    if not -12.0 <= semitones <= 12.0:
        raise ValueError(f"semitones must be in [-12, 12], got {semitones}")
    if semitones == 0.0:
        return clip
    factor = 2.0 ** (semitones / 12.0)
    stretched = _phase_vocoder(clip.samples, 1.0 / factor)
    resampled = scipy.signal.resample(stretched, clip.samples.size)
    return AudioClip(np.clip(resampled, -1.0, 1.0), clip.sample_rate,
                     clip.annotations)


def time_shift(clip: AudioClip, shift: float) -> AudioClip:
    """Circularly rotate the waveform; events wrap modulo the clip duration
    and are split when they cross the boundary."""
    n = clip.samples.size
    sr = clip.sample_rate
    duration = n / sr
    offset = round(shift * sr) % n
    if offset == 0:
        return clip
    rolled = np.roll(clip.samples, offset)
    dt = offset / sr
    events = []
    for e in clip.annotations.events:
        onset = (e.onset + dt) % duration
        offset_t = onset + e.duration
        if offset_t <= duration + 1e-12:
            events.append(Event(onset, min(offset_t, duration), e.species_code,
                                e.low_freq, e.high_freq))
        else:
            events.append(Event(onset, duration, e.species_code,
                                e.low_freq, e.high_freq))
            events.append(Event(0.0, offset_t - duration, e.species_code,
                                e.low_freq, e.high_freq))
    annotations = AnnotationSet(tuple(events), clip.source_id,
                                duration=clip.annotations.duration)
    return AudioClip(rolled, sr, annotations)


def mix_scene(clips: list[AudioClip], gains: list[float],
              augmentations: list[str] | None = None) -> Scene:
    """Sum gain-weighted clips into one scene.

    The raw sum is kept unless its peak exceeds 1.0, in which case the
    waveform is normalized to a peak of exactly 0.9 (annotations are
    unaffected). Target polyphony is the measured maximum.
    """
    if not clips or len(clips) != len(gains):
        raise ValueError("need equally many clips and gains, at least one")
    sr = clips[0].sample_rate
    n = clips[0].samples.size
    for c in clips:
        if c.sample_rate != sr:
            raise ValueError("sample rates differ between clips")
        if c.samples.size != n:
            raise ValueError("clip lengths differ")
    if augmentations is None:
        augmentations = ["none"] * len(clips)

    mixture = np.zeros(n)
    for c, g in zip(clips, gains):
        mixture += g * c.samples
    peak = float(np.max(np.abs(mixture))) if n else 0.0
    if peak > 1.0:
        mixture *= 0.9 / peak

    duration = n / sr
    annotations = merge_annotation_sets(
        [c.annotations for c in clips], [0.0] * len(clips), duration)
    clip = AudioClip(mixture, sr, annotations)
    provenance = tuple(
        Provenance(c.source_id, float(g), a)
        for c, g, a in zip(clips, gains, augmentations))
    return Scene(clip, target_polyphony=max(max_polyphony(annotations), 1),
                 provenance=provenance)


def _augment(clip: AudioClip, rng: np.random.Generator,
             scene_duration: float) -> tuple[AudioClip, str]:
    choice = rng.integers(3)
    if choice == 0:
        rate = float(rng.uniform(0.9, 1.1))
        return (time_stretch(clip, rate, target_duration=scene_duration),
                f"stretch:{rate:.4f}")
    if choice == 1:
        semitones = float(rng.uniform(-2.0, 2.0))
        return pitch_shift(clip, semitones), f"pitch:{semitones:+.4f}"
    shift = float(rng.uniform(0.0, clip.duration))
    return time_shift(clip, shift), f"shift:{shift:.4f}"


def _build_scene(pool: list[AudioClip], cap: int, target_sources: int,
                 rng: np.random.Generator, augment: bool,
                 scene_duration: float,
                 require_exact: bool) -> Scene | None:
    """One rejection-sampled scene; None if an exact-polyphony target
    could not be met."""
    chosen: list[AudioClip] = []
    gains: list[float] = []
    descriptors: list[str] = []
    merged: list[AnnotationSet] = []
    rejections = 0
    attempts = 0
    max_attempts = 60 * max(cap, target_sources)

    def measured() -> int:
        if not merged:
            return 0
        return max_polyphony(merge_annotation_sets(
            merged, [0.0] * len(merged), scene_duration))

    while attempts < max_attempts:
        if require_exact:
            if measured() == cap:
                break
        elif len(chosen) >= target_sources:
            break
        attempts += 1
        clip = pool[int(rng.integers(len(pool)))]
        descriptor = "none"
        if augment and rng.random() < 0.5:
            clip, descriptor = _augment(clip, rng, scene_duration)
        clip = fit_to_duration(clip, scene_duration)
        gain = float(rng.uniform(0.5, 1.0))
        candidate = merged + [clip.annotations]
        poly = max_polyphony(merge_annotation_sets(
            candidate, [0.0] * len(candidate), scene_duration))
        if poly <= cap:
            chosen.append(clip)
            gains.append(gain)
            descriptors.append(descriptor)
            merged = candidate
            rejections = 0
        else:
            rejections += 1
            if not require_exact and rejections >= REJECTION_CAP:
                break

    if not chosen:
        raise SynthesisError(
            "pool too sparse: no clip fits even a polyphony-1 scene")
    if require_exact and measured() != cap:
        return None
    scene = mix_scene(chosen, gains, descriptors)
    # report the subset cap, not the measured value, as the scene target
    return Scene(scene.clip, target_polyphony=cap, provenance=scene.provenance)


def synthesize_scenes(pool: list[AudioClip], max_polyphony_cap: int,
                      n_scenes: int, seed: int, augment: bool = False,
                      scene_duration: float = DEFAULT_SCENE_SECONDS,
                      exact_polyphony: bool = False) -> list[Scene]:
    """Generate scenes whose measured polyphony stays <= the cap.

    Each scene draws its own random stream from (seed, scene index), so
    output is independent of generation order. With exact_polyphony, scenes
    are regenerated (bounded retries) until measured polyphony equals the
    cap.
    """
    if not pool:
        raise SynthesisError("empty clip pool")
    if max_polyphony_cap < 1:
        raise ValueError("max_polyphony must be >= 1")
    for clip in pool:
        if not clip.annotations.events:
            raise ValueError(
                f"pool clip {clip.source_id!r} has no events")

    scenes = []
    for i in range(n_scenes):
        scene = None
        for retry in range(40):
            rng = substream(seed, "scene", i, retry)
            target = int(rng.integers(1, max_polyphony_cap + 1))
            scene = _build_scene(pool, max_polyphony_cap, target, rng, augment,
                                 scene_duration, require_exact=exact_polyphony)
            if scene is not None:
                break
        if scene is None:
            raise SynthesisError(
                f"could not reach exact polyphony {max_polyphony_cap} "
                f"for scene {i}")
        scenes.append(scene)
    return scenes


def write_subset(scenes: list[Scene], out_dir, max_polyphony_cap: int,
                 seed: int, split: str, augment: bool = False,
                 exact_polyphony: bool = False,
                 pool_note: str = "") -> SubsetManifest:
    """Persist scenes as WAV + annotation TSV pairs plus a manifest JSON."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    sr = scenes[0].clip.sample_rate if scenes else DEFAULT_SAMPLE_RATE
    duration = scenes[0].clip.duration if scenes else DEFAULT_SCENE_SECONDS
    for i, scene in enumerate(scenes):
        stem = f"{split}_p{max_polyphony_cap}_{i:05d}"
        audio_path = out / f"{stem}.wav"
        ann_path = out / f"{stem}.txt"
        save_clip(scene.clip, audio_path, ann_path)
        records.append(SceneRecord(
            audio_path=audio_path.name,
            annotation_path=ann_path.name,
            measured_polyphony=max_polyphony(scene.clip.annotations),
            provenance=scene.provenance,
        ))
    manifest = SubsetManifest(
        scenes=tuple(records), max_polyphony=max_polyphony_cap, seed=seed,
        split=split, sample_rate=sr, scene_duration=duration,
        exact_polyphony=exact_polyphony, augment=augment, pool_note=pool_note)
    save_manifest(manifest, out / "manifest.json")
    return manifest


def synthesize_subset(pool: list[AudioClip], max_polyphony_cap: int,
                      n_scenes: int, seed: int, out_dir,
                      augment: bool = False, split: str = "train",
                      scene_duration: float = DEFAULT_SCENE_SECONDS,
                      exact_polyphony: bool = False,
                      pool_note: str = "") -> SubsetManifest:
    """synthesize_scenes + write_subset in one step."""
    scenes = synthesize_scenes(pool, max_polyphony_cap, n_scenes, seed,
                               augment=augment, scene_duration=scene_duration,
                               exact_polyphony=exact_polyphony)
    return write_subset(scenes, out_dir, max_polyphony_cap, seed, split,
                        augment=augment, exact_polyphony=exact_polyphony,
                        pool_note=pool_note)


def _place_bursts(rng: np.random.Generator, clip_duration: float,
                  n_bursts: int) -> list[tuple[float, float]]:
    placed: list[tuple[float, float]] = []
    for _ in range(n_bursts):
        for _ in range(100):
            length = float(rng.uniform(0.5, 2.0))
            onset = float(rng.uniform(0.0, clip_duration - length))
            if all(onset >= t1 + 0.1 or onset + length <= t0 - 0.1
                   for t0, t1 in placed):
                placed.append((onset, onset + length))
                break
    placed.sort()
    return placed


def generate_synthetic_pool(n_species: int, clips_per_species: int, seed: int,
                            sample_rate: int = DEFAULT_SAMPLE_RATE,
                            clip_duration: float = DEFAULT_SCENE_SECONDS
                            ) -> list[AudioClip]:
    """Deterministic tone-burst clips standing in for real recordings.

    Species s emits enveloped sine bursts near 1000 + 700*s Hz (code
    "SYN<s>"); each clip holds 1-3 non-overlapping bursts of 0.5-2 s, so
    every pool clip has polyphony 1.
    """
    if n_species < 1:
        raise ValueError("n_species must be >= 1")
    if n_species * 700 + 1000 > sample_rate / 2:
        raise ValueError(
            f"{n_species} species would exceed the Nyquist frequency "
            f"{sample_rate / 2} Hz")
    n_samples = round(clip_duration * sample_rate)
    t = np.arange(n_samples) / sample_rate
    clips = []
    for s in range(n_species):
        center = 1000.0 + 700.0 * s
        code = f"SYN{s}"
        for c in range(clips_per_species):
            rng = substream(seed, "pool", s, c)
            bursts = _place_bursts(rng, clip_duration,
                                   int(rng.integers(1, 4)))
            samples = np.zeros(n_samples)
            events = []
            for onset, offset in bursts:
                freq = center + float(rng.uniform(-50.0, 50.0))
                amp = float(rng.uniform(0.4, 0.8))
                phase = float(rng.uniform(0.0, 2.0 * np.pi))
                i0, i1 = round(onset * sample_rate), round(offset * sample_rate)
                seg_t = t[i0:i1]
                tone = amp * np.sin(2.0 * np.pi * freq * seg_t + phase)
                ramp = min(0.05, (offset - onset) / 4)
                env = np.minimum.reduce([
                    np.ones(i1 - i0),
                    (seg_t - onset) / ramp,
                    (offset - seg_t) / ramp,
                ])
                samples[i0:i1] += tone * np.clip(env, 0.0, 1.0)
                events.append(Event(onset, offset, code,
                                    low_freq=center - 100.0,
                                    high_freq=center + 100.0))
            annotations = AnnotationSet(
                tuple(events), source_id=f"{code}_{c:03d}",
                duration=clip_duration)
            clips.append(AudioClip(samples, sample_rate, annotations))
    return clips
