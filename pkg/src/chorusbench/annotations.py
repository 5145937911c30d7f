"""Annotation data model for timestamped species vocalizations.

Covers parsing/serializing tab-separated selection tables, species
vocabulary construction, exact polyphony measurement, and conversion
between event lists and binary class-by-frame presence matrices
("event rolls").

Intervals are half-open [onset, offset): events that touch end-to-start
do not overlap.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

BEGIN_COL = "Begin Time (s)"
END_COL = "End Time (s)"
SPECIES_COL = "Species"
LOW_FREQ_COL = "Low Freq (Hz)"
HIGH_FREQ_COL = "High Freq (Hz)"

REQUIRED_COLS = (BEGIN_COL, END_COL, SPECIES_COL)


class SelectionTableError(ValueError):
    """Malformed selection table; ``line`` is the 1-based line in the text."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


@dataclass(frozen=True)
class Event:
    """One labeled vocalization: [onset, offset) seconds plus a species code."""

    onset: float
    offset: float
    species_code: str
    low_freq: float | None = None
    high_freq: float | None = None

    def __post_init__(self):
        if not self.onset >= 0:
            raise ValueError(f"onset must be >= 0, got {self.onset}")
        if not self.offset > self.onset:
            raise ValueError(
                f"offset must exceed onset, got [{self.onset}, {self.offset})"
            )
        if not self.species_code or any(c.isspace() for c in self.species_code):
            raise ValueError(f"bad species code {self.species_code!r}")

    @property
    def duration(self) -> float:
        return self.offset - self.onset

    def shifted(self, dt: float) -> "Event":
        return Event(self.onset + dt, self.offset + dt,
                     self.species_code, self.low_freq, self.high_freq)


def _sort_key(e: Event):
    return (e.onset, e.species_code, e.offset)


@dataclass(frozen=True)
class AnnotationSet:
    """All events of one audio source, sorted by (onset, species_code)."""

    events: tuple[Event, ...]
    source_id: str
    duration: float

    def __post_init__(self):
        if not self.duration > 0:
            raise ValueError(f"duration must be positive, got {self.duration}")
        events = tuple(sorted(self.events, key=_sort_key))
        object.__setattr__(self, "events", events)
        tol = 1e-9 * max(1.0, self.duration)
        for e in events:
            if e.offset > self.duration + tol:
                raise ValueError(
                    f"event [{e.onset}, {e.offset}) exceeds duration {self.duration}"
                )

    def __len__(self) -> int:
        return len(self.events)

    def species_counts(self) -> Counter:
        return Counter(e.species_code for e in self.events)


@dataclass(frozen=True)
class SpeciesVocabulary:
    """Alphabetically ordered class list; positions are the roll row indices."""

    codes: tuple[str, ...]

    def __post_init__(self):
        codes = tuple(sorted(set(self.codes)))
        if not codes:
            raise ValueError("vocabulary must contain at least one species")
        object.__setattr__(self, "codes", codes)

    @property
    def size(self) -> int:
        return len(self.codes)

    @property
    def index(self) -> dict[str, int]:
        return {c: i for i, c in enumerate(self.codes)}

    def __contains__(self, code: str) -> bool:
        return code in self.codes

    def __iter__(self):
        return iter(self.codes)


@dataclass(frozen=True)
class EventRoll:
    """Binary S x N presence matrix: classes (vocabulary order) by frames."""

    matrix: np.ndarray
    frame_hop: float
    vocabulary: SpeciesVocabulary
    dropped_events: int = 0

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.uint8)
        if m.ndim != 2:
            raise ValueError(f"roll matrix must be 2-D, got shape {m.shape}")
        if m.shape[0] != self.vocabulary.size:
            raise ValueError(
                f"roll has {m.shape[0]} rows but vocabulary has "
                f"{self.vocabulary.size} classes"
            )
        if not np.isin(m, (0, 1)).all():
            raise ValueError("roll entries must be 0 or 1")
        if not self.frame_hop > 0:
            raise ValueError("frame_hop must be positive")
        object.__setattr__(self, "matrix", m)

    @property
    def n_frames(self) -> int:
        return self.matrix.shape[1]

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[0]


def _snap(q: float) -> float:
    # Quotients that are integers up to float rounding are treated as exact,
    # so frame-aligned boundaries land on the intended frame.
    r = round(q)
    if abs(q - r) <= 1e-9 * max(1.0, abs(r)):
        return float(r)
    return q


def frame_span(onset: float, offset: float, frame_hop: float,
               n_frames: int) -> tuple[int, int]:
    """First and last frame whose [n*hop, (n+1)*hop) interval intersects
    the half-open event interval; (0, -1)-style empty span if none do."""
    first = math.floor(_snap(onset / frame_hop))
    last = math.ceil(_snap(offset / frame_hop)) - 1
    return max(first, 0), min(last, n_frames - 1)


def parse_selection_table(text: str, duration: float,
                          source_id: str = "") -> AnnotationSet:
    """Parse a tab-separated selection table into an AnnotationSet.

    The header row must contain "Begin Time (s)", "End Time (s)" and
    "Species"; extra columns are ignored except for the optional frequency
    bounds. Malformed rows raise SelectionTableError naming the line.
    """
    lines = text.splitlines()
    if not lines or not lines[0].strip():
        raise SelectionTableError("missing header row", line=1)
    header = lines[0].rstrip("\n").split("\t")
    col = {name: i for i, name in enumerate(header)}
    for name in REQUIRED_COLS:
        if name not in col:
            raise SelectionTableError(f"missing required column {name!r}", line=1)

    events = []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        fields = raw.split("\t")
        if len(fields) < len(REQUIRED_COLS) or max(
                col[c] for c in REQUIRED_COLS) >= len(fields):
            raise SelectionTableError("too few columns", line=lineno)
        try:
            onset = float(fields[col[BEGIN_COL]])
            offset = float(fields[col[END_COL]])
        except ValueError:
            raise SelectionTableError("non-numeric time field", line=lineno)
        code = fields[col[SPECIES_COL]].strip()

        def _freq(name):
            if name in col and col[name] < len(fields):
                s = fields[col[name]].strip()
                if s:
                    try:
                        return float(s)
                    except ValueError:
                        raise SelectionTableError(
                            f"non-numeric {name!r} field", line=lineno)
            return None

        try:
            events.append(Event(onset, offset, code,
                                low_freq=_freq(LOW_FREQ_COL),
                                high_freq=_freq(HIGH_FREQ_COL)))
        except ValueError as exc:
            raise SelectionTableError(str(exc), line=lineno)

    try:
        return AnnotationSet(tuple(events), source_id=source_id, duration=duration)
    except ValueError as exc:
        raise SelectionTableError(str(exc))


def serialize_selection_table(annotations: AnnotationSet) -> str:
    """Serialize to the same TSV schema parse_selection_table accepts.

    Times are written with shortest round-trip float formatting, so
    parse(serialize(x)) reproduces x exactly.
    """
    cols = ["Selection", BEGIN_COL, END_COL, LOW_FREQ_COL, HIGH_FREQ_COL,
            SPECIES_COL]
    lines = ["\t".join(cols)]
    for i, e in enumerate(annotations.events, start=1):
        low = "" if e.low_freq is None else repr(float(e.low_freq))
        high = "" if e.high_freq is None else repr(float(e.high_freq))
        lines.append("\t".join([
            str(i), repr(float(e.onset)), repr(float(e.offset)),
            low, high, e.species_code,
        ]))
    return "\n".join(lines) + "\n"


def build_vocabulary(sets: Iterable[AnnotationSet],
                     min_activations: int = 1) -> SpeciesVocabulary:
    """Species with at least ``min_activations`` events across all sets,
    alphabetically sorted. Raises if no species qualifies."""
    if min_activations < 1:
        raise ValueError("min_activations must be >= 1")
    counts: Counter = Counter()
    for s in sets:
        counts.update(s.species_counts())
    kept = [code for code, n in counts.items() if n >= min_activations]
    if not kept:
        raise ValueError(
            f"no species has >= {min_activations} activations; nothing to train"
        )
    return SpeciesVocabulary(tuple(kept))


def max_polyphony(annotations: AnnotationSet) -> int:
    """Maximum number of simultaneously active events, computed exactly by a
    sweep over sorted interval boundaries (offsets processed before onsets,
    so touching events do not count as overlapping)."""
    if not annotations.events:
        return 0
    boundaries = []
    for e in annotations.events:
        boundaries.append((e.onset, 1))
        boundaries.append((e.offset, -1))
    boundaries.sort(key=lambda b: (b[0], b[1]))
    active = best = 0
    for _, delta in boundaries:
        active += delta
        if active > best:
            best = active
    return best


def to_event_roll(annotations: AnnotationSet, vocabulary: SpeciesVocabulary,
                  frame_hop: float, n_frames: int) -> EventRoll:
    """Mark (class, frame) cells where an event overlaps the frame interval.

    Any nonzero overlap with [n*hop, (n+1)*hop) counts as presence. Events
    of species outside the vocabulary are dropped and counted in the
    returned roll's ``dropped_events``.
    """
    if n_frames <= 0:
        raise ValueError(f"n_frames must be positive, got {n_frames}")
    if frame_hop <= 0:
        raise ValueError("frame_hop must be positive")
    index = vocabulary.index
    matrix = np.zeros((vocabulary.size, n_frames), dtype=np.uint8)
    dropped = 0
    for e in annotations.events:
        row = index.get(e.species_code)
        if row is None:
            dropped += 1
            continue
        first, last = frame_span(e.onset, e.offset, frame_hop, n_frames)
        if first <= last:
            matrix[row, first:last + 1] = 1
    return EventRoll(matrix, frame_hop, vocabulary, dropped_events=dropped)


def roll_to_annotations(roll: EventRoll, source_id: str = "",
                        duration: float | None = None) -> AnnotationSet:
    """Turn maximal runs of 1-frames into events (inverse of to_event_roll
    on frame-aligned data)."""
    hop = roll.frame_hop
    if duration is None:
        duration = roll.n_frames * hop
    events = []
    padded = np.zeros((roll.n_classes, roll.n_frames + 2), dtype=np.int8)
    padded[:, 1:-1] = roll.matrix
    diff = np.diff(padded, axis=1)
    for row, code in enumerate(roll.vocabulary.codes):
        starts = np.flatnonzero(diff[row] == 1)
        ends = np.flatnonzero(diff[row] == -1)
        for s, t in zip(starts, ends):
            events.append(Event(s * hop, t * hop, code))
    return AnnotationSet(tuple(events), source_id=source_id, duration=duration)


def merge_annotation_sets(sets: Sequence[AnnotationSet],
                          offsets: Sequence[float], duration: float,
                          source_id: str = "mix") -> AnnotationSet:
    """Multiset union of all events, each shifted by its set's offset and
    clipped to [0, duration]; events starting at or after the end are
    dropped, duplicates preserved."""
    if len(sets) != len(offsets):
        raise ValueError("sets and offsets must have equal length")
    if any(off < 0 for off in offsets):
        raise ValueError("offsets must be >= 0")
    events = []
    for annotations, off in zip(sets, offsets):
        for e in annotations.events:
            onset = e.onset + off
            offset = min(e.offset + off, duration)
            if onset >= duration or offset <= onset:
                continue
            events.append(Event(onset, offset, e.species_code,
                                e.low_freq, e.high_freq))
    return AnnotationSet(tuple(events), source_id=source_id, duration=duration)
