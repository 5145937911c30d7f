"""Segment-based evaluation for polyphonic detection.

Reference and predicted event rolls are compared on fixed-length time
segments (default 0.1 s): a class is active in a segment if it is active
in any frame of that segment. Per-segment intermediate counts follow the
standard polyphonic conventions,

    S = min(FN, FP),  D = max(0, FN - FP),  I = max(0, FP - FN),

with F = 2*TP / (2*TP + FP + FN) and ER = (S + D + I) / N over the
aggregated counts. ER may exceed 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .annotations import AnnotationSet, EventRoll, SpeciesVocabulary, to_event_roll

DEFAULT_SEGMENT_LENGTH = 0.1


@dataclass(frozen=True)
class SegmentCounts:
    """Per-segment TP/FP/FN/N_ref arrays plus their aggregates."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    n_ref: np.ndarray
    segment_length: float

    @property
    def substitutions(self) -> np.ndarray:
        return np.minimum(self.fn, self.fp)

    @property
    def deletions(self) -> np.ndarray:
        return np.maximum(0, self.fn - self.fp)

    @property
    def insertions(self) -> np.ndarray:
        return np.maximum(0, self.fp - self.fn)

    @property
    def tp_total(self) -> int:
        return int(self.tp.sum())

    @property
    def fp_total(self) -> int:
        return int(self.fp.sum())

    @property
    def fn_total(self) -> int:
        return int(self.fn.sum())

    @property
    def n_total(self) -> int:
        return int(self.n_ref.sum())

    @property
    def substitutions_total(self) -> int:
        return int(self.substitutions.sum())

    @property
    def deletions_total(self) -> int:
        return int(self.deletions.sum())

    @property
    def insertions_total(self) -> int:
        return int(self.insertions.sum())

    def __add__(self, other: "SegmentCounts") -> "SegmentCounts":
        if other.segment_length != self.segment_length:
            raise ValueError("cannot pool counts with different segment lengths")
        return SegmentCounts(
            np.concatenate([self.tp, other.tp]),
            np.concatenate([self.fp, other.fp]),
            np.concatenate([self.fn, other.fn]),
            np.concatenate([self.n_ref, other.n_ref]),
            self.segment_length,
        )


def segment_ids(n_frames: int, frame_hop: float, segment_length: float) -> np.ndarray:
    """Segment index of each frame: floor(n * frame_hop / segment_length)."""
    return np.floor(np.arange(n_frames) * frame_hop / segment_length).astype(np.int64)


def _segment_activity(matrix: np.ndarray, seg: np.ndarray) -> np.ndarray:
    # (S, n_frames) binary -> (S, n_segments) binary via any-over-frames.
    starts = np.flatnonzero(np.diff(seg, prepend=seg[0] - 1))
    return np.logical_or.reduceat(matrix.astype(bool), starts, axis=1)


def segment_counts(ref: EventRoll, pred: EventRoll,
                   segment_length: float = DEFAULT_SEGMENT_LENGTH) -> SegmentCounts:
    """Per-segment TP/FP/FN/N_ref between two rolls over a shared grid.

    The final partial segment (frames not filling segment_length) is scored
    like any other segment.
    """
    if ref.matrix.shape != pred.matrix.shape:
        raise ValueError(
            f"roll shapes differ: {ref.matrix.shape} vs {pred.matrix.shape}"
        )
    if ref.vocabulary.codes != pred.vocabulary.codes:
        raise ValueError("rolls use different vocabularies")
    if ref.frame_hop != pred.frame_hop:
        raise ValueError("rolls use different frame hops")
    seg = segment_ids(ref.n_frames, ref.frame_hop, segment_length)
    ref_act = _segment_activity(ref.matrix, seg)
    pred_act = _segment_activity(pred.matrix, seg)
    tp = (ref_act & pred_act).sum(axis=0)
    fp = (~ref_act & pred_act).sum(axis=0)
    fn = (ref_act & ~pred_act).sum(axis=0)
    n_ref = ref_act.sum(axis=0)
    return SegmentCounts(tp.astype(np.int64), fp.astype(np.int64),
                         fn.astype(np.int64), n_ref.astype(np.int64),
                         segment_length)


def f_score(counts: SegmentCounts) -> float:
    """F = 2*TP / (2*TP + FP + FN); 1.0 when there is nothing to detect
    and nothing was predicted."""
    denom = 2 * counts.tp_total + counts.fp_total + counts.fn_total
    if denom == 0:
        return 1.0
    return 2.0 * counts.tp_total / denom


def error_rate(counts: SegmentCounts) -> float:
    """ER = (S + D + I) / N; with an empty reference each insertion counts
    as one full error (ER = total insertions)."""
    n = counts.n_total
    errors = (counts.substitutions_total + counts.deletions_total
              + counts.insertions_total)
    if n == 0:
        return float(counts.insertions_total)
    return errors / n


def _single_class_roll(roll: EventRoll, row: int) -> EventRoll:
    vocab = SpeciesVocabulary((roll.vocabulary.codes[row],))
    return EventRoll(roll.matrix[row:row + 1], roll.frame_hop, vocab)


def classwise_counts(ref: EventRoll, pred: EventRoll,
                     segment_length: float = DEFAULT_SEGMENT_LENGTH
                     ) -> dict[str, SegmentCounts]:
    """Segment counts restricted to each class's row."""
    out = {}
    for row, code in enumerate(ref.vocabulary.codes):
        out[code] = segment_counts(_single_class_roll(ref, row),
                                   _single_class_roll(pred, row),
                                   segment_length)
    return out


def classwise_metrics(ref: EventRoll, pred: EventRoll,
                      segment_length: float = DEFAULT_SEGMENT_LENGTH
                      ) -> dict[str, tuple[float, float]]:
    """Per-class (F, ER). Classes absent from both rolls everywhere score
    F = 1, ER = 0."""
    return {
        code: (f_score(c), error_rate(c))
        for code, c in classwise_counts(ref, pred, segment_length).items()
    }


@dataclass
class FileResult:
    file_id: str
    f: float
    er: float


@dataclass
class ClassReport:
    code: str
    ref_events: int
    pooled_f: float
    pooled_er: float
    file_f_mean: float
    file_f_std: float
    file_er_mean: float
    file_er_std: float


@dataclass
class EvaluationReport:
    """Overall, class-wise, and per-file segment metrics.

    ``overall_f``/``overall_er`` are micro-aggregates over pooled counts;
    the per-file means use population standard deviation.
    """

    overall_f: float
    overall_er: float
    files: list[FileResult]
    file_f_mean: float
    file_f_std: float
    file_er_mean: float
    file_er_std: float
    classes: list[ClassReport]
    segment_length: float
    total_ref_events: int          # events of vocabulary species
    total_ref_events_all: int      # including out-of-vocabulary species

    def to_dict(self) -> dict:
        return {
            "overall": {"f_score": self.overall_f, "error_rate": self.overall_er},
            "per_file": {
                "values": [{"file": r.file_id, "f_score": r.f, "error_rate": r.er}
                           for r in self.files],
                "f_mean": self.file_f_mean,
                "f_std": self.file_f_std,
                "er_mean": self.file_er_mean,
                "er_std": self.file_er_std,
            },
            "per_class": [
                {
                    "species": c.code,
                    "ref_events": c.ref_events,
                    "pooled_f": c.pooled_f,
                    "pooled_er": c.pooled_er,
                    "file_f_mean": c.file_f_mean,
                    "file_f_std": c.file_f_std,
                    "file_er_mean": c.file_er_mean,
                    "file_er_std": c.file_er_std,
                }
                for c in self.classes
            ],
            "segment_length": self.segment_length,
            "total_ref_events": self.total_ref_events,
            "total_ref_events_all": self.total_ref_events_all,
        }


def _as_roll(obj, vocabulary: SpeciesVocabulary, frame_hop: float,
             n_frames: int) -> EventRoll:
    if isinstance(obj, EventRoll):
        return obj
    return to_event_roll(obj, vocabulary, frame_hop, n_frames)


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def evaluate_files(pairs, vocabulary: SpeciesVocabulary, frame_hop: float,
                   segment_length: float = DEFAULT_SEGMENT_LENGTH
                   ) -> EvaluationReport:
    """Score a list of (reference, prediction) pairs.

    References are AnnotationSets (or rolls); predictions may be EventRolls
    or AnnotationSets. Per-file metrics are computed independently; the
    overall numbers pool the integer counts across files (micro), which in
    general differs from the mean of per-file scores.
    """
    if not pairs:
        raise ValueError("no files to evaluate")
    file_results: list[FileResult] = []
    pooled: SegmentCounts | None = None
    class_pooled: dict[str, SegmentCounts] = {}
    class_file_f: dict[str, list[float]] = {c: [] for c in vocabulary.codes}
    class_file_er: dict[str, list[float]] = {c: [] for c in vocabulary.codes}
    class_events = {c: 0 for c in vocabulary.codes}
    total_events_all = 0

    for ref, pred in pairs:
        if isinstance(pred, EventRoll):
            n_frames = pred.n_frames
        elif isinstance(ref, EventRoll):
            n_frames = ref.n_frames
        else:
            n_frames = math.ceil(ref.duration / frame_hop)
        ref_roll = _as_roll(ref, vocabulary, frame_hop, n_frames)
        pred_roll = _as_roll(pred, vocabulary, frame_hop, n_frames)
        if pred_roll.vocabulary.codes != vocabulary.codes:
            raise ValueError("prediction vocabulary does not match")
        if ref_roll.vocabulary.codes != vocabulary.codes:
            raise ValueError("reference vocabulary does not match")

        counts = segment_counts(ref_roll, pred_roll, segment_length)
        file_id = getattr(ref, "source_id", "") or f"file{len(file_results)}"
        file_results.append(FileResult(file_id, f_score(counts),
                                       error_rate(counts)))
        pooled = counts if pooled is None else pooled + counts
        for code, c in classwise_counts(ref_roll, pred_roll,
                                        segment_length).items():
            class_pooled[code] = (c if code not in class_pooled
                                  else class_pooled[code] + c)
            class_file_f[code].append(f_score(c))
            class_file_er[code].append(error_rate(c))

        if isinstance(ref, AnnotationSet):
            total_events_all += len(ref.events)
            for code, n in ref.species_counts().items():
                if code in class_events:
                    class_events[code] += n
        else:
            # roll references: count decoded events per class
            from .annotations import roll_to_annotations
            decoded = roll_to_annotations(ref)
            total_events_all += len(decoded.events)
            for code, n in decoded.species_counts().items():
                class_events[code] += n

    f_mean, f_std = _mean_std([r.f for r in file_results])
    er_mean, er_std = _mean_std([r.er for r in file_results])

    classes = []
    for code in vocabulary.codes:
        cf_mean, cf_std = _mean_std(class_file_f[code])
        cer_mean, cer_std = _mean_std(class_file_er[code])
        classes.append(ClassReport(
            code=code,
            ref_events=class_events[code],
            pooled_f=f_score(class_pooled[code]),
            pooled_er=error_rate(class_pooled[code]),
            file_f_mean=cf_mean, file_f_std=cf_std,
            file_er_mean=cer_mean, file_er_std=cer_std,
        ))

    return EvaluationReport(
        overall_f=f_score(pooled),
        overall_er=error_rate(pooled),
        files=file_results,
        file_f_mean=f_mean, file_f_std=f_std,
        file_er_mean=er_mean, file_er_std=er_std,
        classes=classes,
        segment_length=segment_length,
        total_ref_events=sum(class_events.values()),
        total_ref_events_all=total_events_all,
    )
