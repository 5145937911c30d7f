"""Experiment orchestration: polyphony-conditioned model sweeps.

Builds one training subset per polyphony level, trains a model per level
(named O<P>), evaluates every model on its matched test set plus the fixed
exact-polyphony test sets, and renders the results as a model-by-testset
grid with per-class breakdowns and per-epoch loss curves.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .annotations import (
    AnnotationSet,
    SpeciesVocabulary,
    build_vocabulary,
    max_polyphony,
    parse_selection_table,
)
from .crnn import (
    CrnnConfig,
    CrnnParams,
    LossHistory,
    TrainConfig,
    binarize,
    forward,
    save_checkpoint,
    train,
)
from .features import FeatureConfig, log_mel
from .metrics import DEFAULT_SEGMENT_LENGTH, EvaluationReport, evaluate_files
from .rng import substream
from .synthesis import (
    AudioClip,
    SubsetManifest,
    frame_blocking,
    generate_synthetic_pool,
    load_clip,
    load_scene_clips,
    synthesize_scenes,
    write_subset,
)


class ExperimentStageError(RuntimeError):
    """A stage failed; partial outputs stay on disk for inspection."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class PoolSpec:
    """Where scene source clips come from.

    kind "synthetic": tone-burst pool with n_species/clips_per_species.
    kind "recordings": WAV + selection-table pairs under audio_dir and
    annotation_dir, frame-blocked into scene-length clips.
    """

    kind: str = "synthetic"
    n_species: int = 5
    clips_per_species: int = 20
    audio_dir: str = ""
    annotation_dir: str = ""
    frame_len: float = 5.0
    frame_hop: float = 2.5

    def __post_init__(self):
        if self.kind not in ("synthetic", "recordings"):
            raise ValueError(f"unknown pool kind {self.kind!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    polyphony_levels: tuple[int, ...] = (3, 6, 10)
    fixed_test_polyphonies: tuple[int, ...] = (3, 6, 10)
    n_train_scenes: int = 10000
    n_test_scenes: int = 100
    crnn: CrnnConfig = field(default_factory=CrnnConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    pool: PoolSpec = field(default_factory=PoolSpec)
    min_activations: int = 1
    augment: bool = False
    segment_length: float = DEFAULT_SEGMENT_LENGTH
    seed: int = 0
    deterministic: bool = True
    out_dir: str = "experiment_out"

    def __post_init__(self):
        levels = tuple(self.polyphony_levels)
        object.__setattr__(self, "polyphony_levels", levels)
        object.__setattr__(self, "fixed_test_polyphonies",
                           tuple(self.fixed_test_polyphonies))
        if not levels or any(p < 1 for p in levels) or \
                any(a >= b for a, b in zip(levels, levels[1:])):
            raise ValueError(
                "polyphony levels must be strictly increasing and >= 1")


@dataclass
class ExperimentReport:
    """Evaluation grid (model x test set), loss curves, and provenance."""

    model_names: list[str]
    test_set_names: list[str]
    evaluations: dict[str, dict[str, EvaluationReport]]
    loss_histories: dict[str, LossHistory]
    provenance: dict

    def to_dict(self) -> dict:
        return {
            "models": self.model_names,
            "test_sets": self.test_set_names,
            "evaluations": {
                model: {ts: rep.to_dict() for ts, rep in row.items()}
                for model, row in self.evaluations.items()
            },
            "loss_histories": {m: list(h.losses)
                               for m, h in self.loss_histories.items()},
            "provenance": self.provenance,
        }


def dataset_stats(sets: list[AnnotationSet]) -> dict:
    """Recording/species/activation totals plus per-species counts
    (descending)."""
    if not sets:
        raise ValueError("no annotation sets given")
    counts: Counter = Counter()
    for s in sets:
        counts.update(s.species_counts())
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return {
        "n_recordings": len(sets),
        "n_species": len(counts),
        "n_activations": sum(counts.values()),
        "per_species": [{"species": code, "count": n} for code, n in ordered],
    }


def load_recording_pool(spec: PoolSpec) -> list[AudioClip]:
    """Frame-block every WAV under audio_dir (with a same-stem .txt table
    under annotation_dir) into scene-length clips."""
    audio_dir = Path(spec.audio_dir)
    ann_dir = Path(spec.annotation_dir) if spec.annotation_dir else audio_dir
    wavs = sorted(audio_dir.glob("*.wav")) + sorted(audio_dir.glob("*.WAV"))
    if not wavs:
        raise FileNotFoundError(f"no WAV files under {audio_dir}")
    pool: list[AudioClip] = []
    for wav in wavs:
        ann = ann_dir / f"{wav.stem}.txt"
        recording = load_clip(wav, ann if ann.exists() else None)
        pool.extend(frame_blocking(recording, spec.frame_len, spec.frame_hop))
    return [c for c in pool if c.annotations.events]


def build_pool(config: ExperimentConfig) -> list[AudioClip]:
    if config.pool.kind == "synthetic":
        return generate_synthetic_pool(
            config.pool.n_species, config.pool.clips_per_species,
            seed=int(substream(config.seed, "pool-seed").integers(2 ** 31)),
            sample_rate=config.features.sample_rate)
    return load_recording_pool(config.pool)


def split_pool(pool: list[AudioClip], train_fraction: float,
               seed: int) -> tuple[list[AudioClip], list[AudioClip]]:
    """Disjoint source-clip split drawn before any synthesis, so test
    scenes never reuse training material."""
    order = substream(seed, "pool-split").permutation(len(pool))
    n_train = max(1, min(len(pool) - 1, round(train_fraction * len(pool))))
    train_idx = sorted(order[:n_train].tolist())
    test_idx = sorted(order[n_train:].tolist())
    return [pool[i] for i in train_idx], [pool[i] for i in test_idx]


def predict_roll(clip: AudioClip, params: CrnnParams,
                 feature_config: FeatureConfig, threshold: float = 0.5):
    """Featurize a clip and binarize the model output into an event roll."""
    if params.species_codes is None:
        raise ValueError("parameters carry no species list")
    mel = log_mel(clip.samples, feature_config)
    vocab = SpeciesVocabulary(params.species_codes)
    probs = forward(mel.values, params, mode="eval")
    return binarize(probs, vocab, mel.frame_hop, threshold)


def _evaluate_model(params: CrnnParams, vocabulary: SpeciesVocabulary,
                    scenes: list[AudioClip], feature_config: FeatureConfig,
                    segment_length: float) -> EvaluationReport:
    pairs = []
    for clip in scenes:
        mel = log_mel(clip.samples, feature_config)
        probs = forward(mel.values, params, mode="eval")
        pred = binarize(probs, vocabulary, mel.frame_hop)
        pairs.append((clip.annotations, pred))
    return evaluate_files(pairs, vocabulary, feature_config.frame_hop,
                          segment_length)


def run_experiment(config: ExperimentConfig) -> ExperimentReport:
    """Synthesize, train, and evaluate the full polyphony sweep.

    Everything is persisted under config.out_dir: subset WAVs + manifests,
    checkpoints, loss CSVs, and the report (JSON + text tables). Fully
    deterministic given config.seed.
    """
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as exc:
            raise ExperimentStageError(name, exc) from exc

    pool = stage("build-pool", build_pool, config)
    if len(pool) < 2:
        raise ExperimentStageError(
            "build-pool", RuntimeError("pool needs at least 2 clips to split"))
    train_pool, test_pool = stage(
        "split-pool", split_pool, pool, config.train.train_fraction, config.seed)
    vocabulary = stage(
        "vocabulary", build_vocabulary,
        [c.annotations for c in pool], config.min_activations)
    if vocabulary.size != config.crnn.n_classes:
        raise ExperimentStageError(
            "vocabulary",
            ValueError(
                f"vocabulary has {vocabulary.size} species but the model is "
                f"configured for {config.crnn.n_classes} classes"))
    pool_note = (f"source pool split {config.train.train_fraction:.2f}/"
                 f"{1 - config.train.train_fraction:.2f} before synthesis; "
                 f"train {len(train_pool)} / test {len(test_pool)} clips")

    fixed_sets: dict[str, list[AudioClip]] = {}
    for p_fixed in config.fixed_test_polyphonies:
        name = f"fixed_p{p_fixed}"
        seed = int(substream(config.seed, "fixed-test", p_fixed).integers(2 ** 31))
        scenes = stage(f"synth-{name}", synthesize_scenes, test_pool, p_fixed,
                       config.n_test_scenes, seed, exact_polyphony=True)
        manifest = stage(f"write-{name}", write_subset, scenes,
                         out / name, p_fixed, seed, "test",
                         exact_polyphony=True, pool_note=pool_note)
        fixed_sets[name] = [s.clip for s in scenes]

    model_names = [f"O{p}" for p in config.polyphony_levels]
    test_set_names = ["matched"] + list(fixed_sets)
    evaluations: dict[str, dict[str, EvaluationReport]] = {}
    loss_histories: dict[str, LossHistory] = {}

    for p_level, model_name in zip(config.polyphony_levels, model_names):
        train_seed = int(substream(config.seed, "train-subset",
                                   p_level).integers(2 ** 31))
        train_scenes = stage(f"synth-train-{model_name}", synthesize_scenes,
                             train_pool, p_level, config.n_train_scenes,
                             train_seed, augment=config.augment)
        stage(f"write-train-{model_name}", write_subset, train_scenes,
              out / f"train_{model_name}", p_level, train_seed, "train",
              augment=config.augment, pool_note=pool_note)

        matched_seed = int(substream(config.seed, "matched-test",
                                     p_level).integers(2 ** 31))
        matched_scenes = stage(f"synth-matched-{model_name}",
                               synthesize_scenes, test_pool, p_level,
                               config.n_test_scenes, matched_seed)
        stage(f"write-matched-{model_name}", write_subset, matched_scenes,
              out / f"matched_{model_name}", p_level, matched_seed, "test",
              pool_note=pool_note)

        tc = TrainConfig(
            learning_rate=config.train.learning_rate,
            beta1=config.train.beta1, beta2=config.train.beta2,
            adam_eps=config.train.adam_eps, epochs=config.train.epochs,
            batch_size=config.train.batch_size,
            n_train_samples=config.train.n_train_samples,
            train_fraction=config.train.train_fraction,
            seed=int(substream(config.seed, "train", p_level).integers(2 ** 31)),
        )
        params, history = stage(
            f"train-{model_name}", train, [s.clip for s in train_scenes],
            config.crnn, tc, vocabulary, config.features)
        params.species_codes = tuple(vocabulary.codes)
        stage(f"checkpoint-{model_name}", save_checkpoint, params,
              out / f"{model_name}.ckpt")
        loss_histories[model_name] = history

        row: dict[str, EvaluationReport] = {}
        row["matched"] = stage(
            f"eval-{model_name}-matched", _evaluate_model, params, vocabulary,
            [s.clip for s in matched_scenes], config.features,
            config.segment_length)
        for name, clips in fixed_sets.items():
            row[name] = stage(f"eval-{model_name}-{name}", _evaluate_model,
                              params, vocabulary, clips, config.features,
                              config.segment_length)
        evaluations[model_name] = row

    report = ExperimentReport(
        model_names=model_names,
        test_set_names=test_set_names,
        evaluations=evaluations,
        loss_histories=loss_histories,
        provenance={
            "version": __version__,
            "seed": config.seed,
            "deterministic": config.deterministic,
            "polyphony_levels": list(config.polyphony_levels),
            "fixed_test_polyphonies": list(config.fixed_test_polyphonies),
            "n_train_scenes": config.n_train_scenes,
            "n_test_scenes": config.n_test_scenes,
            "augment": config.augment,
            "min_activations": config.min_activations,
            "pool": config.pool.kind,
            "pool_note": pool_note,
            "crnn": config.crnn.to_dict(),
            "train": config.train.to_dict(),
            "species": list(vocabulary.codes),
        },
    )

    stage("loss-curves", export_loss_curves,
          [loss_histories[m] for m in model_names], model_names,
          path=out / "loss_curves.csv")
    text, as_json = render_tables(report)
    (out / "report.json").write_text(as_json)
    (out / "report.txt").write_text(text)
    return report


def export_loss_curves(histories: list[LossHistory],
                       model_names: list[str] | None = None,
                       n_epochs: int = 100, path=None) -> str:
    """CSV of per-epoch training loss, one column per model, truncated to
    min(n_epochs, shortest history)."""
    if not histories:
        raise ValueError("no loss histories given")
    if model_names is None:
        model_names = [f"model{i}" for i in range(len(histories))]
    rows = min(n_epochs, min(len(h) for h in histories))
    lines = ["epoch," + ",".join(model_names)]
    for e in range(rows):
        lines.append(f"{e + 1}," + ",".join(repr(h.losses[e]) for h in histories))
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text)
    return text


def _fmt_pm(mean: float, std: float) -> str:
    return f"{mean:.2f}±{std:.2f}"


def render_tables(report: ExperimentReport) -> tuple[str, str]:
    """Text and JSON renderings of the evaluation grid.

    The first table has one row per model and paired (F score, ER) columns
    per test set (per-file mean plus or minus population std). The second
    lists per-class annotation counts, percentage over both the
    all-annotations base and the vocabulary-only base, and class metrics,
    sorted by annotation count descending.
    """
    lines = []
    col_pairs = report.test_set_names
    header = ["Model"]
    for name in col_pairs:
        header += [f"{name} F", f"{name} ER"]
    rows = [header]
    for model in report.model_names:
        row = [model]
        for ts in col_pairs:
            rep = report.evaluations[model][ts]
            row += [_fmt_pm(rep.file_f_mean, rep.file_f_std),
                    _fmt_pm(rep.file_er_mean, rep.file_er_std)]
        rows.append(row)
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines.append("Per-model segment-based scores (per-file mean±std)")
    for r in rows:
        lines.append("  ".join(v.ljust(w) for v, w in zip(r, widths)))
    lines.append("")

    class_tables = {}
    for model in report.model_names:
        for ts in report.test_set_names:
            rep = report.evaluations[model][ts]
            total_all = rep.total_ref_events_all
            total_vocab = rep.total_ref_events
            entries = []
            for c in sorted(rep.classes, key=lambda c: (-c.ref_events, c.code)):
                entries.append({
                    "species": c.code,
                    "annotations": c.ref_events,
                    "pct_of_all_annotations":
                        100.0 * c.ref_events / total_all if total_all else 0.0,
                    "pct_of_vocab_annotations":
                        100.0 * c.ref_events / total_vocab if total_vocab else 0.0,
                    "mean_f": c.file_f_mean, "std_f": c.file_f_std,
                    "mean_er": c.file_er_mean, "std_er": c.file_er_std,
                    "pooled_f": c.pooled_f, "pooled_er": c.pooled_er,
                })
            class_tables[f"{model}/{ts}"] = entries

    for model in report.model_names:
        key = f"{model}/matched"
        if key not in class_tables:
            continue
        lines.append(f"Class-wise scores, model {model} on matched test set")
        lines.append("  ".join([
            "Species".ljust(10), "Annotations".rjust(11), "%all".rjust(7),
            "%vocab".rjust(7), "Mean F".rjust(11), "Mean ER".rjust(11),
            "Pooled F".rjust(9), "Pooled ER".rjust(9)]))
        for e in class_tables[key]:
            lines.append("  ".join([
                e["species"].ljust(10),
                str(e["annotations"]).rjust(11),
                f"{e['pct_of_all_annotations']:.2f}".rjust(7),
                f"{e['pct_of_vocab_annotations']:.2f}".rjust(7),
                _fmt_pm(e["mean_f"], e["std_f"]).rjust(11),
                _fmt_pm(e["mean_er"], e["std_er"]).rjust(11),
                f"{e['pooled_f']:.2f}".rjust(9),
                f"{e['pooled_er']:.2f}".rjust(9)]))
        lines.append("")

    payload = report.to_dict()
    payload["class_tables"] = class_tables
    return "\n".join(lines) + "\n", json.dumps(payload, indent=2, sort_keys=True)


def load_annotation_dir(annotation_dir, duration_lookup=None) -> list[AnnotationSet]:
    """Parse every .txt selection table in a directory.

    duration_lookup maps file stem -> recording seconds; without it the
    last event offset is used, which is enough for counting statistics.
    """
    paths = sorted(Path(annotation_dir).glob("*.txt"))
    if not paths:
        raise FileNotFoundError(f"no .txt selection tables under {annotation_dir}")
    sets = []
    for p in paths:
        text = p.read_text()
        if duration_lookup and p.stem in duration_lookup:
            duration = duration_lookup[p.stem]
        else:
            probe = parse_selection_table(text, duration=float("inf"),
                                          source_id=p.stem)
            duration = max((e.offset for e in probe.events), default=1.0)
        sets.append(parse_selection_table(text, duration=duration,
                                          source_id=p.stem))
    return sets
