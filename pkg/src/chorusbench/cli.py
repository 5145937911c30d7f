"""Command-line interface.

Subcommands: synth, featurize, train, predict, eval, experiment, stats.
Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .annotations import (
    SelectionTableError,
    SpeciesVocabulary,
    build_vocabulary,
    parse_selection_table,
    roll_to_annotations,
    serialize_selection_table,
    to_event_roll,
)
from .crnn import (
    CrnnConfig,
    TrainConfig,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .experiments import (
    ExperimentConfig,
    ExperimentStageError,
    PoolSpec,
    dataset_stats,
    export_loss_curves,
    load_annotation_dir,
    predict_roll,
    run_experiment,
)
from .features import FeatureConfig, StftConfig, log_mel, save_features
from .metrics import evaluate_files
from .synthesis import (
    SynthesisError,
    generate_synthetic_pool,
    load_clip,
    load_manifest,
    load_scene_clips,
    synthesize_subset,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3

DATA_ERRORS = (SelectionTableError, FileNotFoundError, json.JSONDecodeError,
               ValueError, KeyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--deterministic", action="store_true", default=True,
                   help="single-threaded reproducible mode (always on)")
    p.add_argument("--out-dir", default="out")


def _feature_config(args) -> FeatureConfig:
    return FeatureConfig(
        sample_rate=args.sample_rate,
        stft=StftConfig(n_fft=args.n_fft, hop=args.n_fft // 2),
        n_mels=args.n_mels)


def _cmd_synth(args) -> int:
    if args.pool == "synthetic":
        pool = generate_synthetic_pool(args.n_species, args.clips_per_species,
                                       seed=args.seed,
                                       sample_rate=args.sample_rate)
    else:
        from .experiments import load_recording_pool
        pool = load_recording_pool(PoolSpec(
            kind="recordings", audio_dir=args.audio_dir,
            annotation_dir=args.annotations_dir or args.audio_dir))
    manifest = synthesize_subset(
        pool, args.max_polyphony, args.n_scenes, args.seed, args.out_dir,
        augment=args.augment, split=args.split,
        exact_polyphony=args.exact)
    print(f"wrote {len(manifest.scenes)} scenes to {args.out_dir}")
    return EXIT_OK


def _cmd_featurize(args) -> int:
    manifest = load_manifest(args.manifest)
    base = Path(args.manifest).parent
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    config = _feature_config(args)
    for record, clip in zip(manifest.scenes,
                            load_scene_clips(manifest, base)):
        mel = log_mel(clip.samples, config)
        save_features(out / (Path(record.audio_path).stem + ".melf"), mel)
    print(f"cached {len(manifest.scenes)} feature files in {out}")
    return EXIT_OK


def _cmd_train(args) -> int:
    manifest = load_manifest(args.manifest)
    clips = load_scene_clips(manifest, Path(args.manifest).parent)
    vocabulary = build_vocabulary([c.annotations for c in clips],
                                  args.min_activations)
    feature_config = _feature_config(args)
    crnn_config = CrnnConfig(
        n_mels=args.n_mels, n_classes=vocabulary.size,
        conv_channels=tuple(args.conv_channels),
        freq_pool=tuple(args.freq_pool),
        gru_units=args.gru_units, gru_layers=args.gru_layers,
        dense_units=tuple(args.dense_units))
    train_config = TrainConfig(
        learning_rate=args.learning_rate, epochs=args.epochs,
        batch_size=args.batch_size, n_train_samples=args.n_train_samples,
        seed=args.seed)
    params, history = train(clips, crnn_config, train_config, vocabulary,
                            feature_config)
    params.species_codes = tuple(vocabulary.codes)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "model.ckpt")
    export_loss_curves([history], ["model"], n_epochs=len(history),
                       path=out / "loss.csv")
    print(f"trained {train_config.epochs} epochs; "
          f"final loss {history.losses[-1]:.4f}; checkpoint in {out}")
    return EXIT_OK


def _cmd_predict(args) -> int:
    params = load_checkpoint(args.checkpoint)
    feature_config = _feature_config(args)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.manifest:
        manifest = load_manifest(args.manifest)
        clips = load_scene_clips(manifest, Path(args.manifest).parent)
    else:
        clips = [load_clip(args.audio)]
    for clip in clips:
        roll = predict_roll(clip, params, feature_config,
                            threshold=args.threshold)
        predicted = roll_to_annotations(roll, source_id=clip.source_id,
                                        duration=clip.duration)
        (out / f"{clip.source_id}.txt").write_text(
            serialize_selection_table(predicted))
    print(f"wrote {len(clips)} prediction tables to {out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    ref_manifest = load_manifest(args.ref_manifest)
    base = Path(args.ref_manifest).parent
    refs = load_scene_clips(ref_manifest, base)
    if args.vocab:
        codes = [line.strip() for line in
                 Path(args.vocab).read_text().splitlines() if line.strip()]
        vocabulary = SpeciesVocabulary(tuple(codes))
    else:
        vocabulary = build_vocabulary([c.annotations for c in refs], 1)
    feature_config = _feature_config(args)
    frame_hop = feature_config.frame_hop
    pred_dir = Path(args.pred_dir)
    pairs = []
    for clip in refs:
        pred_path = pred_dir / f"{clip.source_id}.txt"
        if not pred_path.exists():
            raise FileNotFoundError(f"missing prediction table {pred_path}")
        pred = parse_selection_table(pred_path.read_text(),
                                     duration=clip.duration,
                                     source_id=clip.source_id)
        pairs.append((clip.annotations, pred))
    report = evaluate_files(pairs, vocabulary, frame_hop,
                            segment_length=args.segment_length)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "evaluation.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True))
    print(f"overall F {report.overall_f:.4f}  ER {report.overall_er:.4f}  "
          f"({len(pairs)} files); report in {out}")
    return EXIT_OK


def _cmd_experiment(args) -> int:
    with open(args.config) as fh:
        raw = json.load(fh)
    crnn = CrnnConfig.from_dict(raw["crnn"]) if "crnn" in raw else CrnnConfig()
    tc = TrainConfig(**raw.get("train", {}))
    features = FeatureConfig(
        sample_rate=raw.get("sample_rate", 32000),
        stft=StftConfig(n_fft=raw.get("n_fft", 1024),
                        hop=raw.get("n_fft", 1024) // 2),
        n_mels=raw.get("n_mels", crnn.n_mels))
    pool = PoolSpec(**raw.get("pool", {}))
    config = ExperimentConfig(
        polyphony_levels=tuple(raw.get("polyphony_levels", (3, 6, 10))),
        fixed_test_polyphonies=tuple(raw.get("fixed_test_polyphonies",
                                             (3, 6, 10))),
        n_train_scenes=raw.get("n_train_scenes", 10000),
        n_test_scenes=raw.get("n_test_scenes", 100),
        crnn=crnn, train=tc, features=features, pool=pool,
        min_activations=raw.get("min_activations", 1),
        augment=raw.get("augment", False),
        seed=args.seed if args.seed is not None else raw.get("seed", 0),
        out_dir=args.out_dir or raw.get("out_dir", "experiment_out"))
    report = run_experiment(config)
    print(f"experiment complete: models {report.model_names} on "
          f"{report.test_set_names}; outputs in {config.out_dir}")
    return EXIT_OK


def _cmd_stats(args) -> int:
    sets = load_annotation_dir(args.annotations_dir)
    stats = dataset_stats(sets)
    print(f"recordings:  {stats['n_recordings']}")
    print(f"species:     {stats['n_species']}")
    print(f"activations: {stats['n_activations']}")
    if args.min_activations > 1:
        vocabulary = build_vocabulary(sets, args.min_activations)
        print(f"species with >= {args.min_activations} activations: "
              f"{vocabulary.size}")
    if args.json:
        Path(args.json).write_text(json.dumps(stats, indent=2))
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="chorusbench",
                     description="dense birdsong scene benchmark toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a polyphony-capped subset")
    _add_common(p)
    p.add_argument("--pool", choices=("synthetic", "recordings"),
                   default="synthetic")
    p.add_argument("--n-species", type=int, default=5)
    p.add_argument("--clips-per-species", type=int, default=20)
    p.add_argument("--audio-dir")
    p.add_argument("--annotations-dir")
    p.add_argument("--sample-rate", type=int, default=32000)
    p.add_argument("--max-polyphony", type=int, required=True)
    p.add_argument("--n-scenes", type=int, required=True)
    p.add_argument("--split", choices=("train", "test"), default="train")
    p.add_argument("--augment", action="store_true")
    p.add_argument("--exact", action="store_true",
                   help="require measured polyphony == max-polyphony")
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("featurize", help="cache log-mel features for a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sample-rate", type=int, default=32000)
    p.add_argument("--n-fft", type=int, default=1024)
    p.add_argument("--n-mels", type=int, default=128)
    p.set_defaults(func=_cmd_featurize)

    p = sub.add_parser("train", help="train a detector on a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sample-rate", type=int, default=32000)
    p.add_argument("--n-fft", type=int, default=1024)
    p.add_argument("--n-mels", type=int, default=128)
    p.add_argument("--min-activations", type=int, default=1)
    p.add_argument("--conv-channels", type=int, nargs="+",
                   default=[64, 128, 128, 128, 264])
    p.add_argument("--freq-pool", type=int, nargs="+", default=[2, 2, 2, 2, 2])
    p.add_argument("--gru-units", type=int, default=128)
    p.add_argument("--gru-layers", type=int, default=2)
    p.add_argument("--dense-units", type=int, nargs="+", default=[128, 128])
    p.add_argument("--learning-rate", type=float, default=0.001)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--n-train-samples", type=int, default=10000)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("predict", help="run a checkpoint over audio")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest")
    p.add_argument("--audio")
    p.add_argument("--sample-rate", type=int, default=32000)
    p.add_argument("--n-fft", type=int, default=1024)
    p.add_argument("--n-mels", type=int, default=128)
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(func=_cmd_predict)

    p = sub.add_parser("eval", help="score predictions against references")
    _add_common(p)
    p.add_argument("--ref-manifest", required=True)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--vocab", help="text file, one species code per line")
    p.add_argument("--sample-rate", type=int, default=32000)
    p.add_argument("--n-fft", type=int, default=1024)
    p.add_argument("--n-mels", type=int, default=128)
    p.add_argument("--segment-length", type=float, default=0.1)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("experiment", help="full polyphony sweep from a config")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--deterministic", action="store_true", default=True)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("stats", help="summarize a directory of annotations")
    _add_common(p)
    p.add_argument("--annotations-dir", required=True)
    p.add_argument("--min-activations", type=int, default=100)
    p.add_argument("--json", help="also write the summary to this path")
    p.set_defaults(func=_cmd_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ExperimentStageError, SynthesisError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
