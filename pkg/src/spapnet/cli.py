"""``spapnet`` command-line interface.

Exit codes: 0 success, 1 invalid input or arguments, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

from . import graph as graph_mod
from .pose_ingest import (
    MANIFEST_HEADER,
    KeypointFormatError,
    ManifestRecord,
    class_names,
    parse_keypoint_file,
    read_clip_store,
    read_manifest,
    segment_clips,
    write_clip_cache,
    write_clip_store,
    write_keypoint_file,
    write_manifest,
)

logger = logging.getLogger("spapnet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _seed(value):
    if value is not None:
        return value
    env = os.environ.get("SPAPNET_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"SPAPNET_SEED must be an integer, got {env!r}") from None
    return 0


def _require(path, what="input"):
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


# -- subcommands ---------------------------------------------------------------


def cmd_schedule(args):
    g = graph_mod.build_graph()
    try:
        table = graph_mod.squeeze_table(g, args.cin, args.b, args.d)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.node is not None:
        if not 1 <= args.node <= g.node_count:
            raise UsageError(f"--node must be in 1..{g.node_count}")
        print(",".join(str(v) for v in table[args.node - 1]))
        return
    print("node," + ",".join(f"k{k}" for k in range(1, g.node_count + 1)) + ",total")
    for m, row in enumerate(table, 1):
        print(f"{m}," + ",".join(str(v) for v in row) + f",{row.sum()}")


def cmd_synth(args):
    from .pipeline import atomic_path
    from .synth import SYNTH_CLASSES, generate_dataset

    classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    bad = [c for c in classes if c not in SYNTH_CLASSES]
    if bad or not classes:
        raise UsageError(f"unknown classes {bad}; choose from {','.join(SYNTH_CLASSES)}")
    seqs, records = generate_dataset(classes, args.videos_per_class, _seed(args.seed),
                                     duration_frames=args.duration, workers=args.workers)
    out = Path(args.out)
    (out / "keypoints").mkdir(parents=True, exist_ok=True)
    for seq, rec in zip(seqs, records):
        rec.path = f"keypoints/{seq.video_id}.json"
        with atomic_path(out / rec.path) as tmp:
            write_keypoint_file(tmp, seq)
    with atomic_path(out / "manifest.csv") as tmp:
        write_manifest(tmp, records)
    print(f"wrote {len(records)} videos to {out}")


def cmd_ingest(args):
    from .pipeline import atomic_path, ingest_manifest, prepare_manifest

    manifest = _require(args.manifest, "manifest")
    records = prepare_manifest(read_manifest(manifest), args.mode, args.drop_tasks or ())
    clips = ingest_manifest(records, manifest.parent, args.clip_len, args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with atomic_path(out / "clips.jsonl") as tmp:
        write_clip_store(tmp, clips)
    # paths are made absolute so the filtered manifest works from any directory
    for r in records:
        p = Path(r.path)
        r.path = str(p if p.is_absolute() else (manifest.parent / p).resolve())
    with atomic_path(out / "manifest.csv") as tmp:
        write_manifest(tmp, records)
    if args.binary_cache and clips:
        with atomic_path(out / "clips.bin") as tmp:
            write_clip_cache(tmp, clips)
    print(f"{len(records)} videos -> {len(clips)} clips in {out}")


def _load_training_inputs(args, mode):
    """Manifest records plus clips, read from ``--clips`` or cut from the manifest paths."""
    from .pipeline import ingest_manifest

    manifest = _require(args.manifest, "manifest")
    records = _read_any_manifest(manifest, mode)
    if args.clips is not None:
        clips = read_clip_store(_require(args.clips, "clip store"))
    else:
        for r in records:
            p = Path(r.path)
            _require(p if p.is_absolute() else manifest.parent / p, "keypoint file")
        clips = ingest_manifest(records, manifest.parent, args.clip_len)
    if not clips:
        raise UsageError(f"no clips of {args.clip_len} frames in {args.clips or manifest}")
    return records, clips


def _read_any_manifest(path, mode):
    """Accept a raw manifest or one already relabeled by ``ingest``."""
    from .pipeline import prepare_manifest

    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if rows and {r["label"] for r in rows} <= set(class_names("binary")):
        if mode != "binary":
            raise UsageError(f"{path} is a binary manifest but mode is {mode}")
        return [ManifestRecord(**{k: r[k] for k in MANIFEST_HEADER}) for r in rows]
    return prepare_manifest(read_manifest(path), mode)


def cmd_train(args):
    from .model import ModelConfig
    from .pipeline import cross_validate, write_cv_outputs
    from .train import read_config

    if args.config is not None:
        _require(args.config, "config file")
    try:
        config = read_config(args.config, mode=args.mode, max_epochs=args.epochs,
                             seed=_seed(args.seed), folds=args.folds, lr=args.lr,
                             batch_size=args.batch_size, group_by=args.group_by)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    records, clips = _load_training_inputs(args, config.mode)
    model_config = ModelConfig(clip_len=clips[0].frames.shape[0],
                               num_classes=len(class_names(config.mode)))
    result = cross_validate(clips, records, config, model_config)
    write_cv_outputs(result, args.out, config)
    print(json.dumps(result.summary["folds"], indent=2))


def cmd_eval(args):
    from .pipeline import evaluate_run, write_eval_outputs

    run = _require(args.run, "run directory")
    _require(run / "folds.json", "fold plan")
    mode = args.mode or "binary"
    records, clips = _load_training_inputs(args, mode)
    result = evaluate_run(run, clips, records, mode)
    write_eval_outputs(result, args.out or run)
    print(json.dumps(result.summary["folds"], indent=2))


def cmd_predict(args):
    from .infer_eval import predict_clips, vote_all, write_frame_attention, write_verdicts
    from .pipeline import atomic_path, estimator_from_checkpoint, parallel_map

    est = estimator_from_checkpoint(_require(args.checkpoint, "checkpoint"))
    paths = [_require(p, "keypoint file") for p in args.keypoints]
    clips = []
    for p, seq in zip(paths, parallel_map(parse_keypoint_file, paths, args.workers)):
        got = segment_clips(seq, est.clip_len)
        if not got:
            logger.warning("%s: no valid clip of %d frames", p, est.clip_len)
        clips.extend(got)
    verdicts = vote_all(predict_clips(est, clips))
    out = Path(args.out)
    with atomic_path(out) as tmp:
        write_verdicts(tmp, verdicts, [str(c) for c in est.classes_])
    if args.frames:
        with atomic_path(args.frames) as tmp:
            write_frame_attention(tmp, verdicts)
    for v in verdicts:
        print(f"{v.video_id},{est.classes_[v.voted]},{v.clip_count}")


def cmd_attention(args):
    from .infer_eval import attention_report, read_frame_attention, read_verdicts

    verdicts = read_verdicts(_require(args.verdicts, "verdicts file"))
    if not verdicts:
        raise UsageError(f"{args.verdicts} holds no verdicts")
    traces = read_frame_attention(_require(args.frames, "frame attention file")) \
        if args.frames else None
    summary = attention_report(verdicts, args.out, traces, args.videos, plots=not args.no_plots)
    print(json.dumps(summary["mean_attention"], indent=2))


# -- parser --------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="spapnet", description="Pose-based tremor classification pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("schedule", help="print the channel-squeezing table")
    s.add_argument("--cin", type=int, default=128)
    s.add_argument("--b", type=float, default=0.9)
    s.add_argument("--d", type=float, default=0.125)
    s.add_argument("--node", type=int, help="1-based target node; omit for the full table")
    s.set_defaults(func=cmd_schedule)

    s = sub.add_parser("synth", help="generate synthetic keypoint videos")
    s.add_argument("--classes", default="PT,NoTremor")
    s.add_argument("--videos-per-class", type=int, default=20)
    s.add_argument("--duration", type=int, default=200, help="frames per video")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="filter a manifest and cut clips")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--mode", choices=("binary", "multiclass"), default="binary")
    s.add_argument("--clip-len", type=int, default=100)
    s.add_argument("--drop-tasks", nargs="*")
    s.add_argument("--binary-cache", action="store_true", help="also write clips.bin")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_ingest)

    for name, func, hlp in (("train", cmd_train, "k-fold training"),
                            ("eval", cmd_eval, "score a trained run")):
        s = sub.add_parser(name, help=hlp)
        s.add_argument("--manifest", required=True)
        s.add_argument("--clips", help="clip store from ingest; default: cut clips from "
                                        "the manifest's keypoint files")
        s.add_argument("--clip-len", type=int, default=100)
        s.add_argument("--mode", choices=("binary", "multiclass"), default=None)
        if name == "train":
            s.add_argument("--out", required=True)
            s.add_argument("--config")
            s.add_argument("--epochs", type=int)
            s.add_argument("--folds", type=int)
            s.add_argument("--lr", type=float)
            s.add_argument("--batch-size", type=int)
            s.add_argument("--group-by", choices=("video", "participant"))
            s.add_argument("--seed", type=int)
        else:
            s.add_argument("--run", required=True)
            s.add_argument("--out")
        s.set_defaults(func=func)

    s = sub.add_parser("predict", help="video verdicts for new keypoint files")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frames", help="also write per-frame attention here")
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("keypoints", nargs="+")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("attention", help="joint attention tables and plots")
    s.add_argument("--verdicts", required=True)
    s.add_argument("--frames")
    s.add_argument("--videos", nargs="*")
    s.add_argument("--out", required=True)
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(func=cmd_attention)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, KeypointFormatError, FileNotFoundError, ValueError) as exc:
        print(f"spapnet {args.command}: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        logger.exception("internal failure")
        print(f"spapnet {args.command}: internal error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
