"""End-to-end glue: manifest ingestion, cross-validation and artifact writing."""

from __future__ import annotations

import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .estimator import SPAPNetClassifier
from .infer_eval import (
    aggregate_folds,
    compute_metrics,
    predict_clips,
    vote_all,
    write_frame_attention,
    write_verdicts,
)
from .model import ModelConfig, save_checkpoint
from .pose_ingest import (
    FilterConfig,
    class_names,
    filter_manifest,
    parse_keypoint_file,
    segment_clips,
)
from .train import FoldPlan, TrainConfig, make_folds, train_fold, write_history

logger = logging.getLogger(__name__)


@contextmanager
def atomic_path(path):
    """Yield a temporary sibling path that replaces ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        # mkstemp creates 0600; give the result the mode a plain open() would
        umask = os.umask(0)
        os.umask(umask)
        os.chmod(tmp, 0o666 & ~umask)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def atomic_write_text(path, text: str) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(text)


def parallel_map(func, items, workers=1):
    """``map`` over a process pool when ``workers > 1``; order is preserved."""
    items = list(items)
    if workers > 1 and len(items) > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(func, items))
    return [func(i) for i in items]


def _ingest_one(args):
    record, base, clip_len = args
    path = Path(record.path)
    if not path.is_absolute():
        path = Path(base) / path
    seq = parse_keypoint_file(path)
    seq.video_id = record.video_id
    seq.label = record.label
    seq.participant_id = record.participant_id
    return segment_clips(seq, clip_len)


def ingest_manifest(records, base_dir=".", clip_len=100, workers=1):
    """Parse, normalize and segment every video of an already filtered manifest."""
    jobs = [(r, str(base_dir), clip_len) for r in records]
    per_video = parallel_map(_ingest_one, jobs, workers)
    clips = [c for cs in per_video for c in cs]
    for r, cs in zip(records, per_video):
        if not cs:
            logger.warning("video %s yields no clips of %d frames", r.video_id, clip_len)
    return clips


@dataclass
class CVResult:
    plan: FoldPlan
    estimators: list
    histories: list
    verdicts: list  # out-of-fold, one per video with clips
    fold_reports: list
    summary: dict
    classes: tuple


def cross_validate(clips, records, config: TrainConfig, model_config: ModelConfig | None = None,
                   folds=None) -> CVResult:
    """Train every fold and score its held-out videos by clip voting."""
    classes = class_names(config.mode)
    lookup = {c: i for i, c in enumerate(classes)}
    with_clips = {c.video_id for c in clips}
    records = [r for r in records if r.video_id in with_clips]
    plan = make_folds(records, config.folds, config.seed, config.group_by)
    truth = {r.video_id: lookup[r.label] for r in records}
    estimators, histories, verdicts, reports = [], [], [], []
    for fold in (range(plan.k) if folds is None else folds):
        est, hist = train_fold(clips, plan, fold, config, classes, model_config)
        _, val_ids = plan.split(fold)
        held = set(val_ids)
        preds = predict_clips(est, [c for c in clips if c.video_id in held])
        fold_verdicts = vote_all(preds)
        for v in fold_verdicts:
            v.true_label = truth[v.video_id]
        reports.append(compute_metrics(fold_verdicts, [v.true_label for v in fold_verdicts],
                                       config.mode, classes))
        estimators.append(est)
        histories.append(hist)
        verdicts.extend(fold_verdicts)
    summary = _summarize(verdicts, reports, config.mode, classes)
    return CVResult(plan, estimators, histories, verdicts, reports, summary, classes)


def _summarize(verdicts, reports, mode, classes) -> dict:
    pooled = compute_metrics(verdicts, [v.true_label for v in verdicts], mode, classes)
    return {
        "mode": mode,
        "folds": aggregate_folds(reports),
        "pooled": pooled.as_dict(),
        "per_fold": [r.as_dict() for r in reports],
    }


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def write_cv_outputs(result: CVResult, out_dir, config: TrainConfig) -> None:
    """Checkpoints, histories, fold plan, verdicts and metrics under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for fold, (est, hist) in enumerate(zip(result.estimators, result.histories)):
        with atomic_path(out / f"fold{fold}.npz") as tmp:
            save_checkpoint(tmp, est.model_, seed=config.seed + fold,
                            extra={"classes": list(result.classes), "fold": fold,
                                   "best_epoch": est.best_epoch_})
        with atomic_path(out / f"history_fold{fold}.csv") as tmp:
            write_history(tmp, hist)
    atomic_write_text(out / "folds.json", json.dumps(
        {"k": result.plan.k, "folds": result.plan.folds}, indent=2))
    atomic_write_text(out / "train_config.json", json.dumps(asdict(config), indent=2))
    write_eval_outputs(result, out)


def estimator_from_checkpoint(path) -> SPAPNetClassifier:
    from .model import load_checkpoint

    model, meta = load_checkpoint(path)
    classes = meta.get("extra", {}).get("classes") or [str(i) for i in
                                                      range(model.config.num_classes)]
    return SPAPNetClassifier.from_model(model, classes)


def prepare_manifest(records, mode="binary", drop_tasks=()):
    return filter_manifest(records, FilterConfig(mode=mode, drop_tasks=tuple(drop_tasks)))


def evaluate_run(run_dir, clips, records, mode="binary") -> CVResult:
    """Re-score a trained run from its checkpoints and fold plan."""
    run = Path(run_dir)
    plan_doc = json.loads((run / "folds.json").read_text())
    plan = FoldPlan(k=plan_doc["k"], folds=plan_doc["folds"])
    classes = class_names(mode)
    lookup = {c: i for i, c in enumerate(classes)}
    truth = {r.video_id: lookup[r.label] for r in records}
    estimators, verdicts, reports = [], [], []
    for fold in range(plan.k):
        ckpt = run / f"fold{fold}.npz"
        if not ckpt.exists():
            raise FileNotFoundError(f"missing checkpoint {ckpt}")
        est = estimator_from_checkpoint(ckpt)
        held = set(plan.folds[fold])
        fold_verdicts = vote_all(predict_clips(est, [c for c in clips if c.video_id in held]))
        for v in fold_verdicts:
            v.true_label = truth[v.video_id]
        reports.append(compute_metrics(fold_verdicts, [v.true_label for v in fold_verdicts],
                                       mode, classes))
        estimators.append(est)
        verdicts.extend(fold_verdicts)
    summary = _summarize(verdicts, reports, mode, classes)
    return CVResult(plan, estimators, [], verdicts, reports, summary, classes)


def write_eval_outputs(result: CVResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with atomic_path(out / "verdicts.csv") as tmp:
        write_verdicts(tmp, result.verdicts, result.classes)
    with atomic_path(out / "frame_attention.csv") as tmp:
        write_frame_attention(tmp, result.verdicts)
    atomic_write_text(out / "metrics.json",
                      json.dumps(result.summary, indent=2, sort_keys=True, default=_json_default))
