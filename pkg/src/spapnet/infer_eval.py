"""Clip prediction, video-level voting, metrics and attention reports."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import NODE_NAMES

logger = logging.getLogger(__name__)


@dataclass
class ClipPrediction:
    clip_id: str
    video_id: str
    probabilities: np.ndarray
    predicted: int
    attention: np.ndarray  # (7,)
    frame_attention: np.ndarray | None = None  # (L, 7)


@dataclass
class VideoVerdict:
    video_id: str
    voted: int
    mean_probabilities: np.ndarray
    attention: np.ndarray
    clip_count: int
    frame_attention: np.ndarray | None = None
    true_label: int | None = None


@dataclass
class MetricsReport:
    mode: str
    classes: list
    ac: float
    se: float
    sp: float
    f1: float
    per_class: dict = field(default_factory=dict)
    undefined_classes: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"mode": self.mode, "classes": list(self.classes), "AC": self.ac,
                "SE": self.se, "SP": self.sp, "F1": self.f1, "per_class": self.per_class,
                "undefined_classes": list(self.undefined_classes)}


def predict_clips(estimator, clips) -> list[ClipPrediction]:
    """Eval-mode predictions with attention for a list of :class:`Clip`."""
    if not clips:
        return []
    X = np.stack([c.frames for c in clips])
    probs, frame_att, clip_att = estimator.predict_with_attention(X)
    return [
        ClipPrediction(clip_id=c.clip_id, video_id=c.video_id, probabilities=p,
                       predicted=int(np.argmax(p)), attention=a, frame_attention=f)
        for c, p, a, f in zip(clips, probs, clip_att, frame_att)
    ]


def predict_clip(estimator, clip) -> ClipPrediction:
    return predict_clips(estimator, [clip])[0]


def vote_video(preds, video_id=None) -> VideoVerdict:
    """Majority vote; ties go to the tied class with the highest mean probability.

    Remaining exact ties resolve to the lowest class index.
    """
    preds = list(preds)
    if not preds:
        raise ValueError(f"no clip predictions for video {video_id!r}")
    vid = video_id if video_id is not None else preds[0].video_id
    if any(p.video_id != vid for p in preds):
        raise ValueError(f"clip predictions from several videos passed for {vid!r}")
    n_classes = len(preds[0].probabilities)
    votes = np.bincount([p.predicted for p in preds], minlength=n_classes)
    mean_p = np.mean([p.probabilities for p in preds], axis=0)
    tied = np.flatnonzero(votes == votes.max())
    voted = int(tied[np.argmax(mean_p[tied])])
    att = np.mean([p.attention for p in preds], axis=0)
    att = att / att.sum()
    frames = None
    if all(p.frame_attention is not None for p in preds):
        # clips are concatenated in start order for a per-frame trace
        ordered = sorted(preds, key=lambda p: _clip_start(p.clip_id))
        frames = np.concatenate([p.frame_attention for p in ordered])
    return VideoVerdict(video_id=vid, voted=voted, mean_probabilities=mean_p, attention=att,
                        clip_count=len(preds), frame_attention=frames)


def _clip_start(clip_id: str) -> int:
    tail = clip_id.rsplit(":", 1)[-1]
    return int(tail) if tail.isdigit() else 0


def vote_all(preds) -> list[VideoVerdict]:
    by_video = defaultdict(list)
    for p in preds:
        by_video[p.video_id].append(p)
    return [vote_video(ps, vid) for vid, ps in by_video.items()]


# -- metrics -----------------------------------------------------------------


def _safe_div(a, b):
    return a / b if b else float("nan")


def _binary_counts(pred, truth, positive):
    tp = int(np.sum((pred == positive) & (truth == positive)))
    fn = int(np.sum((pred != positive) & (truth == positive)))
    tn = int(np.sum((pred != positive) & (truth != positive)))
    fp = int(np.sum((pred == positive) & (truth != positive)))
    return tp, fn, tn, fp


def scores_from_counts(tp, fn, tn, fp) -> dict:
    se = _safe_div(tp, tp + fn)
    sp = _safe_div(tn, tn + fp)
    return {"SE": se, "SP": sp, "AC": (se + sp) / 2, "F1": _safe_div(2 * tp, 2 * tp + fp + fn),
            "TP": tp, "FN": fn, "TN": tn, "FP": fp}


def compute_metrics(predicted, truths, mode="binary", classes=None) -> MetricsReport:
    """AC (balanced accuracy), SE, SP and F1 at video level.

    Binary mode treats class index 1 as positive. Multiclass mode computes
    one-vs-rest scores per class and macro-averages them; AC is the mean
    per-class recall. Classes absent from ``truths`` are reported as
    undefined and left out of the averages.
    """
    pred = np.asarray([v.voted if isinstance(v, VideoVerdict) else v for v in predicted])
    truth = np.asarray(truths)
    if pred.shape != truth.shape:
        raise ValueError(f"{len(pred)} verdicts vs {len(truth)} truths")
    if mode == "binary":
        classes = list(classes) if classes is not None else ["negative", "positive"]
        s = scores_from_counts(*_binary_counts(pred, truth, 1))
        return MetricsReport(mode, classes, s["AC"], s["SE"], s["SP"], s["F1"],
                             per_class={classes[1]: s})
    if mode != "multiclass":
        raise ValueError(f"unknown mode {mode!r}")
    if classes is None:
        classes = list(range(int(max(pred.max(initial=0), truth.max(initial=0))) + 1))
    per_class, undefined = {}, []
    for idx, name in enumerate(classes):
        s = scores_from_counts(*_binary_counts(pred, truth, idx))
        per_class[str(name)] = s
        if s["TP"] + s["FN"] == 0:
            undefined.append(str(name))
    if undefined:
        warnings.warn(f"classes absent from ground truth: {undefined}", stacklevel=2)
    defined = [per_class[str(n)] for n in classes if str(n) not in undefined]

    def macro(key):
        vals = [s[key] for s in defined if not np.isnan(s[key])]
        return float(np.mean(vals)) if vals else float("nan")

    se = macro("SE")
    return MetricsReport(mode, list(map(str, classes)), se, se, macro("SP"), macro("F1"),
                         per_class=per_class, undefined_classes=undefined)


def aggregate_folds(reports) -> dict:
    """Mean and population std of each headline metric across folds."""
    out = {}
    for key in ("AC", "SE", "SP", "F1"):
        vals = np.array([r.as_dict()[key] for r in reports], dtype=np.float64)
        out[key] = {"mean": float(np.nanmean(vals)), "std": float(np.nanstd(vals)),
                    "folds": [float(v) for v in vals]}
    return out


# -- serialization -------------------------------------------------------------


def write_verdicts(path, verdicts, classes) -> None:
    header = (["video_id", "true_label", "voted_label", "clip_count"]
              + [f"p_class_{i}" for i in range(len(classes))]
              + [f"att_j{j}" for j in range(1, 8)])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for v in verdicts:
            truth = "" if v.true_label is None else classes[v.true_label]
            w.writerow([v.video_id, truth, classes[v.voted], v.clip_count]
                       + [repr(float(p)) for p in v.mean_probabilities]
                       + [repr(float(a)) for a in v.attention])


def read_verdicts(path, classes=None) -> list[VideoVerdict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return []
    n_classes = sum(1 for k in rows[0] if k.startswith("p_class_"))
    lookup = {c: i for i, c in enumerate(classes)} if classes is not None else None
    out = []
    for r in rows:
        probs = np.array([float(r[f"p_class_{i}"]) for i in range(n_classes)])
        att = np.array([float(r[f"att_j{j}"]) for j in range(1, 8)])
        voted = lookup[r["voted_label"]] if lookup else int(np.argmax(probs))
        truth = lookup.get(r["true_label"]) if lookup and r["true_label"] else None
        out.append(VideoVerdict(video_id=r["video_id"], voted=voted, mean_probabilities=probs,
                                attention=att, clip_count=int(r["clip_count"]),
                                true_label=truth))
    return out


def write_frame_attention(path, verdicts) -> None:
    """Long-format per-frame weights: ``video_id,frame,att_j1..att_j7``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["video_id", "frame"] + [f"att_j{j}" for j in range(1, 8)])
        for v in verdicts:
            if v.frame_attention is None:
                continue
            for t, row in enumerate(v.frame_attention):
                w.writerow([v.video_id, t] + [f"{float(a):.6g}" for a in row])


def read_frame_attention(path) -> dict[str, np.ndarray]:
    traces = defaultdict(list)
    with open(path, newline="") as fh:
        for r in csv.DictReader(fh):
            traces[r["video_id"]].append([float(r[f"att_j{j}"]) for j in range(1, 8)])
    return {k: np.array(v) for k, v in traces.items()}


# -- attention report ------------------------------------------------------------


def joint_attention_table(verdicts) -> np.ndarray:
    """Mean per-joint attention across videos, shape ``(7,)``."""
    att = np.array([v.attention for v in verdicts], dtype=np.float64)
    return att.mean(axis=0)


def attention_report(verdicts, out_dir, frame_traces=None, videos=None, plots=True) -> dict:
    """Write the per-joint table, per-frame traces and (optionally) plots.

    ``frame_traces`` maps video id to an ``(T, 7)`` array; when omitted the
    verdicts' own ``frame_attention`` is used. ``videos`` selects which videos
    get a trace (default: the first three with traces).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    verdicts = list(verdicts)
    means = joint_attention_table(verdicts)
    with open(out / "joint_attention.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["joint", "name", "mean_attention"])
        for j, (name, m) in enumerate(zip(NODE_NAMES, means), 1):
            w.writerow([j, name, f"{m:.6f}"])
    traces = dict(frame_traces or {})
    if not traces:
        traces = {v.video_id: v.frame_attention for v in verdicts
                  if v.frame_attention is not None}
    chosen = list(videos) if videos is not None else list(traces)[:3]
    chosen = [v for v in chosen if v in traces]
    for vid in chosen:
        with open(out / f"frames_{vid}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["frame"] + list(NODE_NAMES))
            for t, row in enumerate(traces[vid]):
                w.writerow([t] + [f"{a:.6f}" for a in row])
    files = ["joint_attention.csv"] + [f"frames_{v}.csv" for v in chosen]
    if plots:
        files += _plot_attention(out, means, {v: traces[v] for v in chosen})
    summary = {"mean_attention": dict(zip(NODE_NAMES, map(float, means))),
               "videos": len(verdicts), "files": files}
    (out / "attention_summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def _plot_attention(out: Path, means, traces) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = []
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(range(1, 8), means)
    ax.set_xticks(range(1, 8), NODE_NAMES, rotation=30)
    ax.set_ylabel("mean attention")
    fig.tight_layout()
    fig.savefig(out / "joint_attention.png", dpi=100)
    plt.close(fig)
    files.append("joint_attention.png")
    for vid, trace in traces.items():
        fig, ax = plt.subplots(figsize=(7, 3))
        for j, name in enumerate(NODE_NAMES):
            ax.plot(trace[:, j], label=name, lw=0.8)
        ax.set_xlabel("frame")
        ax.set_ylabel("attention")
        ax.legend(fontsize=6, ncol=4)
        fig.tight_layout()
        fig.savefig(out / f"frames_{vid}.png", dpi=100)
        plt.close(fig)
        files.append(f"frames_{vid}.png")
    return files
