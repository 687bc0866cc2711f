"""Focal loss, optimizer, fold planning and the cross-validation driver."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.special import log_softmax
from sklearn.model_selection import KFold, StratifiedGroupKFold, StratifiedKFold

logger = logging.getLogger(__name__)

LOG_CLAMP = 1e-12
HISTORY_HEADER = ("epoch", "train_loss", "val_loss", "val_bal_acc", "lr")


@dataclass
class TrainConfig:
    mode: str = "binary"
    optimizer: str = "adam"
    lr: float | None = None  # None: 0.01 binary, 0.001 multiclass
    lr_decay_factor: float = 0.1
    lr_floor: float = 1e-5
    batch_size: int | None = None  # None: 16 binary, 8 multiclass
    max_epochs: int = 500
    focal_gamma: float = 2.0
    focal_alpha: list | None = None  # None: inverse class frequency
    seed: int = 0
    plateau_patience: int = 25
    folds: int = 5
    group_by: str = "video"  # or "participant"
    dtype: str = "float32"

    def __post_init__(self):
        if self.mode not in ("binary", "multiclass"):
            raise ValueError(f"mode must be binary or multiclass, got {self.mode!r}")
        if self.optimizer.lower() != "adam":
            raise ValueError("only the adam optimizer is supported")
        if self.lr is None:
            self.lr = 0.01 if self.mode == "binary" else 0.001
        if self.batch_size is None:
            self.batch_size = 16 if self.mode == "binary" else 8
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.focal_gamma < 0:
            raise ValueError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.focal_alpha is not None and min(self.focal_alpha) < 0:
            raise ValueError("focal_alpha entries must be >= 0")
        if self.group_by not in ("video", "participant"):
            raise ValueError(f"group_by must be video or participant, got {self.group_by!r}")


def _coerce(value: str, current):
    if isinstance(current, bool):
        return value.lower() in ("1", "true", "yes")
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    if value.lower() in ("", "none", "null"):
        return None
    if "," in value:
        return [float(v) for v in value.split(",")]
    try:
        return float(value) if "." in value or "e" in value.lower() else int(value)
    except ValueError:
        return value


def read_config(path, **overrides) -> TrainConfig:
    """Parse a flat ``key = value`` file; ``#`` starts a comment.

    Keys are :class:`TrainConfig` field names. Keyword overrides that are not
    ``None`` win over file values.
    """
    known = {f.name: f for f in fields(TrainConfig)}
    defaults = asdict(TrainConfig())
    values = {}
    if path is not None:
        with open(path) as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                key, sep, value = line.partition("=")
                if not sep:
                    key, _, value = line.partition(":")
                key, value = key.strip(), value.strip()
                if key not in known:
                    raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
                if key in ("mode", "optimizer", "group_by", "dtype"):
                    values[key] = value
                elif key == "focal_alpha":
                    values[key] = None if value.lower() in ("", "none") else [
                        float(v) for v in value.split(",")]
                else:
                    values[key] = _coerce(value, defaults[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


# -- loss --------------------------------------------------------------------


def focal_loss(logits, labels, gamma=2.0, alpha=None, return_grad=False):
    """Mean focal loss ``-alpha[y] (1 - p_y)^gamma log p_y`` over the batch.

    ``log p_y`` is clamped at ``log(1e-12)``. With ``return_grad`` the
    gradient with respect to ``logits`` is returned as well.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = z.shape
    a = np.ones(k) if alpha is None else np.asarray(alpha, dtype=np.float64)
    logp_all = log_softmax(z, axis=1)
    logp = logp_all[np.arange(n), y]
    clamped = logp < np.log(LOG_CLAMP)
    logp_c = np.maximum(logp, np.log(LOG_CLAMP))
    p = np.exp(logp_c)
    one_minus = -np.expm1(logp_c)
    weight = a[y]
    per_sample = -weight * one_minus**gamma * logp_c
    loss = per_sample.mean()
    if not return_grad:
        return loss
    # p*log(p)/(1-p) tends to -1 as p -> 1
    safe = one_minus > 0
    ratio = np.where(safe, p * logp_c / np.where(safe, one_minus, 1.0), -1.0)
    dlogp = -weight * (one_minus**gamma - gamma * one_minus**gamma * ratio)
    dlogp = np.where(clamped, 0.0, dlogp) / n
    probs = np.exp(logp_all)
    onehot = np.zeros_like(z)
    onehot[np.arange(n), y] = 1.0
    grad = dlogp[:, None] * (onehot - probs)
    return loss, grad.reshape(np.shape(logits))


def inverse_frequency_alpha(y, n_classes) -> np.ndarray:
    counts = np.bincount(y, minlength=n_classes).astype(np.float64)
    alpha = np.where(counts > 0, len(y) / (n_classes * np.maximum(counts, 1)), 0.0)
    return alpha


# -- optimization ------------------------------------------------------------


class Adam:
    def __init__(self, params: dict, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        # float64 moments cannot decay into the subnormal range within any realistic run
        self.m = {k: np.zeros(v.shape) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        scale = self.lr * np.sqrt(1 - b2**self.t) / (1 - b1**self.t)
        for k, p in params.items():
            g = np.asarray(grads[k], dtype=np.float64)
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            # the update is formed in float64 and rounded once into the parameter
            p[...] = p - scale * m / (np.sqrt(v) + self.eps)


class ReduceOnPlateau:
    """Multiply the lr by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr, factor=0.1, patience=25, floor=1e-5):
        self.lr, self.factor, self.patience, self.floor = lr, factor, patience, floor
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> float:
        if metric < self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr = max(self.lr * self.factor, self.floor)
                self.bad_epochs = 0
        return self.lr


# -- folds -------------------------------------------------------------------


@dataclass
class FoldPlan:
    k: int
    folds: list = field(default_factory=list)  # per fold: list of held-out video ids

    def split(self, fold: int) -> tuple[list, list]:
        """``(train_video_ids, validation_video_ids)`` for ``fold``."""
        val = list(self.folds[fold])
        held = set(val)
        train = [v for i, f in enumerate(self.folds) if i != fold for v in f if v not in held]
        return train, val

    def fold_of(self, video_id) -> int:
        for i, f in enumerate(self.folds):
            if video_id in f:
                return i
        raise KeyError(video_id)


def make_folds(records, k=5, seed=0, group_by="video") -> FoldPlan:
    """Stratified partition of the manifest's videos into ``k`` folds.

    With ``group_by="participant"`` all videos of one participant share a
    fold. A class with fewer than ``k`` members triggers a warning and an
    unstratified grouped split.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    ids = [r.video_id for r in records]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate video ids in manifest")
    labels = np.array([r.label for r in records])
    groups = np.array([r.participant_id if group_by == "participant" else r.video_id
                       for r in records])
    n_groups = len(set(groups))
    if n_groups < k:
        raise ValueError(f"{n_groups} groups cannot fill {k} folds")
    _, counts = np.unique(labels, return_counts=True)
    x = np.zeros(len(ids))
    if counts.min() < k:
        warnings.warn(f"a class has fewer than {k} videos; folds are not stratified",
                      stacklevel=2)
        uniq = np.unique(groups)
        splitter = KFold(n_splits=k, shuffle=True, random_state=seed)
        folds = [set(uniq[te]) for _, te in splitter.split(uniq)]
        assign = [[i for i, g in enumerate(groups) if g in f] for f in folds]
    elif group_by == "participant":
        splitter = StratifiedGroupKFold(n_splits=k, shuffle=True, random_state=seed)
        assign = [te for _, te in splitter.split(x, labels, groups)]
    else:
        splitter = StratifiedKFold(n_splits=k, shuffle=True, random_state=seed)
        assign = [te for _, te in splitter.split(x, labels)]
    return FoldPlan(k=k, folds=[sorted(ids[i] for i in te) for te in assign])


# -- history -----------------------------------------------------------------


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(HISTORY_HEADER)
        for row in history:
            writer.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_HEADER[1:]])


# -- fold training -------------------------------------------------------------


def _clips_to_arrays(clips, classes, dtype):
    from .validation import encode_labels

    X = np.stack([c.frames for c in clips]).astype(dtype)
    y = encode_labels([c.label for c in clips], classes)
    return X, y


def train_fold(clips, plan: FoldPlan, fold: int, config: TrainConfig, classes,
               model_config=None):
    """Fit one fold; return the fitted estimator and its per-epoch history.

    The estimator holds the weights of the epoch with the lowest validation
    loss.
    """
    from .estimator import SPAPNetClassifier

    train_ids, val_ids = plan.split(fold)
    train_ids, val_ids = set(train_ids), set(val_ids)
    tr = [c for c in clips if c.video_id in train_ids]
    va = [c for c in clips if c.video_id in val_ids]
    if not tr:
        raise ValueError(f"fold {fold}: no training clips")
    Xtr, ytr = _clips_to_arrays(tr, classes, config.dtype)
    eval_set = _clips_to_arrays(va, classes, config.dtype) if va else None
    est = SPAPNetClassifier.from_configs(model_config, config, classes=classes,
                                         random_state=config.seed + fold)
    est.fit(Xtr, ytr, eval_set=eval_set, encoded=True)
    logger.info("fold %d: best epoch %d, val loss %.4f", fold, est.best_epoch_,
                est.best_val_loss_)
    return est, est.history_
