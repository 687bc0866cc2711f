"""scikit-learn style wrappers: a pose normalizer and the SPAPNet classifier."""

from __future__ import annotations

import logging

import numpy as np
from scipy.special import softmax
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .model import ModelConfig, SPAPNet, attention_weights
from .pose_ingest import C_MIN, normalize_sequence
from .train import Adam, ReduceOnPlateau, TrainConfig, focal_loss, inverse_frequency_alpha
from .validation import check_clips, check_raw_keypoints, encode_labels

logger = logging.getLogger(__name__)


class PoseNormalizer(TransformerMixin, BaseEstimator):
    """Raw COCO-18 keypoints ``(..., 18, 3)`` to centered nodes ``(..., 7, 3)``.

    Stateless; ``fit`` only records the input layout.
    """

    def __init__(self, c_min=C_MIN, use_confidence=True):
        self.c_min = c_min
        self.use_confidence = use_confidence

    def fit(self, X, y=None):
        check_raw_keypoints(X)
        self.n_joints_in_ = 18
        return self

    def transform(self, X):
        X = check_raw_keypoints(X)
        lead = X.shape[:-2]
        nodes, _, _ = normalize_sequence(X.reshape(-1, 18, 3), self.c_min, self.use_confidence)
        return nodes.reshape(*lead, 7, 3)


class SPAPNetClassifier(ClassifierMixin, BaseEstimator):
    """Clip classifier trained with focal loss and Adam.

    ``X`` is ``(n_clips, clip_len, 7, 3)``. ``fit`` accepts an optional
    ``eval_set=(X_val, y_val)`` that drives the plateau schedule and the
    choice of the returned weights (lowest validation loss).
    """

    def __init__(self, block_channels=(64, 128), leaky_slope=0.2, dropout_rate=0.2,
                 pcsf_out_channels=128, b=0.9, d=0.125, clip_len=100, lr=0.01,
                 lr_decay_factor=0.1, lr_floor=1e-5, batch_size=16, max_epochs=500,
                 focal_gamma=2.0, focal_alpha=None, plateau_patience=25, classes=None,
                 dtype="float32", random_state=0, verbose=False):
        self.block_channels = block_channels
        self.leaky_slope = leaky_slope
        self.dropout_rate = dropout_rate
        self.pcsf_out_channels = pcsf_out_channels
        self.b = b
        self.d = d
        self.clip_len = clip_len
        self.lr = lr
        self.lr_decay_factor = lr_decay_factor
        self.lr_floor = lr_floor
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.focal_gamma = focal_gamma
        self.focal_alpha = focal_alpha
        self.plateau_patience = plateau_patience
        self.classes = classes
        self.dtype = dtype
        self.random_state = random_state
        self.verbose = verbose

    @classmethod
    def from_configs(cls, model_config: ModelConfig | None, train_config: TrainConfig,
                     classes=None, random_state=None):
        mc = model_config or ModelConfig()
        return cls(
            block_channels=tuple(mc.block_channels), leaky_slope=mc.leaky_slope,
            dropout_rate=mc.dropout_rate, pcsf_out_channels=mc.pcsf_out_channels,
            b=mc.b, d=mc.d, clip_len=mc.clip_len, lr=train_config.lr,
            lr_decay_factor=train_config.lr_decay_factor, lr_floor=train_config.lr_floor,
            batch_size=train_config.batch_size, max_epochs=train_config.max_epochs,
            focal_gamma=train_config.focal_gamma, focal_alpha=train_config.focal_alpha,
            plateau_patience=train_config.plateau_patience, classes=classes,
            dtype=train_config.dtype,
            random_state=train_config.seed if random_state is None else random_state,
        )

    def _model_config(self, n_classes) -> ModelConfig:
        return ModelConfig(block_channels=list(self.block_channels),
                           leaky_slope=self.leaky_slope, dropout_rate=self.dropout_rate,
                           pcsf_out_channels=self.pcsf_out_channels,
                           num_classes=n_classes, b=self.b, d=self.d,
                           clip_len=self.clip_len, dtype=self.dtype)

    def fit(self, X, y, eval_set=None, encoded=False):
        X = check_clips(X, self.clip_len, dtype=self.dtype)
        if self.classes is not None:
            self.classes_ = np.asarray(self.classes)
        else:
            self.classes_ = np.unique(y)
        yi = np.asarray(y, dtype=np.int64) if encoded else encode_labels(y, self.classes_)
        if len(yi) != len(X):
            raise ValueError(f"{len(X)} clips but {len(yi)} labels")
        n_classes = len(self.classes_)
        if eval_set is not None:
            Xv = check_clips(eval_set[0], self.clip_len, dtype=self.dtype)
            yv = (np.asarray(eval_set[1], dtype=np.int64) if encoded
                  else encode_labels(eval_set[1], self.classes_))
        alpha = (np.asarray(self.focal_alpha, dtype=np.float64) if self.focal_alpha is not None
                 else inverse_frequency_alpha(yi, n_classes))
        self.alpha_ = alpha

        seeds = np.random.SeedSequence(self.random_state).spawn(3)
        init_rng, order_rng, drop_rng = (np.random.default_rng(s) for s in seeds)
        self.model_ = SPAPNet(self._model_config(n_classes), rng=init_rng)
        params = self.model_.parameters()
        opt = Adam(params, self.lr)
        sched = ReduceOnPlateau(self.lr, self.lr_decay_factor, self.plateau_patience,
                                self.lr_floor)
        history = []
        best = (np.inf, 0, None)
        for epoch in range(1, self.max_epochs + 1):
            order = order_rng.permutation(len(X))
            total = 0.0
            for start in range(0, len(X), self.batch_size):
                idx = order[start:start + self.batch_size]
                logits = self.model_.forward(X[idx], train=True, rng=drop_rng)
                loss, dlogits = focal_loss(logits, yi[idx], self.focal_gamma, alpha,
                                           return_grad=True)
                grads = self.model_.backward(dlogits)
                opt.step(params, grads)
                total += loss * len(idx)
            row = {"epoch": epoch, "train_loss": total / len(X), "lr": opt.lr,
                   "val_loss": np.nan, "val_bal_acc": np.nan}
            if eval_set is not None:
                self.model_.recalibrate_batchnorm(X)
                val_logits = self._forward_eval(Xv)[0]
                row["val_loss"] = focal_loss(val_logits, yv, self.focal_gamma, alpha)
                row["val_bal_acc"] = _balanced_accuracy(yv, val_logits.argmax(1), n_classes)
            monitor = row["val_loss"] if eval_set is not None else row["train_loss"]
            if monitor < best[0]:
                best = (monitor, epoch, self.model_.state_dict())
            opt.lr = sched.step(monitor)
            history.append(row)
            if self.verbose:
                logger.info("epoch %d train %.5f val %.5f lr %g", epoch, row["train_loss"],
                            row["val_loss"], row["lr"])
        self.best_val_loss_, self.best_epoch_, state = best
        if state is not None:
            self.model_.load_state_dict(state)
        if eval_set is None:
            self.model_.recalibrate_batchnorm(X)
        self.history_ = history
        return self

    # -- inference ---------------------------------------------------------

    def _forward_eval(self, X, chunk=32):
        logits, acts = [], []
        for s in range(0, len(X), chunk):
            logits.append(self.model_.forward(X[s:s + chunk], train=False))
            acts.append(self.model_.activations)
        return np.concatenate(logits).astype(np.float64), np.concatenate(acts)

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self._forward_eval(check_clips(X, self.clip_len, dtype=self.dtype))[0]

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return softmax(self.decision_function(X), axis=1)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def attention(self, X):
        """Per-frame ``(n, L, 7)`` and per-clip ``(n, 7)`` joint weights."""
        check_is_fitted(self, "model_")
        _, acts = self._forward_eval(check_clips(X, self.clip_len, dtype=self.dtype))
        return attention_weights(acts)

    def predict_with_attention(self, X):
        check_is_fitted(self, "model_")
        logits, acts = self._forward_eval(check_clips(X, self.clip_len, dtype=self.dtype))
        frame, clip = attention_weights(acts)
        return softmax(logits, axis=1), frame, clip

    @classmethod
    def from_model(cls, model: SPAPNet, classes):
        """Wrap an already trained network (e.g. from a checkpoint)."""
        mc = model.config
        est = cls(block_channels=tuple(mc.block_channels), leaky_slope=mc.leaky_slope,
                  dropout_rate=mc.dropout_rate, pcsf_out_channels=mc.pcsf_out_channels,
                  b=mc.b, d=mc.d, clip_len=mc.clip_len, classes=list(classes),
                  dtype=mc.dtype)
        est.model_ = model
        est.classes_ = np.asarray(classes)
        return est


def _balanced_accuracy(y_true, y_pred, n_classes) -> float:
    recalls = [np.mean(y_pred[y_true == c] == c) for c in range(n_classes) if np.any(y_true == c)]
    return float(np.mean(recalls)) if recalls else float("nan")
