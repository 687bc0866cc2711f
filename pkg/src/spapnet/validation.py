"""Input checks shared by the estimators and the pipeline functions."""

from __future__ import annotations

import numpy as np

from .graph import NODE_COUNT
from .pose_ingest import N_JOINTS


def check_clips(X, clip_len=None, channels=3, dtype=np.float64) -> np.ndarray:
    """Return ``X`` as a finite float array of shape ``(n, L, 7, channels)``."""
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[2:] != (NODE_COUNT, channels):
        raise ValueError(f"expected clips of shape (n, L, {NODE_COUNT}, {channels}), "
                         f"got {X.shape}")
    if clip_len is not None and X.shape[1] != clip_len:
        raise ValueError(f"expected clip length {clip_len}, got {X.shape[1]}")
    if X.shape[0] == 0:
        raise ValueError("empty clip array")
    if not np.all(np.isfinite(X)):
        raise ValueError("clips contain NaN or infinite values")
    return X


def check_raw_keypoints(X) -> np.ndarray:
    """Raw COCO-18 keypoints ``(..., 18, 3)`` as a float array."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim < 2 or X.shape[-2:] != (N_JOINTS, 3):
        raise ValueError(f"expected trailing shape ({N_JOINTS}, 3), got {X.shape}")
    return X


def encode_labels(y, classes) -> np.ndarray:
    """Map labels onto indices of ``classes``, rejecting unknown values."""
    lookup = {c: i for i, c in enumerate(classes)}
    y = np.asarray(y)
    try:
        return np.array([lookup[v.item() if hasattr(v, "item") else v] for v in y],
                        dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]!r} not in classes {list(classes)}") from None
