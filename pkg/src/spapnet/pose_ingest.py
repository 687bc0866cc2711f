"""Keypoint parsing, upper-body normalization, clip segmentation and manifests.

Keypoint file format (one JSON document per video)::

    {"video_id": "v001",
     "frames": [{"frame_index": 0, "keypoints": [x0, y0, c0, ..., x17, y17, c17]},
                ...]}

``keypoints`` is the flat COCO-18 list of 54 numbers. The detector-native
variant is a directory holding one JSON file per frame, each shaped like
``{"people": [{"pose_keypoints_2d": [54 numbers]}]}``; frames are taken in
file-name order, the frame index being the last integer in the file name.
A frame with no people is an all-zero (undetected) frame.
"""

from __future__ import annotations

import csv
import json
import logging
import re
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

COCO18_NAMES = (
    "Nose", "Neck", "RShoulder", "RElbow", "RWrist", "LShoulder", "LElbow",
    "LWrist", "RHip", "RKnee", "RAnkle", "LHip", "LKnee", "LAnkle", "REye",
    "LEye", "REar", "LEar",
)
N_JOINTS = 18
NECK, R_HIP, L_HIP = 1, 8, 11
# COCO-18 indices of graph nodes 1..7: RWrist, RElbow, RShoulder, Neck,
# LShoulder, LElbow, LWrist
UPPER_BODY = (4, 3, 2, 1, 5, 6, 7)
C_MIN = 0.1

LABELS = ("PT", "ET", "FT", "DT", "NoTremor", "Other")
MULTICLASS_CLASSES = ("PT", "ET", "FT", "DT", "NoTremor")
BINARY_CLASSES = ("negative", "positive")
MANIFEST_HEADER = ("video_id", "participant_id", "label", "task_id", "path")

CLIP_CACHE_MAGIC = b"SPAP"
CLIP_CACHE_VERSION = 1


class KeypointFormatError(ValueError):
    """Malformed keypoint document, naming the offending frame where known."""


@dataclass
class PoseSequence:
    """Raw keypoints of one video, ``keypoints`` shaped ``(T, 18, 3)``."""

    keypoints: np.ndarray
    frame_index: np.ndarray
    video_id: str = ""
    label: str | None = None
    participant_id: str = ""

    def __len__(self):
        return len(self.keypoints)


@dataclass
class NormalizedFrame:
    nodes: np.ndarray  # (7, 3): x', y', c
    origin: np.ndarray  # (2,)
    valid: bool = True


@dataclass
class Clip:
    frames: np.ndarray  # (L, 7, 3)
    video_id: str
    label: str | None
    participant_id: str = ""
    start: int = 0

    @property
    def clip_id(self) -> str:
        return f"{self.video_id}:{self.start}"


@dataclass
class ManifestRecord:
    video_id: str
    participant_id: str
    label: str
    task_id: str = ""
    path: str = ""


@dataclass
class FilterConfig:
    mode: str = "binary"  # or "multiclass"
    drop_tasks: tuple = field(default_factory=tuple)


# -- parsing -----------------------------------------------------------------


def _frame_array(values, where: str) -> np.ndarray:
    try:
        arr = np.asarray(values, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise KeypointFormatError(f"{where}: non-numeric keypoint values") from exc
    if arr.ndim == 2 and arr.shape[1] == 3:
        arr = arr.ravel()
    if arr.ndim != 1 or arr.size % 3:
        raise KeypointFormatError(f"{where}: keypoints must be a flat list of (x, y, c)")
    if arr.size != 3 * N_JOINTS:
        raise KeypointFormatError(
            f"{where}: expected {N_JOINTS} joints, got {arr.size // 3}"
        )
    if not np.all(np.isfinite(arr)):
        raise KeypointFormatError(f"{where}: non-finite keypoint value")
    return arr.reshape(N_JOINTS, 3)


def _parse_video_document(doc, source) -> PoseSequence:
    if not isinstance(doc, dict) or not isinstance(doc.get("frames"), list):
        raise KeypointFormatError(f"{source}: missing top-level 'frames' list")
    kps, idx = [], []
    for pos, frame in enumerate(doc["frames"]):
        if not isinstance(frame, dict) or "keypoints" not in frame:
            raise KeypointFormatError(f"{source}: frame {pos}: malformed record")
        fi = frame.get("frame_index", pos)
        if not isinstance(fi, int) or fi < 0:
            raise KeypointFormatError(f"{source}: frame {pos}: bad frame_index {fi!r}")
        kps.append(_frame_array(frame["keypoints"], f"{source}: frame {fi}"))
        idx.append(fi)
    return _finish(kps, idx, source, doc.get("video_id") or Path(source).stem)


def _finish(kps, idx, source, video_id) -> PoseSequence:
    idx = np.asarray(idx, dtype=np.int64)
    order = np.argsort(idx, kind="stable")
    idx = idx[order]
    if np.any(np.diff(idx) <= 0):
        dup = int(idx[1:][np.diff(idx) <= 0][0])
        raise KeypointFormatError(f"{source}: frame {dup}: duplicate frame_index")
    arr = np.stack(kps)[order] if kps else np.zeros((0, N_JOINTS, 3))
    return PoseSequence(keypoints=arr, frame_index=idx, video_id=str(video_id))


def _parse_frame_directory(path: Path) -> PoseSequence:
    files = sorted(path.glob("*.json"))
    kps, idx = [], []
    for pos, f in enumerate(files):
        numbers = re.findall(r"\d+", f.stem)
        fi = int(numbers[-1]) if numbers else pos
        try:
            doc = json.loads(f.read_text())
        except json.JSONDecodeError as exc:
            raise KeypointFormatError(f"{f}: frame {fi}: invalid JSON") from exc
        people = doc.get("people") if isinstance(doc, dict) else None
        if people is None:
            raise KeypointFormatError(f"{f}: frame {fi}: missing 'people'")
        if not people:
            kps.append(np.zeros((N_JOINTS, 3)))
        else:
            kps.append(_frame_array(people[0].get("pose_keypoints_2d"), f"{f}: frame {fi}"))
        idx.append(fi)
    return _finish(kps, idx, path, path.name)


def parse_keypoint_file(path) -> PoseSequence:
    """Read a per-video keypoint document or a directory of per-frame files."""
    path = Path(path)
    if path.is_dir():
        return _parse_frame_directory(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise KeypointFormatError(f"{path}: invalid JSON ({exc.msg})") from exc
    return _parse_video_document(doc, path)


def write_keypoint_file(path, seq: PoseSequence) -> None:
    doc = {
        "video_id": seq.video_id,
        "frames": [
            {"frame_index": int(i), "keypoints": [round(float(v), 4) for v in kp.ravel()]}
            for i, kp in zip(seq.frame_index, seq.keypoints)
        ],
    }
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))


# -- normalization -----------------------------------------------------------


def normalize_frame(frame, c_min: float = C_MIN, use_confidence: bool = True) -> NormalizedFrame:
    """Center the 7 upper-body joints on the neck/hip centroid.

    The frame is invalid when any of neck, right hip or left hip has
    confidence ``<= c_min``. Undetected feature joints stay ``(0, 0, 0)``.
    """
    kp = np.asarray(frame, dtype=np.float64)
    if kp.shape != (N_JOINTS, 3):
        raise KeypointFormatError(f"expected ({N_JOINTS}, 3) keypoints, got {kp.shape}")
    anchors = kp[[NECK, R_HIP, L_HIP]]
    origin = anchors[:, :2].mean(axis=0)
    nodes = kp[list(UPPER_BODY)].copy()
    detected = np.any(nodes != 0.0, axis=1)
    nodes[detected, :2] -= origin
    if not use_confidence:
        nodes[:, 2] = 0.0
    valid = bool(np.all(anchors[:, 2] > c_min))
    return NormalizedFrame(nodes=nodes, origin=origin, valid=valid)


def normalize_sequence(keypoints, c_min: float = C_MIN, use_confidence: bool = True):
    """Vectorized :func:`normalize_frame` over ``(T, 18, 3)``.

    Returns ``(nodes (T, 7, 3), origins (T, 2), valid (T,))``.
    """
    kp = np.asarray(keypoints, dtype=np.float64)
    if kp.ndim != 3 or kp.shape[1:] != (N_JOINTS, 3):
        raise KeypointFormatError(f"expected (T, {N_JOINTS}, 3) keypoints, got {kp.shape}")
    anchors = kp[:, [NECK, R_HIP, L_HIP]]
    origins = anchors[..., :2].mean(axis=1)
    nodes = kp[:, list(UPPER_BODY)].copy()
    detected = np.any(nodes != 0.0, axis=2)
    nodes[..., :2] -= np.where(detected[..., None], origins[:, None, :], 0.0)
    if not use_confidence:
        nodes[..., 2] = 0.0
    valid = np.all(anchors[..., 2] > c_min, axis=1)
    return nodes, origins, valid


# -- segmentation ------------------------------------------------------------


def valid_runs(valid) -> list[tuple[int, int]]:
    """``[start, stop)`` bounds of maximal runs of ``True``."""
    v = np.concatenate([[False], np.asarray(valid, dtype=bool), [False]])
    edges = np.flatnonzero(v[1:] != v[:-1])
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


def segment_clips(seq: PoseSequence, clip_len: int = 100, c_min: float = C_MIN,
                  use_confidence: bool = True) -> list[Clip]:
    """Cut every maximal run of valid frames into non-overlapping clips.

    A run of ``n`` valid frames gives ``n // clip_len`` clips; leftovers are
    dropped. Frames must also be consecutive in ``frame_index``; a gap ends
    the run.
    """
    if clip_len < 1:
        raise ValueError(f"clip_len must be >= 1, got {clip_len}")
    if len(seq) == 0:
        return []
    nodes, _, valid = normalize_sequence(seq.keypoints, c_min, use_confidence)
    # a missing frame index breaks contiguity just like an invalid frame
    breaks = np.concatenate([[False], np.diff(seq.frame_index) != 1])
    clips = []
    for start, stop in valid_runs(valid):
        cuts = [start] + [i for i in range(start + 1, stop) if breaks[i]] + [stop]
        for a, b in zip(cuts[:-1], cuts[1:]):
            for s in range(a, b - clip_len + 1, clip_len):
                clips.append(Clip(
                    frames=nodes[s:s + clip_len],
                    video_id=seq.video_id,
                    label=seq.label,
                    participant_id=seq.participant_id,
                    start=int(seq.frame_index[s]),
                ))
    return clips


# -- manifests ---------------------------------------------------------------


def read_manifest(path) -> list[ManifestRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
        records = [ManifestRecord(**{k: row[k] for k in MANIFEST_HEADER}) for row in reader]
    validate_manifest(records)
    return records


def write_manifest(path, records) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in records:
            writer.writerow([r.video_id, r.participant_id, r.label, r.task_id, r.path])


def validate_manifest(records, vocabulary=LABELS) -> None:
    seen = set()
    for r in records:
        if r.label not in vocabulary:
            raise ValueError(f"video {r.video_id}: unknown label {r.label!r}")
        if r.video_id in seen:
            raise ValueError(f"duplicate video_id {r.video_id!r}")
        seen.add(r.video_id)


def filter_manifest(records, config: FilterConfig | None = None) -> list[ManifestRecord]:
    """Drop ``Other`` and configured tasks; in binary mode relabel to positive/negative."""
    config = config or FilterConfig()
    if config.mode not in ("binary", "multiclass"):
        raise ValueError(f"unknown mode {config.mode!r}")
    validate_manifest(records)
    drop = {str(t) for t in config.drop_tasks}
    out = []
    for r in records:
        if r.label == "Other" or r.task_id in drop:
            continue
        if config.mode == "binary":
            r = replace(r, label="positive" if r.label == "PT" else "negative")
        out.append(r)
    return out


def class_names(mode: str) -> tuple:
    return BINARY_CLASSES if mode == "binary" else MULTICLASS_CLASSES


# -- clip store --------------------------------------------------------------


def write_clip_store(path, clips) -> None:
    """One JSON line per clip with its ``(L, 7, 3)`` array flattened row-major."""
    with open(path, "w") as fh:
        for c in clips:
            rec = {
                "clip_id": c.clip_id,
                "video_id": c.video_id,
                "participant_id": c.participant_id,
                "label": c.label,
                "start": c.start,
                "shape": list(c.frames.shape),
                "data": [float(v) for v in np.asarray(c.frames, dtype=np.float64).ravel()],
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_clip_store(path) -> list[Clip]:
    clips = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                frames = np.asarray(rec["data"], dtype=np.float64).reshape(rec["shape"])
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad clip record") from exc
            clips.append(Clip(frames=frames, video_id=rec["video_id"], label=rec["label"],
                              participant_id=rec.get("participant_id", ""),
                              start=rec.get("start", 0)))
    return clips


def write_clip_cache(path, clips) -> None:
    """Flat little-endian float32 array behind a 16-byte header."""
    if not clips:
        raise ValueError("no clips to cache")
    length, nodes, channels = clips[0].frames.shape
    header = struct.pack("<4sIIHH", CLIP_CACHE_MAGIC, CLIP_CACHE_VERSION, length, nodes, channels)
    data = np.stack([c.frames for c in clips]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes(order="C"))


def read_clip_cache(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, version, length, nodes, channels = struct.unpack("<4sIIHH", raw[:16])
    if magic != CLIP_CACHE_MAGIC or version != CLIP_CACHE_VERSION:
        raise ValueError(f"{path}: not a clip cache (magic={magic!r}, version={version})")
    return np.frombuffer(raw[16:], dtype="<f4").reshape(-1, length, nodes, channels)
