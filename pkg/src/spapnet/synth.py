"""Seeded synthetic tremor videos in the keypoint format the ingester reads."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .pose_ingest import N_JOINTS, ManifestRecord, PoseSequence

SYNTH_CLASSES = ("PT", "ET", "FT", "DT", "NoTremor")

# Seated, camera-facing person in a 640x480 frame, COCO-18 order.
BASE_SKELETON = np.array([
    [320.0, 110.0],  # Nose
    [320.0, 160.0],  # Neck
    [275.0, 162.0],  # RShoulder
    [262.0, 225.0],  # RElbow
    [285.0, 280.0],  # RWrist
    [365.0, 162.0],  # LShoulder
    [378.0, 225.0],  # LElbow
    [355.0, 280.0],  # LWrist
    [295.0, 290.0],  # RHip
    [270.0, 330.0],  # RKnee
    [275.0, 420.0],  # RAnkle
    [345.0, 290.0],  # LHip
    [370.0, 330.0],  # LKnee
    [365.0, 420.0],  # LAnkle
    [312.0, 100.0],  # REye
    [328.0, 100.0],  # LEye
    [302.0, 105.0],  # REar
    [338.0, 105.0],  # LEar
])
WRIST = {"right": 4, "left": 7}
ELBOW = {"right": 3, "left": 6}


@dataclass
class SynthParams:
    label: str = "PT"
    tremor_freq_hz: float | None = None  # None: drawn from the class band
    amplitude_px: float = 6.0
    affected_side: str = "right"
    fps: float = 30.0
    duration_frames: int = 200
    noise_std_px: float = 1.0
    seed: int = 0
    clip_len: int = 100
    video_id: str = ""
    participant_id: str = ""

    def validate(self):
        if self.label not in SYNTH_CLASSES:
            raise ValueError(f"unknown synthetic class {self.label!r}")
        if self.affected_side not in WRIST:
            raise ValueError(f"affected_side must be left or right, got {self.affected_side!r}")
        if self.tremor_freq_hz is not None and not 0 < self.tremor_freq_hz < self.fps / 2:
            raise ValueError(f"tremor frequency {self.tremor_freq_hz} Hz breaks Nyquist at "
                             f"{self.fps} fps")
        if self.amplitude_px < 0 or self.noise_std_px < 0:
            raise ValueError("amplitude and noise must be non-negative")
        if self.duration_frames < self.clip_len:
            raise ValueError(f"duration {self.duration_frames} shorter than clip_len "
                             f"{self.clip_len}")


_FREQ_BAND = {"PT": (4.0, 6.0), "ET": (6.0, 9.0), "FT": (4.0, 8.0), "DT": (3.0, 7.0)}


def _oscillation(label, rng, t, freq, fps):
    """Unit-amplitude displacement waveform(s) for the affected limb."""
    phase = rng.uniform(0, 2 * np.pi)
    if label in ("PT", "ET"):
        return np.sin(2 * np.pi * freq * t / fps + phase)
    if label == "FT":
        # bursts of 1-2 s separated by quiet stretches
        on = np.zeros(len(t))
        pos = int(rng.integers(0, int(fps)))
        while pos < len(t):
            burst = int(rng.uniform(1.0, 2.0) * fps)
            on[pos:pos + burst] = 1.0
            pos += burst + int(rng.uniform(1.0, 2.0) * fps)
        return on * np.sin(2 * np.pi * freq * t / fps + phase)
    if label == "DT":
        # phase random walk gives an irregular, jerky oscillation
        jitter = np.cumsum(rng.normal(0.0, 0.35, len(t)))
        return np.sin(2 * np.pi * freq * t / fps + phase + jitter)
    raise ValueError(label)


def generate_video(params: SynthParams) -> tuple[PoseSequence, ManifestRecord]:
    params.validate()
    rng = np.random.default_rng(params.seed)
    n = params.duration_frames
    t = np.arange(n, dtype=np.float64)
    xy = np.broadcast_to(BASE_SKELETON, (n, N_JOINTS, 2)).copy()
    # per-video camera placement; removed by centering
    xy += rng.uniform(-40, 40, size=2)
    label = params.label
    if label != "NoTremor":
        lo, hi = _FREQ_BAND[label]
        freq = params.tremor_freq_hz if params.tremor_freq_hz is not None else rng.uniform(lo, hi)
        sides = ["left", "right"] if label == "ET" else [params.affected_side]
        for side in sides:
            wave = params.amplitude_px * _oscillation(label, rng, t, freq, params.fps)
            # mostly horizontal shaking with a smaller vertical component
            xy[:, WRIST[side], 0] += wave
            xy[:, WRIST[side], 1] += 0.3 * wave
            xy[:, ELBOW[side], 0] += 0.5 * wave
            xy[:, ELBOW[side], 1] += 0.15 * wave
    xy += rng.normal(0.0, params.noise_std_px, size=xy.shape)
    conf = rng.uniform(0.7, 1.0, size=(n, N_JOINTS, 1))
    keypoints = np.concatenate([xy, conf], axis=2)
    video_id = params.video_id or f"synth_{label}_{params.seed}"
    seq = PoseSequence(keypoints=keypoints, frame_index=np.arange(n), video_id=video_id,
                       label=label, participant_id=params.participant_id or video_id)
    record = ManifestRecord(video_id=video_id, participant_id=seq.participant_id,
                            label=label, task_id="rest", path=f"{video_id}.json")
    return seq, record


def generate_dataset(classes=("PT", "NoTremor"), videos_per_class=20, seed=0,
                     duration_frames=200, workers=1, **overrides):
    """Sequences and manifest rows for ``videos_per_class`` videos of each class.

    Every video gets its own seed drawn from ``seed``; affected sides
    alternate right/left.
    """
    master = np.random.default_rng(seed)
    params = []
    for label in classes:
        for i in range(videos_per_class):
            vseed = int(master.integers(0, 2**31 - 1))
            params.append(SynthParams(label=label, seed=vseed, duration_frames=duration_frames,
                                      affected_side="right" if i % 2 == 0 else "left",
                                      video_id=f"{label}_{i:03d}", **overrides))
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(workers) as pool:
            out = list(pool.map(generate_video, params))
    else:
        out = [generate_video(p) for p in params]
    return [s for s, _ in out], [r for _, r in out]
