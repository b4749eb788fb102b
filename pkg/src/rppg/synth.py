"""Synthetic pulsatile videos with known ground truth.

Each video is a flat-colored canvas holding three skin patches (forehead
and two cheeks) whose brightness oscillates at the configured heart rate,
strongest in the green channel, plus per-pixel Gaussian noise and an
optional slow whole-face translation that the landmark boxes track. The
emitted reference PPG is the clean sinusoid, so the RoI-mean trace and
the reference agree by construction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .data import (
    LandmarkFile,
    VideoEntry,
    clip_file_name,
    crop_roi,
    read_clip_raw,
    read_landmarks,
    window_clips,
    write_clip,
    write_landmarks,
    write_manifest,
    write_ppg,
)

CANVAS = 72
# (x, y, w, h) on the canvas, before translation
_FOREHEAD = (18, 8, 36, 16)
_LEFT_CHEEK = (12, 36, 20, 16)
_RIGHT_CHEEK = (40, 36, 20, 16)

BACKGROUND = (0.12, 0.13, 0.16)
# blood-volume changes absorb green most strongly
PULSE_WEIGHTS = (0.6, 1.0, 0.6)


@dataclass
class SynthSpec:
    """Knobs of one synthetic video; solvable while the pulse amplitude
    clears the noise floor."""

    hr_bpm: float
    fps: float = 20.0
    frames: int = 96
    base_color: tuple = (0.72, 0.55, 0.45)
    amplitude: float = 0.06
    noise_sigma: float = 0.01
    motion_amplitude: float = 0.0
    seed: int = 0
    ppg_rate: float = 64.0

    def __post_init__(self):
        if not (42.0 <= self.hr_bpm <= 240.0):
            raise ValueError(f"hr_bpm {self.hr_bpm} outside [42, 240]")
        if self.fps <= 0 or self.frames < 2:
            raise ValueError("need a positive frame rate and at least 2 frames")


def synth_video(spec: SynthSpec):
    """Returns (frames u8 [T, CANVAS, CANVAS, 3], LandmarkFile, (ppg, rate))."""
    rng = np.random.default_rng(np.random.SeedSequence(int(spec.seed)))
    t = np.arange(spec.frames) / spec.fps
    pulse = np.sin(2.0 * np.pi * (spec.hr_bpm / 60.0) * t)

    max_shift = int(round(spec.motion_amplitude))
    if max_shift > 0:
        dx = np.rint(spec.motion_amplitude * np.sin(2.0 * np.pi * 0.15 * t)).astype(int)
        dy = np.rint(spec.motion_amplitude * np.sin(2.0 * np.pi * 0.11 * t + 1.0)).astype(int)
    else:
        dx = dy = np.zeros(spec.frames, dtype=int)

    base = np.asarray(spec.base_color, dtype=np.float64)
    weights = np.asarray(PULSE_WEIGHTS, dtype=np.float64)
    frames = np.empty((spec.frames, CANVAS, CANVAS, 3), dtype=np.uint8)
    boxes = np.empty((spec.frames, 3, 4), dtype=int)

    for k in range(spec.frames):
        canvas = np.empty((CANVAS, CANVAS, 3), dtype=np.float64)
        canvas[:] = BACKGROUND
        skin = base + spec.amplitude * pulse[k] * weights
        for r, (x, y, w, h) in enumerate((_FOREHEAD, _LEFT_CHEEK, _RIGHT_CHEEK)):
            xs = int(np.clip(x + dx[k], 0, CANVAS - w))
            ys = int(np.clip(y + dy[k], 0, CANVAS - h))
            canvas[ys : ys + h, xs : xs + w] = skin
            boxes[k, r] = (xs, ys, w, h)
        if spec.noise_sigma > 0:
            canvas += rng.normal(0.0, spec.noise_sigma, canvas.shape)
        frames[k] = np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)

    n_ppg = int(np.ceil((spec.frames - 1) / spec.fps * spec.ppg_rate)) + 1
    tp = np.arange(n_ppg) / spec.ppg_rate
    ppg = np.sin(2.0 * np.pi * (spec.hr_bpm / 60.0) * tp)
    return frames, LandmarkFile(boxes=boxes), (ppg, spec.ppg_rate)


RAW_INDEX = "videos.tsv"
RAW_INDEX_HEADER = "video_id\tsubject_id\tsplit\thr_bpm\tframes_file\tlandmarks_file\tppg_file"


def generate_raw_dataset(
    out_dir,
    n_train,
    n_test,
    seed,
    hr_range=(50.0, 110.0),
    frames=96,
    fps=20.0,
    amplitude=0.06,
    noise_sigma=0.01,
    motion_amplitude=0.0,
):
    """Write raw synthetic videos plus a split index.

    One subject per video, distinct across splits, so any train/test
    subject-disjointness check holds trivially.
    """
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    rows = []
    for i in range(n_train + n_test):
        split = "train" if i < n_train else "test"
        vid = f"v{i:04d}"
        hr = float(rng.uniform(*hr_range))
        spec = SynthSpec(
            hr_bpm=hr,
            fps=fps,
            frames=frames,
            amplitude=amplitude,
            noise_sigma=noise_sigma,
            motion_amplitude=motion_amplitude,
            seed=int(rng.integers(0, 2**31 - 1)),
        )
        video, landmarks, (ppg, rate) = synth_video(spec)
        write_clip(os.path.join(out_dir, f"{vid}_frames.rpgc"), video, fps)
        write_landmarks(os.path.join(out_dir, f"{vid}_landmarks.csv"), landmarks)
        write_ppg(os.path.join(out_dir, f"{vid}_ppg.rpgs"), ppg, rate)
        rows.append((vid, f"s{i:04d}", split, hr, f"{vid}_frames.rpgc", f"{vid}_landmarks.csv", f"{vid}_ppg.rpgs"))
    with open(os.path.join(out_dir, RAW_INDEX), "w", encoding="utf-8") as f:
        f.write(RAW_INDEX_HEADER + "\n")
        for row in rows:
            f.write("\t".join(str(v) for v in row) + "\n")
    return rows


def read_raw_index(raw_dir):
    path = os.path.join(raw_dir, RAW_INDEX)
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or lines[0] != RAW_INDEX_HEADER:
        raise ValueError(f"missing raw index header in {path}")
    rows = []
    for ln in lines[1:]:
        vid, subj, split, hr, frames_f, lm_f, ppg_f = ln.split("\t")
        rows.append((vid, subj, split, float(hr), frames_f, lm_f, ppg_f))
    return rows


def ingest_dataset(raw_dir, out_dir, clip_len, stride, roi_size, roi_mode="full"):
    """Crop RoIs, window into clips, and write the manifest.

    Output clip order is sorted by (video id, window start) regardless of
    processing order.
    """
    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for vid, subj, split, _hr, frames_f, lm_f, ppg_f in read_raw_index(raw_dir):
        frames_u8, fps = read_clip_raw(os.path.join(raw_dir, frames_f))
        landmarks = read_landmarks(os.path.join(raw_dir, lm_f))
        roi = crop_roi(frames_u8.astype(np.float32) / 255.0, landmarks, out_size=roi_size, mode=roi_mode)
        clips = window_clips(roi, fps, length=clip_len, stride=stride, source_id=vid)
        clip_names = []
        for clip in sorted(clips, key=lambda c: c.start):
            name = clip_file_name(vid, clip.start)
            write_clip(
                os.path.join(out_dir, name),
                np.clip(np.rint(clip.frames * 255.0), 0, 255).astype(np.uint8),
                fps,
            )
            clip_names.append(name)
        ppg_name = f"{vid}_ppg.rpgs"
        # reference PPG is copied verbatim into the ingested tree
        with open(os.path.join(raw_dir, ppg_f), "rb") as src:
            with open(os.path.join(out_dir, ppg_name), "wb") as dst:
                dst.write(src.read())
        entries.append(VideoEntry(vid, subj, split, ppg_name, clip_names))
    entries.sort(key=lambda e: e.video_id)
    manifest = os.path.join(out_dir, "manifest.tsv")
    write_manifest(manifest, entries)
    return manifest
