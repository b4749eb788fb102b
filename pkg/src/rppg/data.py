"""Dataset plumbing: binary containers, landmark CSVs, RoI extraction,
sliding-window clip generation, PPG alignment, and the manifest index.

Containers (all little-endian):
  .rpgc  magic "RPGC", version u16, M,H,W u32, fps f32, u8 RGB frames row-major
  .rpgs  magic "RPGS", version u16, rate f32, count u32, f32 samples

Landmark CSV: header row, then per frame: frame_index plus x,y,w,h for the
forehead, left cheek and right cheek boxes.

Manifest: TSV with header video_id/subject_id/split/ppg/clips; paths are
relative to the manifest's directory, clip paths ';'-separated.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .imageops import bilinear_resize

CLIP_MAGIC = b"RPGC"
PPG_MAGIC = b"RPGS"
CONTAINER_VERSION = 1

DEFAULT_CLIP_LEN = 128
DEFAULT_STRIDE = 8
DEFAULT_ROI_SIZE = 64

ROI_MODES = ("full", "cheeks", "forehead")


class ContainerError(ValueError):
    """Bad magic, version, or truncated payload."""


class DataError(ValueError):
    """Dataset contents violate a precondition."""


# -- domain types ---------------------------------------------------------


@dataclass
class RoiClip:
    """A fixed-length window of RoI frames, the network input."""

    frames: np.ndarray  # [M, H, W, 3] float32 in [0, 1]
    fps: float
    source_id: str = ""
    start: int = 0

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise DataError(f"clip frames must be [M,H,W,3], got {self.frames.shape}")
        if self.fps <= 0:
            raise DataError("fps must be positive")
        lo, hi = float(self.frames.min(initial=0.0)), float(self.frames.max(initial=0.0))
        if lo < 0.0 or hi > 1.0:
            raise DataError(f"frame values outside [0,1]: [{lo}, {hi}]")


@dataclass
class PpgSegment:
    """Reference waveform resampled onto a clip's frame timestamps."""

    samples: np.ndarray  # [M], z-scored
    rate: float  # original sensor rate

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)


@dataclass
class LandmarkFile:
    """Per-frame axis-aligned boxes: forehead, left cheek, right cheek."""

    boxes: np.ndarray  # [T, 3, 4] int (x, y, w, h)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=int)
        if self.boxes.ndim != 3 or self.boxes.shape[1:] != (3, 4):
            raise DataError(f"landmarks must be [T,3,4], got {self.boxes.shape}")

    def __len__(self):
        return len(self.boxes)


# -- binary containers ----------------------------------------------------


def write_clip(path, frames_u8, fps):
    """Store u8 RGB frames [M,H,W,3]."""
    frames_u8 = np.ascontiguousarray(frames_u8, dtype=np.uint8)
    if frames_u8.ndim != 4 or frames_u8.shape[-1] != 3:
        raise ContainerError(f"frames must be [M,H,W,3] u8, got {frames_u8.shape}")
    m, h, w, _ = frames_u8.shape
    with open(path, "wb") as f:
        f.write(CLIP_MAGIC)
        f.write(struct.pack("<HIIIf", CONTAINER_VERSION, m, h, w, float(fps)))
        f.write(frames_u8.tobytes())


def read_clip_raw(path):
    """Frames as stored (u8) plus fps."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CLIP_MAGIC:
        raise ContainerError(f"bad magic in {path}")
    if len(blob) < 22:
        raise ContainerError(f"truncated header in {path}")
    version, m, h, w, fps = struct.unpack_from("<HIIIf", blob, 4)
    if version != CONTAINER_VERSION:
        raise ContainerError(f"unsupported container version {version} in {path}")
    need = 22 + m * h * w * 3
    if len(blob) < need:
        raise ContainerError(f"truncated payload in {path}")
    frames = np.frombuffer(blob[22:need], dtype=np.uint8).reshape(m, h, w, 3).copy()
    return frames, float(fps)


def read_clip(path, source_id="", start=0) -> RoiClip:
    """Load a clip container; u8 frames become [0,1] float32."""
    frames, fps = read_clip_raw(path)
    return RoiClip(frames=frames.astype(np.float32) / 255.0, fps=fps, source_id=source_id, start=start)


def write_ppg(path, samples, rate):
    samples = np.asarray(samples, dtype="<f4").reshape(-1)
    with open(path, "wb") as f:
        f.write(PPG_MAGIC)
        f.write(struct.pack("<HfI", CONTAINER_VERSION, float(rate), len(samples)))
        f.write(samples.tobytes())


def read_ppg(path):
    """Returns (samples float64, rate)."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != PPG_MAGIC:
        raise ContainerError(f"bad magic in {path}")
    if len(blob) < 14:
        raise ContainerError(f"truncated header in {path}")
    version, rate, count = struct.unpack_from("<HfI", blob, 4)
    if version != CONTAINER_VERSION:
        raise ContainerError(f"unsupported container version {version} in {path}")
    need = 14 + 4 * count
    if len(blob) < need:
        raise ContainerError(f"truncated payload in {path}")
    samples = np.frombuffer(blob[14:need], dtype="<f4").astype(np.float64)
    return samples, float(rate)


LANDMARK_HEADER = (
    "frame_index,fh_x,fh_y,fh_w,fh_h,lc_x,lc_y,lc_w,lc_h,rc_x,rc_y,rc_w,rc_h"
)


def write_landmarks(path, landmarks: LandmarkFile):
    with open(path, "w", encoding="utf-8") as f:
        f.write(LANDMARK_HEADER + "\n")
        for i, row in enumerate(landmarks.boxes):
            f.write(",".join([str(i)] + [str(int(v)) for v in row.reshape(-1)]) + "\n")


def read_landmarks(path) -> LandmarkFile:
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or not lines[0].startswith("frame_index"):
        raise ContainerError(f"missing landmark header in {path}")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 13:
            raise ContainerError(f"malformed landmark row in {path}: {ln!r}")
        rows.append([int(v) for v in parts[1:]])
    if not rows:
        raise ContainerError(f"no landmark rows in {path}")
    return LandmarkFile(boxes=np.asarray(rows, dtype=int).reshape(-1, 3, 4))


# -- RoI extraction -------------------------------------------------------


def _crop_box(frame, box):
    x, y, w, h = (int(v) for v in box)
    fh, fw = frame.shape[:2]
    if w <= 0 or h <= 0:
        raise DataError(f"degenerate RoI box {box}")
    if x < 0 or y < 0 or x + w > fw or y + h > fh:
        raise DataError(f"RoI box {box} outside {fw}x{fh} frame")
    return frame[y : y + h, x : x + w]


def crop_roi(frames, landmarks: LandmarkFile, out_size=DEFAULT_ROI_SIZE, mode="full"):
    """Cut the skin regions out of full frames and pack them into squares.

    mode "full": forehead | left cheek | right cheek resized and
    concatenated left-to-right, then the composite squashed to
    ``out_size`` square. "cheeks" drops the forehead; "forehead" keeps it
    alone. Frames are [T, H, W, 3] floats; output [T, out, out, 3].
    """
    if mode not in ROI_MODES:
        raise DataError(f"unknown RoI mode {mode!r}")
    frames = np.asarray(frames)
    t = frames.shape[0]
    if len(landmarks) < t:
        raise DataError(f"landmarks cover {len(landmarks)} frames < video {t}")
    if mode == "full":
        region_ids = (0, 1, 2)
    elif mode == "cheeks":
        region_ids = (1, 2)
    else:
        region_ids = (0,)
    out = np.empty((t, out_size, out_size, frames.shape[-1]), dtype=np.float32)
    for i in range(t):
        pieces = [
            bilinear_resize(_crop_box(frames[i], landmarks.boxes[i, r]), out_size, out_size)
            for r in region_ids
        ]
        strip = pieces[0] if len(pieces) == 1 else np.concatenate(pieces, axis=1)
        out[i] = bilinear_resize(strip, out_size, out_size)
    return out


def window_clips(roi_frames, fps, length=DEFAULT_CLIP_LEN, stride=DEFAULT_STRIDE, source_id=""):
    """Slide a fixed window over the RoI video: starts 0, stride, 2*stride...

    Yields floor((T - length)/stride) + 1 clips; errors when the video is
    shorter than one window.
    """
    t = roi_frames.shape[0]
    if t < length:
        raise DataError(f"video has {t} frames < window {length}")
    clips = []
    for start in range(0, t - length + 1, stride):
        clips.append(
            RoiClip(frames=roi_frames[start : start + length], fps=fps, source_id=source_id, start=start)
        )
    return clips


def align_ppg(samples, rate, start_frame, num_frames, fps) -> PpgSegment:
    """Reference PPG values at each frame timestamp of a clip window.

    Linear interpolation at t = (start_frame + k)/fps, then z-scored (the
    sensor's units are arbitrary; the regression target needs a fixed
    scale). Errors if the PPG does not cover the window or is constant.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) < 2:
        raise DataError("PPG too short to align")
    t_frames = (start_frame + np.arange(num_frames)) / float(fps)
    t_ppg_end = (len(samples) - 1) / float(rate)
    if t_frames[-1] > t_ppg_end + 1e-9:
        raise DataError(
            f"PPG covers {t_ppg_end:.3f}s but the clip window ends at {t_frames[-1]:.3f}s"
        )
    values = np.interp(t_frames, np.arange(len(samples)) / float(rate), samples)
    sd = float(values.std())
    if sd == 0.0:
        raise DataError("constant PPG segment: z-score undefined")
    return PpgSegment(samples=(values - values.mean()) / sd, rate=rate)


def label_subset(items, fraction, seed):
    """Seeded uniform sample without replacement of round(fraction * N)
    items (round half up); original order preserved."""
    if not (0.0 < fraction <= 1.0):
        raise DataError(f"label fraction must be in (0, 1], got {fraction}")
    n = len(items)
    k = int(np.floor(fraction * n + 0.5))
    if k < 1:
        raise DataError("label subset would be empty")
    if k >= n:
        return list(items)
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    chosen = sorted(rng.choice(n, size=k, replace=False).tolist())
    return [items[i] for i in chosen]


def clip_file_name(video_id, start):
    """Canonical clip file name; the window start rides in the name."""
    return f"{video_id}_s{start:06d}.rpgc"


def clip_start_from_name(path):
    stem = os.path.basename(path)
    if not stem.endswith(".rpgc") or "_s" not in stem:
        raise DataError(f"clip name carries no window start: {path!r}")
    try:
        return int(stem[:-5].rsplit("_s", 1)[1])
    except ValueError as e:
        raise DataError(f"clip name carries no window start: {path!r}") from e


# -- manifest -------------------------------------------------------------


@dataclass
class VideoEntry:
    video_id: str
    subject_id: str
    split: str  # train | test
    ppg_path: str
    clip_paths: list = field(default_factory=list)


MANIFEST_HEADER = "video_id\tsubject_id\tsplit\tppg\tclips"


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as f:
        f.write(MANIFEST_HEADER + "\n")
        for e in entries:
            f.write(f"{e.video_id}\t{e.subject_id}\t{e.split}\t{e.ppg_path}\t{';'.join(e.clip_paths)}\n")


def read_manifest(path):
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines or lines[0] != MANIFEST_HEADER:
        raise ContainerError(f"missing manifest header in {path}")
    entries = []
    for ln in lines[1:]:
        parts = ln.split("\t")
        if len(parts) != 5:
            raise ContainerError(f"malformed manifest row: {ln!r}")
        entries.append(
            VideoEntry(
                video_id=parts[0],
                subject_id=parts[1],
                split=parts[2],
                ppg_path=parts[3],
                clip_paths=[p for p in parts[4].split(";") if p],
            )
        )
    return entries


class Dataset:
    """Manifest-backed view of an ingested dataset.

    Clip tensors are loaded lazily and cached; PPG access goes through
    ``ppg()`` so the self-supervised path can prove it never touches
    labels (it has no reason to call it).
    """

    def __init__(self, manifest_path):
        self.root = os.path.dirname(os.path.abspath(manifest_path))
        self.entries = read_manifest(manifest_path)
        self._clip_cache = {}

    def videos(self, split=None):
        return [e for e in self.entries if split is None or e.split == split]

    def subjects(self, split):
        return {e.subject_id for e in self.videos(split)}

    def clip_refs(self, split):
        """(video_id, clip_path, start_index) sorted for determinism."""
        refs = []
        for e in self.videos(split):
            for p in e.clip_paths:
                refs.append((e.video_id, p))
        refs.sort()
        return refs

    def load_clip(self, rel_path, source_id="") -> RoiClip:
        if rel_path not in self._clip_cache:
            full = os.path.join(self.root, rel_path)
            self._clip_cache[rel_path] = read_clip(
                full, source_id=source_id, start=clip_start_from_name(rel_path)
            )
        return self._clip_cache[rel_path]

    def ppg(self, entry: VideoEntry):
        return read_ppg(os.path.join(self.root, entry.ppg_path))
