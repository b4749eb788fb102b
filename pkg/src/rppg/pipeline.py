"""Two-stage training and evaluation orchestration.

Stage 1 pulls positive pairs (a clip and its augmented copy) together and
all cross-clip combinations apart; it reads video clips only, never the
reference PPG. Stage 2 drops the projection head and augmentations,
attaches per-step waveform readouts, and regresses the aligned reference
waveform with the deep-supervision smooth-L1 objective. Evaluation
averages per-clip HR estimates within each test video and scores the
per-video pairs.

Runs are reproducible: one seed fixes parameter init, epoch shuffles,
augmentation draws, and therefore checkpoints, byte for byte in
single-threaded mode.
"""

from __future__ import annotations

import hashlib
import json
import os
import subprocess
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .augment import AugKind, augment, derive_clip_rng, make_rng
from .data import Dataset, DataError, align_ppg, label_subset
from .losses import ContrastiveBatch, Stage2Config, ntxent_loss, simsiam_loss, smooth_l1, stage2_loss
from .models import (
    RppgOutputs,
    build_encoder,
    build_projection_head,
    build_tap_readouts,
    encoder_forward,
    estimate_rppg,
    project,
    predict,
)
from .params import AdamState, ParamSet, adam_step, load_checkpoint, read_sidecar, save_checkpoint, write_sidecar
from .spectrum import EvalReport, RppgSignal, compute_metrics, estimate_hr
from .tensor import NonFiniteError, Tensor, no_grad

METHODS = ("simclr", "simsiam", "supervised")


class ConfigError(ValueError):
    pass


class SplitError(ValueError):
    """Train and test share subjects."""


@dataclass
class RunConfig:
    """Everything a run needs; field names double as config-file keys."""

    encoder: str = "3d"  # 3d | 2plus1d
    method: str = "simclr"  # simclr | simsiam | supervised
    aug: str = "flip"  # crop|rot|flip|shuffle|reorder|reverse
    frames: int = 128
    size: int = 64
    s1_epochs: int = 50
    s1_batch: int = 16
    s1_lr: float = 1e-4
    s2_epochs: int = 10
    s2_batch: int = 8
    s2_lr: float = 2e-4
    beta: float = 1.0  # smooth-L1 threshold (1.0 and 0.3 are the presets)
    alpha: float = 0.5
    tau: float = 0.1
    label_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.encoder not in ("3d", "2plus1d"):
            raise ConfigError(f"unknown encoder {self.encoder!r}")
        AugKind.from_cli(self.aug)
        for name in ("frames", "size", "s1_epochs", "s1_batch", "s1_lr", "s2_epochs", "s2_batch", "s2_lr", "beta", "tau"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if not (0.0 < self.label_fraction <= 1.0):
            raise ConfigError("label_fraction must be in (0, 1]")

    def to_text(self):
        lines = []
        for f in fields(self):
            lines.append(f"{f.name}={getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    def config_hash(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_items(cls, items: dict):
        kwargs = {}
        by_name = {f.name: f for f in fields(cls)}
        for key, raw in items.items():
            if key not in by_name:
                raise ConfigError(f"unknown config key {key!r}")
            typ = by_name[key].type
            if typ == "int":
                kwargs[key] = int(raw)
            elif typ == "float":
                kwargs[key] = float(raw)
            else:
                kwargs[key] = str(raw)
        return cls(**kwargs)


def paper_preset(**overrides) -> RunConfig:
    """Input geometry and schedule exactly as published: 128-frame 64x64
    clips, 50 pre-training epochs at batch 16 / lr 1e-4, 10 fine-tuning
    epochs at batch 8 / lr 2e-4."""
    return replace(RunConfig(), **overrides)


def desk_preset(**overrides) -> RunConfig:
    """CPU-sized runs: 64-frame 32x32 clips, 5 pre-training epochs at
    batch 8, and a longer but still small fine-tuning schedule (the desk
    regressor needs the extra steps; see README)."""
    base = RunConfig(
        frames=64,
        size=32,
        s1_epochs=5,
        s1_batch=8,
        s1_lr=1e-4,
        s2_epochs=15,
        s2_batch=8,
        s2_lr=1e-3,
    )
    return replace(base, **overrides)


def read_config_file(path) -> dict:
    items = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, eq, value = line.partition("=")
            if not eq:
                raise ConfigError(f"malformed config line: {line!r}")
            items[key.strip()] = value.strip()
    return items


@dataclass
class TrainLog:
    seed: int
    config_hash: str
    stage: str
    epochs: list = field(default_factory=list)  # {"epoch", "loss", "seconds"}

    def record(self, epoch, loss, seconds):
        self.epochs.append({"epoch": epoch, "loss": float(loss), "seconds": float(seconds)})

    def to_json(self):
        return json.dumps(
            {"stage": self.stage, "seed": self.seed, "config_hash": self.config_hash, "epochs": self.epochs},
            indent=2,
            sort_keys=True,
        )


def git_describe():
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=10,
            check=False,
        )
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def write_run_info(out_dir, cfg: RunConfig):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "run_info.txt"), "w", encoding="utf-8") as f:
        f.write(cfg.to_text())
        f.write(f"config_hash={cfg.config_hash()}\n")
        f.write(f"git={git_describe()}\n")


def _load_split_clips(cfg, dataset: Dataset, split):
    refs = dataset.clip_refs(split)
    clips = []
    for vid, rel in refs:
        clip = dataset.load_clip(rel, source_id=vid)
        if clip.frames.shape != (cfg.frames, cfg.size, cfg.size, 3):
            raise DataError(
                f"clip {rel} has shape {clip.frames.shape}, run expects "
                f"({cfg.frames}, {cfg.size}, {cfg.size}, 3)"
            )
        clips.append(clip)
    return refs, clips


def _sidecar_meta(cfg, stage):
    return {"encoder": cfg.encoder, "method": cfg.method, "frames": cfg.frames, "size": cfg.size, "stage": stage}


def _save(out_dir, name, params, cfg, stage):
    path = os.path.join(out_dir, name)
    save_checkpoint(path, params)
    write_sidecar(path + ".meta", _sidecar_meta(cfg, stage))
    return path


def pretrain(cfg: RunConfig, dataset: Dataset, out_dir):
    """Contrastive stage: returns (params, TrainLog), writing per-epoch
    and final checkpoints. Never reads PPG files."""
    if cfg.method == "supervised":
        raise ConfigError("supervised runs have no pre-training stage")
    os.makedirs(out_dir, exist_ok=True)
    write_run_info(out_dir, cfg)
    _, clips = _load_split_clips(cfg, dataset, "train")
    if len(clips) < 2 * cfg.s1_batch:
        raise DataError(f"need at least {2 * cfg.s1_batch} clips to pre-train, have {len(clips)}")

    rng = make_rng((cfg.seed, 1))
    params = build_encoder(cfg.encoder, rng)
    params.merge(build_projection_head(cfg.method, rng))
    # the output readout rides along in checkpoints but the contrastive
    # loss attaches at h, so it sees no gradient until stage 2
    params.set_trainable("out.weight", False)
    params.set_trainable("out.bias", False)
    adam = AdamState(lr=cfg.s1_lr)
    kind = AugKind.from_cli(cfg.aug)
    log = TrainLog(seed=cfg.seed, config_hash=cfg.config_hash(), stage="pretrain")

    best_loss, best_epoch = float("inf"), -1
    for epoch in range(cfg.s1_epochs):
        t0 = time.time()
        order = make_rng((cfg.seed, 2, epoch)).permutation(len(clips))
        losses = []
        for bstart in range(0, len(order), cfg.s1_batch):
            batch_idx = order[bstart : bstart + cfg.s1_batch]
            if len(batch_idx) < 2:
                continue  # a single clip has no negatives
            n = len(batch_idx)
            views = np.empty((2 * n, cfg.frames, cfg.size, cfg.size, 3), dtype=np.float32)
            for row, ci in enumerate(batch_idx):
                clip_rng = derive_clip_rng(cfg.seed, epoch, int(ci))
                views[row] = clips[ci].frames
                views[n + row] = augment(clips[ci].frames, kind, clip_rng)
            out = encoder_forward(params, Tensor(views), cfg.encoder, training=True)
            z = project(out.h, params, cfg.method)
            if cfg.method == "simclr":
                positives = np.concatenate([np.arange(n) + n, np.arange(n)])
                loss = ntxent_loss(ContrastiveBatch(z, positives, tau=cfg.tau))
            else:
                loss = _simsiam_batch_loss(predict(z, params), z, n)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError(f"stage-1 loss diverged at epoch {epoch} (loss={value})")
            loss.backward()
            adam_step(params, adam)
            params.zero_grad()
            losses.append(value)
        mean_loss = float(np.mean(losses))
        log.record(epoch, mean_loss, time.time() - t0)
        _save(out_dir, f"stage1_epoch{epoch:03d}.rpgw", params, cfg, "pretrain")
        if mean_loss < best_loss:
            best_loss, best_epoch = mean_loss, epoch
    final = _save(out_dir, "stage1_final.rpgw", params, cfg, "pretrain")
    best = os.path.join(out_dir, "stage1_best.rpgw")
    with open(os.path.join(out_dir, f"stage1_epoch{best_epoch:03d}.rpgw"), "rb") as src:
        with open(best, "wb") as dst:
            dst.write(src.read())
    write_sidecar(best + ".meta", _sidecar_meta(cfg, "pretrain"))
    with open(os.path.join(out_dir, "stage1_trainlog.json"), "w", encoding="utf-8") as f:
        f.write(log.to_json())
    return params, log, final


def _simsiam_batch_loss(p, z, n):
    """Symmetrized predictor-vs-projection loss over the n positive pairs.

    Rows 0..n-1 hold the clips, rows n..2n-1 their augmented views."""
    first = np.arange(n)
    second = np.arange(n, 2 * n)
    return simsiam_loss(_rows(p, first), _rows(z, first), _rows(p, second), _rows(z, second))


def _rows(t, idx):
    """Row selection as a constant-matrix product (keeps gradients exact)."""
    sel = np.zeros((len(idx), t.shape[0]), dtype=t.data.dtype)
    sel[np.arange(len(idx)), idx] = 1.0
    return Tensor(sel) @ t


def _labeled_items(cfg, dataset: Dataset):
    """(clip, z-scored target) pairs for the train split at the configured
    label fraction."""
    refs, clips = _load_split_clips(cfg, dataset, "train")
    ppg_by_video = {}
    for entry in dataset.videos("train"):
        ppg_by_video[entry.video_id] = dataset.ppg(entry)
    items = []
    for (vid, _rel), clip in zip(refs, clips):
        samples, rate = ppg_by_video[vid]
        target = align_ppg(samples, rate, clip.start, cfg.frames, clip.fps)
        items.append((clip, target.samples.astype(np.float32)))
    if cfg.label_fraction < 1.0:
        items = label_subset(items, cfg.label_fraction, cfg.seed)
    return items


def finetune(cfg: RunConfig, dataset: Dataset, out_dir, init=None):
    """Waveform-regression stage from a checkpoint or from random init
    (the supervised baseline). Returns (params, TrainLog)."""
    os.makedirs(out_dir, exist_ok=True)
    write_run_info(out_dir, cfg)
    items = _labeled_items(cfg, dataset)
    if not items:
        raise DataError("no labeled clips for fine-tuning")

    rng = make_rng((cfg.seed, 3))
    if init is None:
        params = build_encoder(cfg.encoder, rng)
    else:
        if isinstance(init, (str, os.PathLike)):
            meta = read_sidecar(str(init) + ".meta") if os.path.exists(str(init) + ".meta") else {}
            if meta.get("encoder", cfg.encoder) != cfg.encoder:
                raise ConfigError(
                    f"checkpoint encoder {meta.get('encoder')!r} does not match run encoder {cfg.encoder!r}"
                )
            params = load_checkpoint(init)
        else:
            params = init
        # stage 2 discards the projection/prediction heads
        params = params.without_prefix("proj.", "pred.")
    params.merge(build_tap_readouts(rng))

    adam = AdamState(lr=cfg.s2_lr)
    loss_cfg = Stage2Config(beta=cfg.beta, alpha=cfg.alpha)
    log = TrainLog(seed=cfg.seed, config_hash=cfg.config_hash(), stage="finetune")

    best_loss, best_epoch = float("inf"), -1
    for epoch in range(cfg.s2_epochs):
        t0 = time.time()
        order = make_rng((cfg.seed, 4, epoch)).permutation(len(items))
        losses = []
        for bstart in range(0, len(order), cfg.s2_batch):
            batch_idx = order[bstart : bstart + cfg.s2_batch]
            batch = np.stack([items[i][0].frames for i in batch_idx])
            targets = np.stack([items[i][1] for i in batch_idx])
            outputs = estimate_rppg(Tensor(batch), params, cfg.encoder, training=True)
            loss = stage2_loss(outputs, Tensor(targets), loss_cfg)
            value = loss.item()
            if not np.isfinite(value):
                raise NonFiniteError(f"stage-2 loss diverged at epoch {epoch} (loss={value})")
            loss.backward()
            adam_step(params, adam)
            params.zero_grad()
            losses.append(value)
        mean_loss = float(np.mean(losses))
        log.record(epoch, mean_loss, time.time() - t0)
        _save(out_dir, f"stage2_epoch{epoch:03d}.rpgw", params, cfg, "finetune")
        if mean_loss < best_loss:
            best_loss, best_epoch = mean_loss, epoch
    final = _save(out_dir, "stage2_final.rpgw", params, cfg, "finetune")
    best = os.path.join(out_dir, "stage2_best.rpgw")
    with open(os.path.join(out_dir, f"stage2_epoch{best_epoch:03d}.rpgw"), "rb") as src:
        with open(best, "wb") as dst:
            dst.write(src.read())
    write_sidecar(best + ".meta", _sidecar_meta(cfg, "finetune"))
    with open(os.path.join(out_dir, "stage2_trainlog.json"), "w", encoding="utf-8") as f:
        f.write(log.to_json())
    return params, log, final


def reference_video_hr(dataset: Dataset, entry) -> float:
    """Ground-truth HR: the same spectral estimator applied to the whole
    reference PPG resampled at the video frame rate."""
    samples, rate = dataset.ppg(entry)
    fps = None
    for rel in entry.clip_paths[:1]:
        fps = dataset.load_clip(rel, source_id=entry.video_id).fps
    if fps is None:
        raise DataError(f"video {entry.video_id} has no clips")
    duration = (len(samples) - 1) / rate
    n = int(np.floor(duration * fps)) + 1
    t = np.arange(n) / fps
    resampled = np.interp(t, np.arange(len(samples)) / rate, samples)
    return estimate_hr(RppgSignal(resampled, fps)).bpm


def evaluate(cfg: RunConfig, dataset: Dataset, params: ParamSet) -> EvalReport:
    """Per-video HR agreement on the test split.

    Requires subject-disjoint train/test splits; per-clip HR estimates are
    averaged within each video before scoring.
    """
    shared = dataset.subjects("train") & dataset.subjects("test")
    if shared:
        raise SplitError(f"subjects in both splits: {sorted(shared)}")
    test_videos = dataset.videos("test")
    if not test_videos:
        raise DataError("empty test split")

    pairs = []
    for entry in sorted(test_videos, key=lambda e: e.video_id):
        clip_hrs = []
        rels = sorted(entry.clip_paths)
        for bstart in range(0, len(rels), cfg.s2_batch):
            chunk = rels[bstart : bstart + cfg.s2_batch]
            batch = np.stack(
                [dataset.load_clip(rel, source_id=entry.video_id).frames for rel in chunk]
            )
            fps = dataset.load_clip(chunk[0], source_id=entry.video_id).fps
            with no_grad():
                outputs = estimate_rppg(Tensor(batch), params, cfg.encoder, training=False)
            for row in outputs.p_out.data:
                clip_hrs.append(estimate_hr(RppgSignal(row, fps)).bpm)
        hr_pred = float(np.mean(clip_hrs))
        hr_gt = reference_video_hr(dataset, entry)
        pairs.append((hr_pred, hr_gt))
    return compute_metrics(pairs, meta={"videos": len(pairs), "config_hash": cfg.config_hash()})
