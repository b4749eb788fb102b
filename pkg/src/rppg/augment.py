"""The six clip transformations that manufacture positive pairs.

Three spatial kinds apply one sampled transform to every frame (rotation
by a shared angle, a shared crop window resized back, a left-right flip);
three temporal kinds permute whole frames without touching pixels
(shuffle, a cut-and-swap reorder, full reversal). Parameters are drawn
once per call from a seedable generator, so equal seeds reproduce equal
outputs exactly.
"""

from __future__ import annotations

import enum

import numpy as np

from .imageops import bilinear_resize, rotate_frames


class AugKind(enum.Enum):
    ROTATION = "rot"
    CROP = "crop"
    FLIP = "flip"
    SHUFFLE = "shuffle"
    REORDER = "reorder"
    REVERSE = "reverse"

    @classmethod
    def from_cli(cls, name):
        for kind in cls:
            if kind.value == name:
                return kind
        raise ValueError(f"unknown augmentation: {name!r} (use {'|'.join(k.value for k in cls)})")


SPATIAL_KINDS = (AugKind.ROTATION, AugKind.CROP, AugKind.FLIP)
TEMPORAL_KINDS = (AugKind.SHUFFLE, AugKind.REORDER, AugKind.REVERSE)

CROP_SCALE_RANGE = (0.25, 0.75)


def make_rng(seed) -> np.random.Generator:
    """Deterministic generator; accepts ints or tuples of ints."""
    return np.random.default_rng(np.random.SeedSequence(seed))


def derive_clip_rng(run_seed, *indices) -> np.random.Generator:
    """Per-clip generator so parallel callers stay reproducible."""
    return make_rng((int(run_seed),) + tuple(int(i) for i in indices))


def _check_frames(frames, kind):
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValueError(f"expected [M,H,W,3] frames, got {frames.shape}")
    m, h, w = frames.shape[:3]
    if m < 2 and kind in TEMPORAL_KINDS:
        raise ValueError(f"{kind.value} needs at least 2 frames")
    if min(h, w) < 8:
        raise ValueError(f"frames too small to augment: {h}x{w}")


def _crop(frames, rng):
    m, h, w = frames.shape[:3]
    scale = rng.uniform(*CROP_SCALE_RANGE)
    cw, ch = int(round(scale * w)), int(round(scale * h))
    cw, ch = max(cw, 1), max(ch, 1)
    i = int(rng.integers(0, w - cw + 1))
    j = int(rng.integers(0, h - ch + 1))
    out = np.empty_like(frames)
    for k in range(m):
        out[k] = bilinear_resize(frames[k, j : j + ch, i : i + cw], h, w)
    return out


def _reorder(frames, rng):
    m = frames.shape[0]
    r = int(rng.integers(2, m + 1))  # cut before 1-indexed frame r
    return np.concatenate([frames[r - 1 :], frames[: r - 1]], axis=0)


def augment(frames, kind: AugKind, rng: np.random.Generator):
    """One transformed copy of ``frames [M,H,W,3]``; same shape out."""
    _check_frames(frames, kind)
    if kind is AugKind.ROTATION:
        theta = int(rng.integers(1, 361))
        return rotate_frames(frames, theta)
    if kind is AugKind.CROP:
        return _crop(frames, rng)
    if kind is AugKind.FLIP:
        return frames[:, :, ::-1, :].copy()
    if kind is AugKind.SHUFFLE:
        perm = rng.permutation(frames.shape[0])
        return frames[perm].copy()
    if kind is AugKind.REORDER:
        return _reorder(frames, rng)
    if kind is AugKind.REVERSE:
        return frames[::-1].copy()
    raise ValueError(f"unhandled augmentation kind: {kind}")


def make_positive_pair(frames, kind: AugKind, rng: np.random.Generator):
    """(clip, augmented clip) — the pair whose similarity training pulls
    together; every cross-clip combination in a batch acts as a negative."""
    return frames, augment(frames, kind, rng)
