"""Bilinear resampling primitives shared by the augmentations and the
region-of-interest cropper. Pure numpy, deterministic."""

from __future__ import annotations

import numpy as np


def bilinear_resize(image, out_h, out_w):
    """Resize ``[H, W, C]`` with bilinear interpolation.

    Corner-aligned mapping: source = dest * (S-1)/(D-1), so resizing to the
    same size is exactly the identity.
    """
    h, w = image.shape[:2]
    if out_h <= 0 or out_w <= 0:
        raise ValueError("target size must be positive")
    if h == out_h and w == out_w:
        return image.copy()
    ys = np.linspace(0.0, h - 1.0, out_h) if out_h > 1 else np.zeros(1)
    xs = np.linspace(0.0, w - 1.0, out_w) if out_w > 1 else np.zeros(1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - fx) + image[y0][:, x1] * fx
    bot = image[y1][:, x0] * (1 - fx) + image[y1][:, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(image.dtype, copy=False)


def rotate_frames(frames, degrees):
    """Rotate every ``[H, W, C]`` frame of ``[M, H, W, C]`` by the same
    angle about the frame center (counter-clockwise, degrees).

    Right angles are exact index permutations; other angles use bilinear
    sampling with exposed regions filled with 0.
    """
    deg = degrees % 360
    if deg == 0:
        return frames.copy()
    if deg == 90:
        return np.rot90(frames, k=1, axes=(1, 2)).copy()
    if deg == 180:
        return np.rot90(frames, k=2, axes=(1, 2)).copy()
    if deg == 270:
        return np.rot90(frames, k=3, axes=(1, 2)).copy()

    m, h, w = frames.shape[:3]
    theta = np.deg2rad(deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # inverse map: rotate output coordinates back into the source frame
    src_y = cos_t * yy + sin_t * xx + cy
    src_x = -sin_t * yy + cos_t * xx + cx

    y0 = np.floor(src_y).astype(int)
    x0 = np.floor(src_x).astype(int)
    fy = (src_y - y0)[..., None]
    fx = (src_x - x0)[..., None]
    valid = (src_y >= 0) & (src_y <= h - 1) & (src_x >= 0) & (src_x <= w - 1)

    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)

    out = np.zeros_like(frames)
    for i in range(m):
        f = frames[i]
        top = f[y0c, x0c] * (1 - fx) + f[y0c, x1c] * fx
        bot = f[y1c, x0c] * (1 - fx) + f[y1c, x1c] * fx
        out[i] = np.where(valid[..., None], top * (1 - fy) + bot * fy, 0)
    return out
