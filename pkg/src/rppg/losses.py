"""Training objectives: contrastive stage-1 losses and the stage-2
deep-supervision regression loss.

All losses are built from tensor-core primitives, so gradients come from
the same reverse-mode machinery the finite-difference suite verifies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, absolute, log, sqrt


class ZeroNormError(ValueError):
    """Cosine similarity of a zero-length vector is undefined."""


def _wrap(x, dtype=None):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def cosine_similarity(a, b) -> Tensor:
    """a.b / (|a| |b|) for vectors; errors on zero norms."""
    a, b = _wrap(a), _wrap(b)
    if float(np.linalg.norm(a.data)) == 0.0 or float(np.linalg.norm(b.data)) == 0.0:
        raise ZeroNormError("cosine similarity of a zero vector")
    dot = (a * b).sum()
    return dot / (sqrt((a * a).sum()) * sqrt((b * b).sum()))


@dataclass
class ContrastiveBatch:
    """2N projections with a positive-pairing map and a temperature.

    ``positives[m]`` is the index of m's positive partner; the map must be
    a perfect matching (an involution without fixed points).
    """

    projections: Tensor  # [2N, D]
    positives: np.ndarray  # [2N] int
    tau: float = 0.1

    def __post_init__(self):
        self.positives = np.asarray(self.positives, dtype=int)
        n2 = self.projections.shape[0]
        if self.tau <= 0:
            raise ValueError("temperature must be positive")
        if self.positives.shape != (n2,):
            raise ValueError("pairing map length must match batch")
        if np.any(self.positives == np.arange(n2)) or np.any(self.positives[self.positives] != np.arange(n2)):
            raise ValueError("each sample needs exactly one positive partner")


def ntxent_loss(batch: ContrastiveBatch) -> Tensor:
    """Normalized-temperature cross entropy over all 2N anchors.

    Per anchor m: -log( exp(s(m, pos)/tau) / sum_{k != m} exp(s(m,k)/tau) ),
    with s = cosine similarity; reduced by the mean. Nonnegative because
    the positive term also appears in its denominator.
    """
    z = batch.projections
    n2 = z.shape[0]
    if n2 < 4:
        raise ValueError("need at least 2 pairs (2N >= 4)")
    norms_sq = (z * z).sum(axis=1, keepdims=True)
    if np.any(norms_sq.data <= 0):
        raise ZeroNormError("zero-norm projection in contrastive batch")
    zn = z / sqrt(norms_sq)
    sims = zn @ zn.t()  # [2N, 2N] cosine similarities

    dtype = z.data.dtype
    off_diag = (1.0 - np.eye(n2)).astype(dtype)
    pos_mask = np.zeros((n2, n2), dtype)
    pos_mask[np.arange(n2), batch.positives] = 1.0

    scaled = sims * (1.0 / batch.tau)
    denom = (scaled.exp() * Tensor(off_diag)).sum(axis=1)
    pos_term = (scaled * Tensor(pos_mask)).sum(axis=1)
    return (log(denom) - pos_term).mean()


def _normalized(v):
    flat = v if v.ndim == 2 else v.reshape(1, -1)
    norms_sq = (flat * flat).sum(axis=1, keepdims=True)
    if np.any(norms_sq.data <= 0):
        raise ZeroNormError("zero-norm vector in similarity")
    return flat / sqrt(norms_sq)


def negative_cosine(p, z) -> Tensor:
    """-cos(p, stopgrad(z)), averaged over rows; z never receives gradient."""
    p, z = _wrap(p), _wrap(z)
    pn = _normalized(p)
    zn = _normalized(z.detach())
    return -(pn * zn).sum(axis=1).mean()


def simsiam_loss(p_m, z_m, p_n, z_n) -> Tensor:
    """Symmetrized negative cosine: each view's prediction chases the other
    view's projection, which is held constant by the stop-gradient."""
    return 0.5 * negative_cosine(p_m, z_n) + 0.5 * negative_cosine(p_n, z_m)


def smooth_l1(pred, target, beta) -> Tensor:
    """Mean piecewise loss: quadratic d^2/(2 beta) below |d| = beta, linear
    |d| - beta/2 above; value and slope agree at the joint."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    pred = _wrap(pred)
    target = _wrap(target, dtype=pred.data.dtype)
    if pred.shape != target.shape:
        raise ValueError(f"signal length mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    a = absolute(d)
    inside = (a.data < beta).astype(pred.data.dtype)
    quad = (d * d) * (0.5 / beta)
    lin = a - 0.5 * beta
    return (quad * Tensor(inside) + lin * Tensor(1.0 - inside)).mean()


@dataclass
class Stage2Config:
    """Fine-tuning loss shape: smooth-L1 threshold, auxiliary weight, taps."""

    beta: float = 1.0
    alpha: float = 0.5
    taps: tuple = field(default=(5, 6, 7))

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")


def stage2_loss(outputs, target, cfg: Stage2Config) -> Tensor:
    """Main-output loss plus alpha-weighted tap losses, all against the
    same target waveform."""
    total = smooth_l1(outputs.p_out, target, cfg.beta)
    if cfg.alpha == 0:
        return total
    for idx in cfg.taps:
        if idx not in outputs.taps:
            raise ValueError(f"missing tap {idx} in outputs")
        total = total + cfg.alpha * smooth_l1(outputs.taps[idx], target, cfg.beta)
    return total
