"""Video encoders, projection/prediction heads, and the waveform readout.

Two encoder variants share one layout: a spatial-only first conv, three
conv blocks separated by 2x2 average pooling, global spatial averaging to
a per-frame 64-vector, and a width-1 per-step output map. Variant "3d"
uses dense 3x3x3 kernels; variant "2plus1d" factorizes each of those into
a 1x3x3 spatial conv and a 3x1x1 temporal conv with an intermediate
channel width chosen to keep the parameter count comparable. Every conv is
followed by a ReLU then batch normalization (in that order; the factorized
pairs also normalize between the two halves).

Conv layers are numbered 1..8: conv1, block one 2-3, block two 4-5, block
three 6-8. Auxiliary waveform taps attach to layers 5, 6 and 7.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamSet
from .tensor import (
    ShapeError,
    Tensor,
    avg_pool3d,
    batch_norm,
    conv3d,
    dense,
    global_spatial_avg,
    relu,
)

ENCODER_VARIANTS = ("3d", "2plus1d")

TAP_LAYERS = (5, 6, 7)

EMBED_DIM = 64
SIMCLR_PROJ_WIDTHS = (64, 16)
SIMSIAM_PROJ_WIDTHS = (64, 32, 32)
SIMSIAM_PRED_WIDTHS = (8, 32)

# (layer index, out channels); pools sit between the blocks
_BLOCK_CHANNELS = ((2, 32), (3, 32), ("pool",), (4, 64), (5, 64), ("pool",), (6, 64), (7, 64), (8, 64))


def midplane_channels(t, d, c_in, c_out):
    """Intermediate width of a factorized spatio-temporal conv block.

    Chosen so the 2D+1D pair spends roughly the parameter budget of the
    dense t x d x d kernel it replaces: floor(t*d^2*cin*cout /
    (d^2*cin + t*cout)).
    """
    if min(t, d, c_in, c_out) <= 0:
        raise ValueError("midplane_channels expects positive dimensions")
    return (t * d * d * c_in * c_out) // (d * d * c_in + t * c_out)


def _he_uniform(rng, shape, fan_in):
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, shape).astype(np.float32)


def _add_conv_unit(params, rng, name, kshape, c_in, c_out):
    """Conv + its batch-norm parameters under a dotted prefix."""
    kt, kh, kw = kshape
    fan_in = kt * kh * kw * c_in
    params.add(f"{name}.kernel", Tensor(_he_uniform(rng, (kt, kh, kw, c_in, c_out), fan_in)))
    params.add(f"{name}.bias", Tensor(np.zeros(c_out, np.float32)))
    params.add(f"{name}.gamma", Tensor(np.ones(c_out, np.float32)))
    params.add(f"{name}.beta", Tensor(np.zeros(c_out, np.float32)))
    params.add(f"{name}.run_mean", Tensor(np.zeros(c_out, np.float32)), trainable=False)
    params.add(f"{name}.run_var", Tensor(np.ones(c_out, np.float32)), trainable=False)


def _add_dense(params, rng, name, c_in, c_out):
    params.add(f"{name}.weight", Tensor(_he_uniform(rng, (c_in, c_out), c_in)))
    params.add(f"{name}.bias", Tensor(np.zeros(c_out, np.float32)))


def build_encoder(variant, rng) -> ParamSet:
    """Parameters for the full encoder stack plus the output readout.

    Parameter draw order is fixed by the layer order, so equal seeds give
    byte-identical initial checkpoints.
    """
    if variant not in ENCODER_VARIANTS:
        raise ValueError(f"unknown encoder variant: {variant}")
    params = ParamSet()
    _add_conv_unit(params, rng, "conv1", (1, 5, 5), 3, 16)
    c_in = 16
    for entry in _BLOCK_CHANNELS:
        if entry[0] == "pool":
            continue
        idx, c_out = entry
        name = f"conv{idx}"
        if variant == "3d":
            _add_conv_unit(params, rng, name, (3, 3, 3), c_in, c_out)
        else:
            mid = midplane_channels(3, 3, c_in, c_out)
            _add_conv_unit(params, rng, f"{name}.sp", (1, 3, 3), c_in, mid)
            _add_conv_unit(params, rng, f"{name}.tm", (3, 1, 1), mid, c_out)
        c_in = c_out
    _add_dense(params, rng, "out", EMBED_DIM, 1)
    return params


def build_tap_readouts(rng) -> ParamSet:
    """Per-step width-1 readouts for the auxiliary tap layers (stage 2 only)."""
    params = ParamSet()
    for idx in TAP_LAYERS:
        _add_dense(params, rng, f"tap{idx}", EMBED_DIM, 1)
    return params


def build_projection_head(method, rng) -> ParamSet:
    """Dense head(s) for the self-supervised stage.

    simclr: 64 -> 64 -> 16 projector. simsiam: 64 -> 64 -> 32 -> 32
    projector plus a 32 -> 8 -> 32 predictor. Hidden layers are
    ReLU-activated; no batch norm inside heads.
    """
    params = ParamSet()
    if method == "simclr":
        widths = SIMCLR_PROJ_WIDTHS
    elif method == "simsiam":
        widths = SIMSIAM_PROJ_WIDTHS
    else:
        raise ValueError(f"no projection head for method: {method}")
    c_in = EMBED_DIM
    for li, width in enumerate(widths, start=1):
        _add_dense(params, rng, f"proj.l{li}", c_in, width)
        c_in = width
    if method == "simsiam":
        c_in = SIMSIAM_PROJ_WIDTHS[-1]
        for li, width in enumerate(SIMSIAM_PRED_WIDTHS, start=1):
            _add_dense(params, rng, f"pred.l{li}", c_in, width)
            c_in = width
    return params


@dataclass
class EncoderOutputs:
    """Everything a forward pass exposes downstream."""

    h: Tensor  # [N, 64] per-clip embedding (temporal mean of features)
    features: Tensor  # [N, T, 64] squeezed per-frame map
    taps: dict  # layer index -> [N, T, H, W, C] activation
    shapes: list = field(default_factory=list)  # (label, activation shape)


@dataclass
class RppgOutputs:
    """Stage-2 waveform readouts: main output plus auxiliary taps."""

    p_out: Tensor  # [N, T]
    taps: dict  # layer index -> [N, T]


def _conv_unit(x, params, name, padding, training):
    x = conv3d(x, params[f"{name}.kernel"], params[f"{name}.bias"], padding)
    x = relu(x)
    return batch_norm(
        x,
        params[f"{name}.gamma"],
        params[f"{name}.beta"],
        params[f"{name}.run_mean"],
        params[f"{name}.run_var"],
        training=training,
    )


def encoder_forward(params, clips, variant, training=False, record_shapes=False) -> EncoderOutputs:
    """Run the stack on ``clips [N,T,H,W,3]``; collect tap activations."""
    if not isinstance(clips, Tensor):
        clips = Tensor(clips)
    if clips.ndim != 5 or clips.shape[-1] != 3:
        raise ShapeError(f"encoder expects [N,T,H,W,3] clips, got {clips.shape}")
    shapes = []

    def track(label, t):
        if record_shapes:
            shapes.append((label, t.shape))
        return t

    track("input", clips)
    x = track("conv1", _conv_unit(clips, params, "conv1", (0, 1, 1), training))
    x = track("pool", avg_pool3d(x))
    taps = {}
    for entry in _BLOCK_CHANNELS:
        if entry[0] == "pool":
            x = track("pool", avg_pool3d(x))
            continue
        idx = entry[0]
        name = f"conv{idx}"
        if variant == "3d":
            x = track(name, _conv_unit(x, params, name, (1, 1, 1), training))
        else:
            x = track(f"{name}.sp", _conv_unit(x, params, f"{name}.sp", (0, 1, 1), training))
            x = track(f"{name}.tm", _conv_unit(x, params, f"{name}.tm", (1, 0, 0), training))
        if idx in TAP_LAYERS:
            taps[idx] = x
    feat = track("global_avg", global_spatial_avg(x))  # [N, T, 64]
    h = feat.mean(axis=1)  # [N, 64]
    track("squeeze", feat)
    return EncoderOutputs(h=h, features=feat, taps=taps, shapes=shapes)


def encode(clips, params, variant, training=False) -> Tensor:
    """Per-clip embedding: ``[N,T,H,W,3] -> [N, 64]``."""
    return encoder_forward(params, clips, variant, training=training).h


def project(h, params, method) -> Tensor:
    """Map embeddings through the projection head (hidden ReLU)."""
    widths = SIMCLR_PROJ_WIDTHS if method == "simclr" else SIMSIAM_PROJ_WIDTHS
    x = h
    for li in range(1, len(widths) + 1):
        x = dense(x, params[f"proj.l{li}.weight"], params[f"proj.l{li}.bias"])
        if li < len(widths):
            x = relu(x)
    return x


def predict(z, params) -> Tensor:
    """SimSiam predictor on projections."""
    x = dense(z, params["pred.l1.weight"], params["pred.l1.bias"])
    x = relu(x)
    return dense(x, params["pred.l2.weight"], params["pred.l2.bias"])


def estimate_rppg(clips, params, variant, training=False) -> RppgOutputs:
    """Waveforms from the output layer and the tap readouts.

    Main signal: per-step dense on the squeezed feature map. Each tap:
    global spatial average of that conv layer's activation, then its own
    per-step width-1 readout.
    """
    for idx in TAP_LAYERS:
        if f"tap{idx}.weight" not in params:
            raise ValueError(f"missing tap readout tap{idx} (fine-tuning configuration)")
    out = encoder_forward(params, clips, variant, training=training)
    n, t = out.features.shape[0], out.features.shape[1]
    p_out = dense(out.features, params["out.weight"], params["out.bias"]).reshape(n, t)
    tap_signals = {}
    for idx in TAP_LAYERS:
        pooled = global_spatial_avg(out.taps[idx])
        tap_signals[idx] = dense(pooled, params[f"tap{idx}.weight"], params[f"tap{idx}.bias"]).reshape(n, t)
    return RppgOutputs(p_out=p_out, taps=tap_signals)


def expected_layer_shapes(variant, frames, size):
    """Output-size table for a ``[frames, size, size, 3]`` input.

    Mirrors the architecture tables row by row (the factorized variant
    lists each spatial/temporal half), so a forward pass can be checked
    cell against cell.
    """
    rows = [("input", (frames, size, size, 3))]
    s = size - 2  # 5x5 kernel, padding 1
    rows.append(("conv1", (frames, s, s, 16)))
    s //= 2
    rows.append(("pool", (frames, s, s, 16)))
    c_in = 16
    for entry in _BLOCK_CHANNELS:
        if entry[0] == "pool":
            s //= 2
            rows.append(("pool", (frames, s, s, c_in)))
            continue
        idx, c_out = entry
        if variant == "3d":
            rows.append((f"conv{idx}", (frames, s, s, c_out)))
        else:
            mid = midplane_channels(3, 3, c_in, c_out)
            rows.append((f"conv{idx}.sp", (frames, s, s, mid)))
            rows.append((f"conv{idx}.tm", (frames, s, s, c_out)))
        c_in = c_out
    rows.append(("global_avg", (frames, 1, 1, 64)))
    rows.append(("squeeze", (frames, 64)))
    rows.append(("output", (frames, 1)))
    return rows
