"""Named parameter collections, the Adam update, and checkpoint files.

Checkpoint container: magic ``RPGW``, format version u16, entry count u32,
then per entry: name (u16 length + UTF-8), rank u8, dims u32 each,
little-endian f32 payload. Round-trips are bit-exact for f32 tensors.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import NonFiniteError, Tensor

CHECKPOINT_MAGIC = b"RPGW"
CHECKPOINT_VERSION = 1

# name suffixes that are state, not weights (never optimized)
FROZEN_SUFFIXES = (".run_mean", ".run_var")


class CheckpointError(ValueError):
    """Malformed checkpoint file (bad magic, version, or truncation)."""


class MissingGradientError(ValueError):
    """A trainable parameter has no gradient at update time."""


class ParamSet:
    """Ordered name -> Tensor map; entries are trainable or frozen.

    Iteration follows insertion order, so identical build sequences give
    identical checkpoints byte for byte.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self._frozen: set[str] = set()

    def add(self, name, tensor, trainable=True):
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(tensor)
        tensor.requires_grad = trainable
        self._entries[name] = tensor
        if not trainable:
            self._frozen.add(name)
        return tensor

    def __getitem__(self, name) -> Tensor:
        return self._entries[name]

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def trainable_items(self):
        return [(n, t) for n, t in self._entries.items() if n not in self._frozen]

    def is_trainable(self, name):
        return name not in self._frozen

    def set_trainable(self, name, trainable):
        tensor = self._entries[name]
        tensor.requires_grad = bool(trainable)
        if trainable:
            self._frozen.discard(name)
        else:
            self._frozen.add(name)

    def zero_grad(self):
        for t in self._entries.values():
            t.grad = None

    def merge(self, other: "ParamSet"):
        for name, tensor in other.items():
            self.add(name, tensor, trainable=other.is_trainable(name))
        return self

    def without_prefix(self, *prefixes):
        """New ParamSet sharing tensors, minus entries under any prefix."""
        out = ParamSet()
        for name, tensor in self._entries.items():
            if any(name.startswith(p) for p in prefixes):
                continue
            out._entries[name] = tensor
            if name in self._frozen:
                out._frozen.add(name)
        return out


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: ParamSet, state: AdamState, grads=None):
    """One bias-corrected Adam update over the trainable entries.

    `grads` defaults to each parameter's accumulated ``.grad``. Frozen
    entries are untouched. Deterministic: identical inputs give bitwise
    identical parameters.
    """
    trainable = params.trainable_items()
    if grads is None:
        grads = {}
        for name, p in trainable:
            if p.grad is None:
                raise MissingGradientError(f"no gradient for {name}")
            grads[name] = p.grad
    for name, _ in trainable:
        if name not in grads:
            raise MissingGradientError(f"no gradient for {name}")
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteError(f"non-finite gradient for {name}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, p in trainable:
        g = grads[name].astype(p.dtype, copy=False)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


# -- checkpoint container -------------------------------------------------


def save_checkpoint(path, params: ParamSet):
    """Write every entry (trainable and frozen) as little-endian f32."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<HI", CHECKPOINT_VERSION, len(params)))
        for name, tensor in params.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(tensor.data, dtype="<f4")
            f.write(struct.pack("<H", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.tobytes())


def load_checkpoint(path) -> ParamSet:
    """Read a checkpoint; entries with running-stat suffixes load frozen."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic in {path}")
    try:
        version, count = struct.unpack_from("<HI", blob, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 10
        params = ParamSet()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, off)
            off += 2
            name = blob[off : off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", blob, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            end = off + 4 * n
            if end > len(blob):
                raise CheckpointError(f"truncated checkpoint {path}")
            arr = np.frombuffer(blob[off:end], dtype="<f4").reshape(dims).copy()
            off += 4 * n
            trainable = not name.endswith(FROZEN_SUFFIXES)
            params.add(name, Tensor(arr), trainable=trainable)
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint {path}") from e
    return params


def write_sidecar(path, meta: dict):
    """Plain-text key=value metadata next to a checkpoint."""
    with open(path, "w", encoding="utf-8") as f:
        for k in sorted(meta):
            f.write(f"{k}={meta[k]}\n")


def read_sidecar(path) -> dict:
    meta = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            k, _, v = line.partition("=")
            meta[k] = v
    return meta
