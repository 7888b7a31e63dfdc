"""Binary checkpoint: hyperparameter header, then named float64 tensors.

Layout (little-endian)::

    b"SPGC" | u32 version
    | u32 d, L, m, n, e, g, d_u, d_init     hyperparameters
    | u32 d_a, dim, q_width                 needed to rebuild the config
    | u32 n_settings, then (str key, str value) pairs
    | u32 n_tensors, then per tensor:
        u32 name length | name | u32 rank | u64 extents[rank] | f64 values

Model tensors come first in ``named_parameters`` order, then the
normalizer (``normalizer.*``) and an optional spectral basis (``basis.*``).
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParameters, init_parameters
from .training import Normalizer

MAGIC = b"SPGC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: ModelParameters
    normalizer: Normalizer
    settings: dict[str, str] = field(default_factory=dict)
    basis: dict[str, np.ndarray] = field(default_factory=dict)


def _str(buf, text: str):
    raw = text.encode("utf-8")
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _tensor(buf, name: str, arr: np.ndarray):
    arr = np.ascontiguousarray(arr, dtype="<f8")
    _str(buf, name)
    buf.write(struct.pack("<I", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(arr.tobytes())


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    c = ck.params.config
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<8I", c.width, c.n_blocks, c.m, c.n_anchors, c.edge_width,
                          c.gate_width, c.d_u, c.d_init))
    buf.write(struct.pack("<3I", c.d_a, c.dim, c.hidden_q))
    buf.write(struct.pack("<I", len(ck.settings)))
    for key in sorted(ck.settings):
        _str(buf, key)
        _str(buf, str(ck.settings[key]))
    tensors = [(name, p.data) for name, p in ck.params.named_parameters()]
    tensors += [(f"normalizer.{k}", v) for k, v in ck.normalizer.arrays().items()]
    tensors += [(f"basis.{k}", v) for k, v in sorted(ck.basis.items())]
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _tensor(buf, name, arr)
    return buf.getvalue()


def save_checkpoint(ck: Checkpoint, path) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(ck))
    return path


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError("checkpoint is truncated")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")


def parse_checkpoint(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"incompatible checkpoint version {version} (expected {VERSION})")
    d, n_blocks, m, n, e, g, d_u, d_init = r.unpack("<8I")
    d_a, dim, q_width = r.unpack("<3I")
    if d_a + dim != d_init:
        raise CheckpointError(f"header inconsistent: d_a + dim = {d_a + dim} != d_init {d_init}")
    config = ModelConfig(d_a=d_a, d_u=d_u, dim=dim, width=d, n_blocks=n_blocks, m=m,
                         n_anchors=n, edge_width=e, gate_width=g, q_width=q_width)
    (n_settings,) = r.unpack("<I")
    settings = {}
    for _ in range(n_settings):
        key = r.string()
        settings[key] = r.string()
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        name = r.string()
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q")
        size = int(np.prod(shape)) if rank else 1
        tensors[name] = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64) \
            .reshape(shape)
    if r.pos != len(raw):
        raise CheckpointError("trailing bytes after the last tensor")
    params = init_parameters(config, seed=0)
    missing = [name for name, _ in params.named_parameters() if name not in tensors]
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {missing[:3]}")
    try:
        params.load_state_dict(tensors)
        normalizer = Normalizer(*(tensors[f"normalizer.{k}"]
                                  for k in ("in_mean", "in_std", "out_mean", "out_std")))
    except (KeyError, ValueError) as exc:
        raise CheckpointError(str(exc)) from exc
    basis = {k[len("basis."):]: v for k, v in tensors.items() if k.startswith("basis.")}
    return Checkpoint(params, normalizer, settings, basis)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return parse_checkpoint(path.read_bytes())
