"""Bit-exact checkpoint container.

Layout (all integers little-endian u32)::

    b"DCVN" | version | descriptor length | descriptor JSON (UTF-8)
    per array: name length | name | rank | dims... | float64 LE values
    FNV-1a 64-bit digest of every preceding byte (u64 LE)

The descriptor holds the network spec, metadata, frozen names, optimizer
hyperparameters and the number of arrays. Arrays are the parameters in
spec order, then BN running statistics, then Adam moments prefixed
``adam.m.`` / ``adam.v.``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numba
import numpy as np

from ..errors import CheckpointError
from .network import MiniResNet, NetworkSpec, Parameter

MAGIC = b"DCVN"
VERSION = 1

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


@numba.njit(numba.uint64(numba.types.Array(numba.uint8, 1, "C", readonly=True)), cache=True)
def _fnv1a64(buf):
    h = np.uint64(FNV_OFFSET)
    prime = np.uint64(FNV_PRIME)
    for b in buf:
        h = (h ^ np.uint64(b)) * prime
    return h


def fnv1a64(data: bytes) -> int:
    return int(_fnv1a64(np.frombuffer(data, dtype=np.uint8)))


@dataclass
class Checkpoint:
    spec: NetworkSpec
    arrays: dict
    frozen: list = field(default_factory=list)
    optimizer: dict | None = None
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: MiniResNet, optimizer=None, metadata=None):
        arrays = {name: p.value.copy() for name, p in model.params.items()}
        arrays.update({name: b.copy() for name, b in model.buffers.items()})
        opt = None
        if optimizer is not None:
            opt = optimizer.hyperparameters()
            for name, m in optimizer.m.items():
                arrays[f"adam.m.{name}"] = m.copy()
            for name, v in optimizer.v.items():
                arrays[f"adam.v.{name}"] = v.copy()
        frozen = [name for name, p in model.params.items() if p.frozen]
        return cls(model.spec, arrays, frozen, opt, dict(metadata or {}))

    def parameter_arrays(self):
        return {k: v for k, v in self.arrays.items() if not k.startswith("adam.")}

    def to_model(self, spec: NetworkSpec | None = None) -> MiniResNet:
        """Rebuild a model, checking every array against ``spec`` (default: the stored one)."""
        spec = self.spec if spec is None else spec
        check_compatible(self, spec)
        params = {
            name: Parameter(name, self.arrays[name].copy(), frozen=name in self.frozen)
            for name in spec.param_shapes()
        }
        buffers = {name: self.arrays[name].copy() for name in spec.buffer_shapes()}
        return MiniResNet(spec, params, buffers)

    def adam_moments(self):
        m = {k[len("adam.m."):]: v for k, v in self.arrays.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: a for k, a in self.arrays.items() if k.startswith("adam.v.")}
        return m, v


def check_compatible(ckpt: Checkpoint, spec: NetworkSpec):
    expected = dict(spec.param_shapes())
    expected.update(spec.buffer_shapes())
    stored = ckpt.parameter_arrays()
    for name, shape in expected.items():
        if name not in stored:
            raise CheckpointError(f"checkpoint does not match network: parameter {name!r} missing")
        if tuple(stored[name].shape) != tuple(shape):
            raise CheckpointError(
                f"checkpoint does not match network: parameter {name!r} has shape "
                f"{tuple(stored[name].shape)}, expected {tuple(shape)}"
            )
    for name in stored:
        if name not in expected:
            raise CheckpointError(f"checkpoint does not match network: unexpected parameter {name!r}")


def save_checkpoint(ckpt: Checkpoint) -> bytes:
    descriptor = {
        "network": ckpt.spec.to_dict(),
        "metadata": ckpt.metadata,
        "frozen": list(ckpt.frozen),
        "optimizer": ckpt.optimizer,
        "n_arrays": len(ckpt.arrays),
    }
    desc = json.dumps(descriptor, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(desc)), desc]
    for name, arr in ckpt.arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        parts.append(struct.pack("<I", len(key)))
        parts.append(key)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", fnv1a64(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated while reading {what}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(data: bytes) -> Checkpoint:
    data = bytes(data)
    if data[:4] != MAGIC:
        raise CheckpointError(f"not a checkpoint: bad magic {data[:4]!r}")
    if len(data) < 20:
        raise CheckpointError("checkpoint truncated")
    body, (digest,) = data[:-8], struct.unpack("<Q", data[-8:])
    r = _Reader(body)
    r.take(4, "magic")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    if fnv1a64(body) != digest:
        raise CheckpointError("checkpoint digest mismatch (corrupt or truncated file)")
    desc_len = r.u32("descriptor length")
    try:
        descriptor = json.loads(r.take(desc_len, "descriptor").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad checkpoint descriptor: {exc}") from exc

    arrays = {}
    for _ in range(descriptor["n_arrays"]):
        name = r.take(r.u32("name length"), "name").decode("utf-8")
        rank = r.u32(f"rank of {name}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"dims of {name}"))
        count = int(np.prod(dims, dtype=np.int64))
        raw = r.take(8 * count, f"values of {name}")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(body):
        raise CheckpointError("trailing bytes after last array")
    return Checkpoint(
        spec=NetworkSpec.from_dict(descriptor["network"]),
        arrays=arrays,
        frozen=list(descriptor["frozen"]),
        optimizer=descriptor["optimizer"],
        metadata=descriptor["metadata"],
    )
