"""Self-describing binary checkpoints.

Layout (all integers little-endian)::

    magic     8 bytes  b"MANETLCK"
    version   u32
    config    u32 length + UTF-8 JSON (model and training configuration)
    tensors   u32 count + named tensor table
    optimizer u32 length + UTF-8 JSON hyperparameters, then a named tensor table
    state     u32 epoch + u32 length + UTF-8 JSON rng state

A named tensor table entry is ``u16 name length, name, u8 ndim, ndim x u32
dims, raw float32 data``. Entries are written in sorted name order so the same
state always encodes to the same bytes.
"""

import dataclasses
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig, TrainConfig
from .exceptions import CheckpointError

MAGIC = b"MANETLCK"
VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    tensors: dict
    optimizer: dict
    epoch: int
    rng_state: dict = field(default_factory=dict)


def _u32(value):
    return struct.pack("<I", value)


def _json_blob(obj):
    blob = json.dumps(obj, sort_keys=True).encode()
    return _u32(len(blob)) + blob


def _tensor_table(tensors):
    parts = [_u32(len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        encoded = name.encode()
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<B", arr.ndim) + b"".join(_u32(d) for d in arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def save_checkpoint(state: Checkpoint) -> bytes:
    config = {
        "model": dataclasses.asdict(state.model_config),
        "train": dataclasses.asdict(state.train_config),
    }
    optimizer = state.optimizer or {"hyper": {}, "velocity": {}}
    return b"".join([
        MAGIC,
        _u32(VERSION),
        _json_blob(config),
        _tensor_table(state.tensors),
        _json_blob(optimizer.get("hyper", {})),
        _tensor_table(optimizer.get("velocity", {})),
        _u32(state.epoch),
        _json_blob(state.rng_state),
    ])


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n, section):
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint is truncated", section)
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, section):
        return struct.unpack("<I", self.take(4, section))[0]

    def json(self, section):
        size = self.u32(section)
        try:
            return json.loads(bytes(self.take(size, section)).decode())
        except (UnicodeDecodeError, json.JSONDecodeError):
            raise CheckpointError("corrupt JSON block", section) from None

    def table(self, section):
        count = self.u32(section)
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", self.take(2, section))
            name = bytes(self.take(name_len, section)).decode()
            (ndim,) = struct.unpack("<B", self.take(1, section))
            shape = tuple(self.u32(section) for _ in range(ndim))
            size = int(np.prod(shape, dtype=np.int64))
            raw = self.take(4 * size, section)
            tensors[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(shape)
        return tensors


def load_checkpoint(data: bytes) -> Checkpoint:
    """Decode checkpoint bytes; errors name the section that failed."""
    reader = _Reader(bytes(data))
    if bytes(reader.take(len(MAGIC), "magic")) != MAGIC:
        raise CheckpointError("bad magic bytes, not a manetl checkpoint", "magic")
    version = reader.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", "version")
    config = reader.json("config")
    try:
        model_config = ModelConfig(**config["model"])
        train_config = TrainConfig(**config["train"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid configuration ({exc})", "config") from None
    tensors = reader.table("tensors")
    hyper = reader.json("optimizer")
    velocity = reader.table("optimizer")
    epoch = reader.u32("state")
    rng_state = reader.json("state")
    if reader.pos != len(reader.data):
        raise CheckpointError("unexpected trailing bytes", "state")
    return Checkpoint(model_config, train_config, tensors, {"hyper": hyper, "velocity": velocity},
                      epoch, rng_state)
