"""Binary checkpoint codec.

Layout (little endian)::

    b"CFCK"  u32 version  u32 record_count
    record_count x ( u32 name_len  name  u32 rank  rank x u32 dim  f32 payload )
    u32 config_len  config text (UTF-8 key=value lines)

Optimizer buffers live under the reserved ``opt.`` prefix:
``opt.step`` (rank 1, the low and high 16 bits, each exact in f32),
``opt.m.<param>`` and ``opt.v.<param>``.
"""

import os
import struct

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from .errors import CheckpointMismatchError, ContractError, DatasetIOError, ParseError
from .optim import AdamState
from .tensor import Module

MAGIC = b"CFCK"
FORMAT_VERSION = 2
OPT_PREFIX = "opt."


@dataclass
class Checkpoint:
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)
    step: Optional[int] = None
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    config_text: str = ""

    def adam_state(self, **hyper) -> AdamState:
        return AdamState(step=self.step or 0,
                         m={k: v.astype(np.float64) for k, v in self.adam_m.items()},
                         v={k: v.astype(np.float64) for k, v in self.adam_v.items()},
                         **hyper)


def snapshot(model: Module) -> Dict[str, np.ndarray]:
    """Single-precision copy of every parameter, keyed by name."""

    return {name: p.data.astype(np.float32) for name, p in model.named_parameters()}


def _split_step(step: int) -> np.ndarray:
    if not 0 <= step < 2 ** 40:
        raise ContractError(f"optimizer step {step} out of range")
    return np.array([step & 0xFFFF, step >> 16], dtype=np.float32)


def _join_step(payload: np.ndarray, path, offset: int) -> int:
    if payload.shape != (2,):
        raise ParseError(path, offset, f"optimizer step record has shape {payload.shape}, expected (2,)")
    return int(payload[0]) + (int(payload[1]) << 16)


def _record(name: str, array: np.ndarray) -> bytes:
    encoded = name.encode("utf-8")
    array = np.asarray(array, dtype="<f4")
    header = struct.pack("<I", len(encoded)) + encoded + struct.pack("<I", array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    return header + array.tobytes(order="C")


def save_checkpoint(path, tensors: Dict[str, np.ndarray], adam: Optional[AdamState] = None,
                    config_text: str = ""):
    """Writes parameters, optional optimizer state and the run config to ``path``."""

    records = [_record(name, value) for name, value in tensors.items()]
    if adam is not None:
        records.append(_record(OPT_PREFIX + "step", _split_step(adam.step)))
        records.extend(_record(f"{OPT_PREFIX}m.{k}", v) for k, v in adam.m.items())
        records.extend(_record(f"{OPT_PREFIX}v.{k}", v) for k, v in adam.v.items())
    config = config_text.encode("utf-8")
    blob = b"".join([MAGIC, struct.pack("<II", FORMAT_VERSION, len(records)), *records,
                     struct.pack("<I", len(config)), config])

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(tmp, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except OSError as e:
        raise DatasetIOError(f"cannot write checkpoint {path}: {e}") from e


class _Reader:
    def __init__(self, path, blob: bytes):
        self.path = path
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise ParseError(self.path, self.pos, f"truncated while reading {what}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise DatasetIOError(f"cannot read checkpoint {path}: {e}") from e

    reader = _Reader(path, blob)
    if reader.take(4, "magic") != MAGIC:
        raise ParseError(path, 0, "not a checkpoint (bad magic)")
    version = reader.u32("version")
    if version != FORMAT_VERSION:
        raise ParseError(path, 4, f"unsupported checkpoint version {version}")

    ckpt = Checkpoint()
    for _ in range(reader.u32("record count")):
        start = reader.pos
        try:
            name = reader.take(reader.u32("name length"), "name").decode("utf-8")
        except UnicodeDecodeError:
            raise ParseError(path, start, "record name is not UTF-8")
        rank = reader.u32("rank")
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        payload = np.frombuffer(reader.take(4 * count, name), dtype="<f4").reshape(dims).copy()

        if name == OPT_PREFIX + "step":
            ckpt.step = _join_step(payload, path, start)
        elif name.startswith(OPT_PREFIX + "m."):
            ckpt.adam_m[name[len(OPT_PREFIX) + 2:]] = payload
        elif name.startswith(OPT_PREFIX + "v."):
            ckpt.adam_v[name[len(OPT_PREFIX) + 2:]] = payload
        else:
            ckpt.tensors[name] = payload

    config_len = reader.u32("config length")
    ckpt.config_text = reader.take(config_len, "config").decode("utf-8", errors="strict")
    if reader.pos != len(blob):
        raise ParseError(path, reader.pos, "trailing bytes after config")
    return ckpt


def load_into(model: Module, tensors: Dict[str, np.ndarray]):
    """Copies checkpoint tensors into the model's parameters.

    Raises CheckpointMismatchError naming the first parameter that is missing,
    unexpected or differently shaped.
    """

    params = dict(model.named_parameters())
    for name, param in params.items():
        if name not in tensors:
            raise CheckpointMismatchError(name, "missing from checkpoint")
        if tensors[name].shape != param.shape:
            raise CheckpointMismatchError(
                name, f"shape {tensors[name].shape} in checkpoint, model expects {param.shape}")
    for name in tensors:
        if name not in params:
            raise CheckpointMismatchError(name, "not a parameter of this model")
    for name, param in params.items():
        param.data = tensors[name].astype(np.float64)
        param.grad = None
