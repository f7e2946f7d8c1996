"""Binary checkpoint format.

Layout (all integers little-endian uint32)::

    b"VDT1"
    header_len, header      UTF-8 "key=value" lines: ModelConfig fields + dtype
    num_params
    per parameter: name_len, name, rank, dims..., raw little-endian values
"""
from __future__ import annotations

import dataclasses
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from . import numkernel as nk
from .errors import CheckpointShapeError, MagicMismatchError, TruncatedCheckpointError
from .model import BUFFERS, ModelConfig, ModelParams, _param_shapes

MAGIC = b"VDT1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def _config_header(config, dtype):
    lines = [f"{f.name}={getattr(config, f.name)}" for f in dataclasses.fields(config)]
    lines.append(f"dtype={np.dtype(dtype).name}")
    return "\n".join(lines).encode("utf-8")


def _parse_header(text):
    fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    kwargs, dtype = {}, "float64"
    for line in text.splitlines():
        key, _, value = line.partition("=")
        if key == "dtype":
            dtype = value
            continue
        kind = fields[key].type
        if kind in ("bool", bool):
            kwargs[key] = value == "True"
        elif kind in ("float", float):
            kwargs[key] = float(value)
        elif kind in ("str", str):
            kwargs[key] = value
        else:
            kwargs[key] = int(value)
    return ModelConfig(**kwargs), dtype


def save_checkpoint(params, path, config=None):
    config = config or params.config
    tensors = list(params.items())
    dtype = tensors[0][1].dtype if tensors else np.float64
    header = _config_header(config, dtype)
    parts = [MAGIC, struct.pack("<I", len(header)), header, struct.pack("<I", len(tensors))]
    for name, t in tensors:
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)) + raw_name)
        parts.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype=_DTYPES[np.dtype(t.dtype).name]).tobytes())
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise TruncatedCheckpointError(
                f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, expected_config=None):
    """Read ``(params, config)``; raises distinct errors for each failure mode."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise MagicMismatchError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    r = _Reader(raw, path)
    r.take(4)
    config, dtype = _parse_header(r.take(r.u32()).decode("utf-8"))
    np_dtype = np.dtype(_DTYPES[dtype])
    tensors = OrderedDict()
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if dims else 1
        values = np.frombuffer(r.take(count * np_dtype.itemsize), dtype=np_dtype).reshape(dims)
        tensors[name] = nk.tensor(values.astype(np_dtype.newbyteorder("=")), requires_grad=name not in BUFFERS,
                                  name=name, dtype=np_dtype.newbyteorder("="))
    if r.pos != len(raw):
        raise TruncatedCheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")

    declared = _param_shapes(config)
    found = OrderedDict((n, t.shape) for n, t in tensors.items())
    if found != declared:
        raise CheckpointShapeError(f"{path}: parameter blocks do not match the stored config")
    if expected_config is not None:
        wanted = _param_shapes(expected_config)
        if wanted != found:
            diffs = [n for n in set(wanted) | set(found) if wanted.get(n) != found.get(n)]
            raise CheckpointShapeError(
                f"{path}: shapes differ from expected config for {sorted(diffs)[:5]}")
    return ModelParams(config, tensors), config
