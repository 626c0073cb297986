"""Model checkpoint files.

Layout (little-endian)::

    b"RMWT" | u16 version | u32 config length | config JSON (UTF-8)
    u32 parameter count
    per parameter: u16 name length | name (UTF-8) | u8 rank | rank x u32 dims | f64 data

The config JSON is the full run config with sorted keys; the model part is
enough to rebuild the parameter layout.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from .autodiff import Parameter
from .config import RunConfig
from .model import ModelParams

MAGIC = b"RMWT"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int, path: str | None = None):
        where = f"{path}: " if path else ""
        super().__init__(f"{where}byte offset {offset}: {message}")
        self.offset = offset
        self.path = path


def dumps(params: ModelParams, run: RunConfig) -> bytes:
    if run.model != params.cfg:
        run = run.model_copy(update={"model": params.cfg})
    cfg = json.dumps(run.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = bytearray(MAGIC + struct.pack("<HI", VERSION, len(cfg)) + cfg)
    out += struct.pack("<I", len(params))
    for name in sorted(params.tensors):
        arr = params.tensors[name].data
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    return bytes(out)


def save(path: str | Path, params: ModelParams, run: RunConfig) -> None:
    Path(path).write_bytes(dumps(params, run))


class _Reader:
    def __init__(self, data: bytes, path: str | None):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated while reading {what}", self.pos, self.path)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(data: bytes, path: str | None = None) -> tuple[ModelParams, RunConfig]:
    r = _Reader(data, path)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"bad magic, expected {MAGIC!r}", 0, path)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}", 4, path)
    (n_cfg,) = r.unpack("<I", "config length")
    at = r.pos
    try:
        run = RunConfig.model_validate(json.loads(r.take(n_cfg, "config").decode("utf-8")))
    except (UnicodeDecodeError, json.JSONDecodeError, ValidationError) as exc:
        raise CheckpointError(f"invalid config block: {exc}", at, path) from None
    (count,) = r.unpack("<I", "parameter count")
    tensors = {}
    for _ in range(count):
        at = r.pos
        (n_name,) = r.unpack("<H", "name length")
        try:
            name = r.take(n_name, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("parameter name is not UTF-8", at, path) from None
        (rank,) = r.unpack("<B", "rank")
        shape = r.unpack(f"<{rank}I", "shape")
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(r.take(8 * size, f"data of {name!r}"), dtype="<f8").astype(np.float64).reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"parameter {name!r} holds non-finite values", at, path)
        tensors[name] = Parameter(arr, name)
    if r.pos != len(data):
        raise CheckpointError("trailing bytes after the last parameter", r.pos, path)
    expected = ModelParams.init(run.model, 0)
    for name, p in expected.tensors.items():
        if name not in tensors:
            raise CheckpointError(f"missing parameter {name!r}", r.pos, path)
        if tensors[name].shape != p.shape:
            raise CheckpointError(f"parameter {name!r} has shape {tensors[name].shape}, config implies {p.shape}",
                                  r.pos, path)
    extra = set(tensors) - set(expected.tensors)
    if extra:
        raise CheckpointError(f"unexpected parameters {sorted(extra)}", r.pos, path)
    return ModelParams(run.model, {k: tensors[k] for k in expected.tensors}), run


def load(path: str | Path) -> tuple[ModelParams, RunConfig]:
    return loads(Path(path).read_bytes(), str(path))
