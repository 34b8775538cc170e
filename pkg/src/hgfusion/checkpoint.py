"""
Binary checkpoint container (``.hgfz``).

Layout, all integers little-endian::

    b"HGFZ" | u16 version
    u32 n_config | n_config x (u16 len, utf-8 key, u16 len, utf-8 value)
    u32 n_records | n_records x (u16 len, utf-8 name, u8 ndim, ndim x u32 extent,
                                 prod(extents) x f64 values)

Records hold every parameter followed by every batch-norm running
statistic, in module order.  Config values are stored as text and parsed
back using the ModelConfig field types.
"""
from __future__ import annotations

import struct
from dataclasses import fields
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import ModelConfig, StackedHourglass, build_model

MAGIC = b"HGFZ"
VERSION = 1


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _config_items(config: ModelConfig) -> list[tuple[str, str]]:
    return [(f.name, str(getattr(config, f.name))) for f in fields(config)]


def _parse_config(items: dict[str, str]) -> ModelConfig:
    values = {}
    for f in fields(ModelConfig):
        if f.name not in items:
            raise FormatError(f"checkpoint config lacks {f.name!r}")
        raw = items[f.name]
        if f.type in ("int", int):
            values[f.name] = int(raw)
        elif f.type in ("bool", bool):
            if raw not in ("True", "False"):
                raise FormatError(f"bad boolean {raw!r} for {f.name}")
            values[f.name] = raw == "True"
        else:
            values[f.name] = raw
    return ModelConfig(**values)


def state_records(model: StackedHourglass) -> list[tuple[str, np.ndarray]]:
    return [(name, p.data) for name, p in model.named_parameters()] + list(model.named_buffers())


def save_checkpoint(model: StackedHourglass, path) -> None:
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    items = _config_items(model.config)
    chunks.append(struct.pack("<I", len(items)))
    for key, value in items:
        chunks += [_pack_str(key), _pack_str(value)]
    records = state_records(model)
    chunks.append(struct.pack("<I", len(records)))
    for name, array in records:
        chunks.append(_pack_str(name))
        chunks.append(struct.pack("<B", array.ndim))
        chunks.append(struct.pack(f"<{array.ndim}I", *array.shape))
        chunks.append(np.ascontiguousarray(array, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<H")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("checkpoint contains an invalid string") from exc


def load_checkpoint(path) -> StackedHourglass:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: not an HGFZ checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (n_items,) = r.unpack("<I")
    items = {}
    for _ in range(n_items):
        key = r.string()
        items[key] = r.string()
    try:
        config = _parse_config(items)
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: invalid model config: {exc}") from exc

    model = build_model(config, seed=0)
    targets = dict(state_records(model))
    (n_records,) = r.unpack("<I")
    if n_records != len(targets):
        raise FormatError(f"{path}: {n_records} records, model expects {len(targets)}")
    seen = set()
    for _ in range(n_records):
        name = r.string()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        values = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
        if name not in targets or name in seen:
            raise FormatError(f"{path}: unexpected record {name!r}")
        if targets[name].shape != tuple(shape):
            raise FormatError(f"{path}: record {name!r} has shape {shape}, expected {targets[name].shape}")
        targets[name][...] = values
        seen.add(name)
    if r.pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - r.pos} trailing bytes")
    return model
