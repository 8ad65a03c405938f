"""Binary checkpoint format.

Layout (little-endian)::

    b"PPC1"  u32 record_count
    record:  u16 name_len  name(utf-8)  u8 dtype  u8 rank  u32 dims[rank]  data

``dtype`` is 0 for float32 and 1 for float64. Two kinds of zero-length marker
records carry metadata: ``@config:<json>`` (model and world config plus the
phase) and ``@frozen:<param name>`` (one per frozen parameter).
"""
from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, WorldConfig
from .errors import CheckpointError
from .model import DualStreamDiT, init_pose_stream

MAGIC = b"PPC1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {torch.float32: 0, torch.float64: 1}
_CONFIG = "@config:"
_FROZEN = "@frozen:"


def _record(name: str, arr: np.ndarray | None, code: int = 0) -> bytes:
    raw = name.encode("utf-8")
    if arr is None:
        return struct.pack("<H", len(raw)) + raw + struct.pack("<BBI", 0, 1, 0)
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def _config_json(model: DualStreamDiT) -> str:
    return json.dumps({
        "model": dataclasses.asdict(model.cfg),
        "world": dataclasses.asdict(model.world),
        "pose_stream": model.has_pose_stream,
    }, sort_keys=True)


def encode_checkpoint(model: DualStreamDiT) -> bytes:
    records = [_record(_CONFIG + _config_json(model), None)]
    for name, p in model.named_parameters():
        if not p.requires_grad:
            records.append(_record(_FROZEN + name, None))
    for name, p in model.named_parameters():
        if p.dtype not in _CODES:
            raise CheckpointError(f"unsupported dtype {p.dtype} for {name}", 0)
        records.append(_record(name, p.detach().cpu().numpy(), _CODES[p.dtype]))
    return MAGIC + struct.pack("<I", len(records)) + b"".join(records)


def save_checkpoint(model: DualStreamDiT, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(model))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated while reading {what}", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_records(data: bytes) -> list[tuple[str, np.ndarray | None]]:
    """Parse every record; raises :class:`CheckpointError` with the byte offset on damage."""
    r = _Reader(data)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError("bad magic", 0)
    (count,) = r.unpack("<I", "record count")
    out = []
    for _ in range(count):
        start = r.pos
        (nlen,) = r.unpack("<H", "name length")
        try:
            name = r.take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("name is not utf-8", start) from None
        code, rank = r.unpack("<BB", "dtype/rank")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code}", start)
        dims = r.unpack(f"<{rank}I", "dims")
        if name.startswith("@"):
            if dims != (0,):
                raise CheckpointError(f"marker {name[:20]!r} carries data", start)
            out.append((name, None))
            continue
        dt = _DTYPES[code]
        size = int(np.prod(dims)) * dt.itemsize
        arr = np.frombuffer(r.take(size, f"data of {name}"), dtype=dt).reshape(dims).copy()
        out.append((name, arr))
    if r.pos != len(data):
        raise CheckpointError("trailing bytes", r.pos)
    return out


def decode_checkpoint(data: bytes) -> DualStreamDiT:
    records = decode_records(data)
    meta = None
    frozen: set[str] = set()
    tensors: dict[str, torch.Tensor] = {}
    for name, arr in records:
        if name.startswith(_CONFIG):
            meta = json.loads(name[len(_CONFIG):])
        elif name.startswith(_FROZEN):
            frozen.add(name[len(_FROZEN):])
        else:
            tensors[name] = torch.from_numpy(arr)
    if meta is None:
        raise CheckpointError("missing config record", 8)
    mcfg = meta["model"]
    mcfg["rope_split"] = tuple(mcfg["rope_split"])
    wcfg = meta["world"]
    wcfg["canvas"] = tuple(wcfg["canvas"])
    model = DualStreamDiT(ModelConfig(**mcfg), WorldConfig(**wcfg))
    if meta["pose_stream"]:
        model = init_pose_stream(model)
    params = dict(model.named_parameters())
    if set(params) != set(tensors):
        missing = sorted(set(params) ^ set(tensors))
        raise CheckpointError(f"parameter set mismatch: {missing[:3]}", 8)
    with torch.no_grad():
        for name, p in params.items():
            t = tensors[name]
            if tuple(t.shape) != tuple(p.shape):
                raise CheckpointError(f"shape mismatch for {name}", 8)
            p.data = t.clone()
            p.requires_grad_(name not in frozen)
    return model


def load_checkpoint(path: str | Path) -> DualStreamDiT:
    return decode_checkpoint(Path(path).read_bytes())


def checkpoint_roundtrip(model: DualStreamDiT, path: str | Path) -> DualStreamDiT:
    save_checkpoint(model, path)
    return load_checkpoint(path)
