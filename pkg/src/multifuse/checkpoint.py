"""Binary checkpoint format for named float32 tensors.

Layout (little-endian): ``ADMM``, u32 version, u32 tensor count, then per
tensor: u32 name length, UTF-8 name, u8 rank, u32 dims, f32 data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

MAGIC = b"ADMM"
VERSION = 1


def save_tensors(tensors: dict[str, np.ndarray], path) -> None:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not an ADMM checkpoint")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        out[name] = arr.astype(np.float32)
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes after {count} tensors")
    return out


def save_model(model, path) -> Path:
    """Write ``path`` (tensors) and ``path.json`` (kind and encoder configs)."""
    path = Path(path)
    save_tensors(model.params, path)
    meta = {
        "kind": model.kind.value,
        "vision": asdict(model.vision),
        "text": asdict(model.text),
        "gmu_dim": model.gmu_dim,
        "hidden": model.hidden,
    }
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(meta, indent=2))
    return sidecar


def load_model(path):
    from .encoders import EncoderConfig
    from .fusion import FusionKind, FusionModel

    path = Path(path)
    meta = json.loads(path.with_name(path.name + ".json").read_text())
    return FusionModel(
        kind=FusionKind(meta["kind"]),
        vision=EncoderConfig(**meta["vision"]),
        text=EncoderConfig(**meta["text"]),
        params=load_tensors(path),
        gmu_dim=meta["gmu_dim"],
        hidden=meta["hidden"],
    )
