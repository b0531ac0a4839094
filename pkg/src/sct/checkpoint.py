"""Model checkpoint format.

Layout: magic "SCT1", u32 version, u32 config-JSON length, canonical JSON
config, then one block per parameter: u32 name length, UTF-8 name, u64
element count, little-endian float64 payload. Round-trips bit-exactly.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

from .model import SctConfig, SctModel

MAGIC = b"SCT1"
VERSION = 1


class CheckpointFormatError(ValueError):
    """Checkpoint bytes do not match the expected layout."""


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def serialize_model(model: SctModel) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    cfg = canonical_json(model.config.to_dict())
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    for name, p in model.named_parameters().items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", p.data.size))
        buf.write(p.data.astype("<f8", copy=False).tobytes())
    return buf.getvalue()


def _read_exact(buf, n, what):
    raw = buf.read(n)
    if len(raw) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return raw


def deserialize_model(data: bytes) -> SctModel:
    buf = io.BytesIO(data)
    magic = _read_exact(buf, 4, "magic")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(buf, 4, "version"))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack("<I", _read_exact(buf, 4, "config length"))
    config = SctConfig.from_dict(json.loads(_read_exact(buf, cfg_len, "config")))

    model = SctModel(config, seed=0)
    params = model.named_parameters()
    seen = set()
    while True:
        head = buf.read(4)
        if not head:
            break
        if len(head) != 4:
            raise CheckpointFormatError("truncated checkpoint while reading block header")
        (name_len,) = struct.unpack("<I", head)
        name = _read_exact(buf, name_len, "block name").decode("utf-8")
        (count,) = struct.unpack("<Q", _read_exact(buf, 8, f"count of {name}"))
        payload = _read_exact(buf, count * 8, f"payload of {name}")
        if name not in params:
            raise CheckpointFormatError(f"unknown parameter block {name!r}")
        p = params[name]
        if count != p.data.size:
            raise CheckpointFormatError(
                f"block {name!r} has {count} elements, model expects {p.data.size}"
            )
        p.data = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(p.data.shape)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise CheckpointFormatError(f"checkpoint missing parameter blocks: {sorted(missing)}")
    return model


def save_model(model: SctModel, path):
    with open(path, "wb") as fh:
        fh.write(serialize_model(model))


def load_model(path) -> SctModel:
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())
