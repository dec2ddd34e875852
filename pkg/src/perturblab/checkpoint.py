"""``.plab`` checkpoint files.

Layout::

    b"PLAB1"
    uint64 little-endian  header length in bytes
    header                UTF-8 JSON: {"spec": ..., "entries": [...]}
    payload               little-endian float32 tensors in manifest order

Each manifest entry is ``{"layer", "role", "shape", "offset", "count"}``
with ``offset`` in bytes from the start of the payload.  The header is
written with sorted keys and no whitespace so saving is byte-deterministic.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .network import Model, ModelSpec
from .params import ParamStore

MAGIC = b"PLAB1"
_LEN = struct.Struct("<Q")


class CheckpointError(Exception):
    code = "checkpoint_error"


class BadMagic(CheckpointError):
    code = "bad_magic"


class BadHeader(CheckpointError):
    code = "bad_header"


class TruncatedPayload(CheckpointError):
    code = "truncated_payload"


class ManifestMismatch(CheckpointError):
    code = "manifest_mismatch"


def to_bytes(model: Model) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for (layer, role), t in model.params.items():
        raw = np.ascontiguousarray(t, dtype="<f4").tobytes()
        entries.append({"layer": layer, "role": role, "shape": list(t.shape),
                        "offset": offset, "count": int(t.size)})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"spec": model.spec.to_dict(), "entries": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(header)) + header + b"".join(chunks)


def from_bytes(buf: bytes) -> Model:
    if buf[:len(MAGIC)] != MAGIC:
        raise BadMagic("bad magic")
    pos = len(MAGIC)
    if len(buf) < pos + _LEN.size:
        raise BadHeader("missing header length")
    (hlen,) = _LEN.unpack_from(buf, pos)
    pos += _LEN.size
    if len(buf) < pos + hlen:
        raise BadHeader("truncated header")
    try:
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
        spec = ModelSpec.from_dict(header["spec"])
        entries = header["entries"]
    except (ValueError, KeyError, TypeError) as exc:
        raise BadHeader(f"unreadable header: {exc}") from exc
    payload = memoryview(buf)[pos + hlen:]

    params = ParamStore()
    for e in entries:
        shape = tuple(int(v) for v in e["shape"])
        count = int(e["count"])
        if int(np.prod(shape, dtype=np.int64)) != count:
            raise ManifestMismatch(f"{e['layer']}/{e['role']}: shape {shape} does not hold {count} floats")
        end = int(e["offset"]) + 4 * count
        if end > len(payload):
            raise TruncatedPayload("truncated payload")
        arr = np.frombuffer(payload[int(e["offset"]):end], dtype="<f4").astype(np.float32)
        params[e["layer"], e["role"]] = arr.reshape(shape)

    for layer in spec.layers:
        for role, shape in layer.param_shapes().items():
            if (layer.name, role) not in params:
                raise ManifestMismatch(f"missing entry {layer.name}/{role}")
            if params[layer.name, role].shape != shape:
                raise ManifestMismatch(
                    f"{layer.name}/{role}: manifest shape {params[layer.name, role].shape} != spec shape {shape}")
    return Model(spec, params)


def save(model: Model, path) -> None:
    Path(path).write_bytes(to_bytes(model))


def load(path) -> Model:
    return from_bytes(Path(path).read_bytes())
