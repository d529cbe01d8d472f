"""Deterministic binary container for named float64 arrays plus JSON metadata.

Layout::

    b"TMIL\\x00"  magic
    u32 LE        format version
    u64 LE        header length in bytes
    header        canonical JSON: {"kind", "meta", "arrays": [{name, shape, offset, nbytes}]}
    payload       concatenated little-endian float64 array data

Writing the same content always produces the same bytes, so a
write -> read -> write round trip is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

MAGIC = b"TMIL\x00"
VERSION = 1


class ContainerError(ValueError):
    pass


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def encode(kind: str, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name], dtype="<f8")
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = canonical_json({"kind": kind, "meta": meta, "arrays": entries}).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(header)) + header + b"".join(chunks)


def decode(data: bytes) -> Tuple[str, Dict[str, np.ndarray], Dict[str, Any]]:
    if not data.startswith(MAGIC):
        raise ContainerError("not a tracemil container (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hlen].decode("utf-8"))
    base = start + hlen
    arrays = {}
    for e in header["arrays"]:
        buf = data[base + e["offset"]: base + e["offset"] + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise ContainerError(f"truncated array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(buf, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return header["kind"], arrays, header["meta"]


def write(path, kind: str, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> str:
    """Write a container and return the sha256 of its bytes."""
    data = encode(kind, arrays, meta)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read(path, kind: str = None):
    got_kind, arrays, meta = decode(Path(path).read_bytes())
    if kind is not None and got_kind != kind:
        raise ContainerError(f"{path}: expected a {kind!r} container, found {got_kind!r}")
    return arrays, meta


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
