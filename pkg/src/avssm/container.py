"""Versioned tensor container used for datasets and checkpoints.

Layout (all little-endian)::

    b"<MAGIC> v<version>\\n"           ASCII header line
    uint64 manifest length
    manifest                           UTF-8 JSON, keys sorted
    payload                            raw tensor bytes, concatenated

The manifest lists each tensor's name, dtype, shape, offset and byte count,
carries free-form metadata and the SHA-256 of the payload. Readers reject a
wrong magic, an unknown version, a short file or a checksum mismatch.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, Mapping, Tuple

import numpy as np

ALLOWED_DTYPES = ("<f4", "<f8", "<i8")


class FormatError(ValueError):
    """Malformed or truncated file."""


class VersionError(FormatError):
    """File carries a format version this reader does not understand."""


class IntegrityError(FormatError):
    """Payload checksum does not match the manifest."""


def dumps(magic: str, version: int, tensors: Mapping[str, np.ndarray], meta: Mapping = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in tensors:
        arr = np.asarray(tensors[name])
        dtype = arr.dtype.newbyteorder("<").str
        if dtype not in ALLOWED_DTYPES:
            raise TypeError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes()
        entries.append({"name": name, "dtype": dtype, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "format": magic,
        "version": version,
        "tensors": entries,
        "meta": dict(meta or {}),
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    header = f"{magic} v{version}\n".encode("ascii")
    return header + struct.pack("<Q", len(mbytes)) + mbytes + payload


def loads(data: bytes, magic: str, version: int) -> Tuple[Dict[str, np.ndarray], dict]:
    nl = data.find(b"\n", 0, 128)
    if nl < 0:
        raise FormatError("missing header line")
    try:
        file_magic, file_version = data[:nl].decode("ascii").rsplit(" v", 1)
        file_version = int(file_version)
    except (UnicodeDecodeError, ValueError):
        raise FormatError("unreadable header line") from None
    if file_magic != magic:
        raise FormatError(f"expected a {magic} file, found {file_magic!r}")
    if file_version != version:
        raise VersionError(f"{magic} format version {file_version} is not supported (expected {version})")
    pos = nl + 1
    if len(data) < pos + 8:
        raise FormatError("truncated before manifest length")
    (mlen,) = struct.unpack("<Q", data[pos:pos + 8])
    pos += 8
    if len(data) < pos + mlen:
        raise FormatError("truncated manifest")
    try:
        manifest = json.loads(data[pos:pos + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt manifest: {exc}") from None
    pos += mlen
    payload = data[pos:]
    if len(payload) != manifest["payload_bytes"]:
        raise FormatError(f"payload has {len(payload)} bytes, manifest says {manifest['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise IntegrityError("payload checksum mismatch")
    tensors = {}
    for ent in manifest["tensors"]:
        if ent["dtype"] not in ALLOWED_DTYPES:
            raise FormatError(f"tensor {ent['name']!r} has unsupported dtype {ent['dtype']}")
        raw = payload[ent["offset"]:ent["offset"] + ent["nbytes"]]
        arr = np.frombuffer(raw, dtype=ent["dtype"])
        if arr.size != int(np.prod(ent["shape"], dtype=np.int64)):
            raise FormatError(f"tensor {ent['name']!r} size does not match its shape")
        tensors[ent["name"]] = arr.reshape(ent["shape"]).astype(arr.dtype.newbyteorder("="))
    return tensors, manifest["meta"]


def save(path, magic: str, version: int, tensors, meta=None) -> None:
    Path(path).write_bytes(dumps(magic, version, tensors, meta))


def load(path, magic: str, version: int):
    return loads(Path(path).read_bytes(), magic, version)
