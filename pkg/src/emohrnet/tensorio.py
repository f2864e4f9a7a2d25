"""Binary container: magic, u32 version, u64 header length, u32 header CRC32,
JSON header, f64 payload.

The header lists tensors as ``{"name", "shape", "offset"}`` (byte offsets
into the payload) and carries the CRC32 of the whole payload.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"EMOHRNET"
VERSION = 1


class ContainerError(ValueError):
    pass


class BadMagic(ContainerError):
    pass


class UnsupportedVersion(ContainerError):
    pass


class Truncated(ContainerError):
    pass


class ChecksumMismatch(ContainerError):
    pass


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")


def dumps(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    payload = b"".join(chunks)
    head = dict(header, tensors=manifest, payload_bytes=len(payload), crc32=zlib.crc32(payload))
    hbytes = canonical_json(head)
    return MAGIC + struct.pack("<IQI", VERSION, len(hbytes), zlib.crc32(hbytes)) + hbytes + payload


def loads(blob: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(blob) < len(MAGIC) or blob[: len(MAGIC)] != MAGIC:
        raise BadMagic("not an EMOHRNET container (bad magic)")
    pos = len(MAGIC)
    if len(blob) < pos + 16:
        raise Truncated("container ends inside the preamble")
    version, hlen, hcrc = struct.unpack("<IQI", blob[pos : pos + 16])
    if version != VERSION:
        raise UnsupportedVersion(f"container version {version}, this build reads {VERSION}")
    pos += 16
    if len(blob) < pos + hlen:
        raise Truncated("container ends inside the JSON header")
    hbytes = blob[pos : pos + hlen]
    if zlib.crc32(hbytes) != hcrc:
        raise ChecksumMismatch("header CRC32 mismatch")
    header = json.loads(hbytes.decode("utf-8"))
    payload = blob[pos + hlen :]
    if len(payload) != header.get("payload_bytes"):
        raise Truncated(f"payload is {len(payload)} bytes, header says {header.get('payload_bytes')}")
    if zlib.crc32(payload) != header.get("crc32"):
        raise ChecksumMismatch("payload CRC32 mismatch")
    tensors = {}
    for t in header.pop("tensors"):
        n = int(np.prod(t["shape"], dtype=np.int64)) if t["shape"] else 1
        a = np.frombuffer(payload, dtype="<f8", count=n, offset=t["offset"])
        tensors[t["name"]] = a.reshape(t["shape"]).astype(np.float64)
    header.pop("payload_bytes")
    header.pop("crc32")
    return header, tensors


def save(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(header, tensors))


def load(path) -> tuple[dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
