"""Versioned binary checkpoints with a trailing SHA-256 over the whole payload.

Layout (little-endian)::

    "TMCK" | version u32 | header_len u32 | header (UTF-8 JSON, sorted keys)
    | block_count u32 | blocks | sha256(everything before) [32 bytes]

    block: name_len u16 | name | ndim u8 | dims u32[ndim] | f64 data
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TMCK"
VERSION = 1
_DIGEST = 32


class IntegrityError(RuntimeError):
    pass


class MigrationError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    header: dict
    blocks: dict = field(default_factory=dict)  # name -> ndarray, insertion order preserved

    @property
    def step(self) -> int:
        return int(self.header.get("step", 0))

    def group(self, prefix: str) -> dict:
        cut = len(prefix) + 1
        return {k[cut:]: v for k, v in self.blocks.items() if k.startswith(prefix + "/")}


def to_bytes(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header, sort_keys=True, separators=(",", ":")).encode()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(header)), header, struct.pack("<I", len(ckpt.blocks))]
    for name, arr in ckpt.blocks.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode()
        chunks.append(struct.pack("<HB", len(raw), arr.ndim) + raw)
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    payload = b"".join(chunks)
    return payload + hashlib.sha256(payload).digest()


def from_bytes(raw: bytes) -> Checkpoint:
    if len(raw) < 12 + _DIGEST or raw[:4] != MAGIC:
        raise IntegrityError("not a checkpoint or truncated header")
    payload, digest = raw[:-_DIGEST], raw[-_DIGEST:]
    if hashlib.sha256(payload).digest() != digest:
        raise IntegrityError("checkpoint checksum mismatch (corrupted or truncated file)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise MigrationError(f"checkpoint format version {version} cannot be loaded by reader version {VERSION}")
    (hlen,) = struct.unpack_from("<I", payload, 8)
    off = 12
    header = json.loads(payload[off : off + hlen].decode())
    off += hlen
    (count,) = struct.unpack_from("<I", payload, off)
    off += 4
    blocks = {}
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<HB", payload, off)
        off += 3
        name = payload[off : off + nlen].decode()
        off += nlen
        shape = struct.unpack_from(f"<{ndim}I", payload, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(payload, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(payload):
        raise IntegrityError("checkpoint has unparsed trailing bytes")
    return Checkpoint(header, blocks)


def save(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
