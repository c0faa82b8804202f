"""In-memory utterance records and their length-prefixed binary file format.

File layout (little-endian)::

    magic "TMRC" | version u32 | count u32
    count x ( body_len u32 | body )

    body: kind u8 | uid u32 | T u32 | H u16 | W u16 | fbank_frames u32 | fbank_dim u16
          | L u32 | target_len u32 | flags u8
          | visual f32[T*H*W]? | audio f32[fbank_frames*fbank_dim]?
          | phonemes u16[L]? | durations u16[L]? | target u16[target_len]?

``flags`` bits: 1 visual, 2 audio, 4 phonemes, 8 durations, 16 target.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

KIND_CODES = {"AV": 0, "A": 1, "AP": 2, "P": 3}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}
MAGIC = b"TMRC"
VERSION = 1

_HEAD = struct.Struct("<BIIHHIHIIB")
_F_VISUAL, _F_AUDIO, _F_PHON, _F_DUR, _F_TARGET = 1, 2, 4, 8, 16

# Which inputs each corpus kind carries.
KIND_INPUTS = {
    "AV": (True, True, False),
    "A": (False, True, False),
    "AP": (False, True, True),
    "P": (False, False, True),
}


class RecordFormatError(ValueError):
    pass


@dataclass
class Record:
    """One utterance.  ``visual`` is (T, H, W), ``audio`` is (4T, 26) filterbank frames,
    ``phonemes``/``durations`` are per-phoneme, ``target`` is a frame-level unit sequence."""

    uid: int
    kind: str
    visual: np.ndarray | None = None
    audio: np.ndarray | None = None
    phonemes: np.ndarray | None = None
    durations: np.ndarray | None = None
    target: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise RecordFormatError(f"unknown record kind {self.kind!r}")

    @property
    def frames(self) -> int:
        if self.visual is not None:
            return int(self.visual.shape[0])
        if self.audio is not None:
            return -(-int(self.audio.shape[0]) // 4)
        if self.target is not None:
            return int(len(self.target))
        if self.durations is not None:
            return int(np.sum(self.durations))
        return 0

    def check_kind(self) -> None:
        """Enforce the modality layout implied by ``kind``."""
        want_v, want_a, want_p = KIND_INPUTS[self.kind]
        have = (self.visual is not None, self.audio is not None, self.phonemes is not None)
        if have != (want_v, want_a, want_p):
            names = ("visual", "audio", "phonemes")
            detail = ", ".join(f"{n}={'yes' if h else 'no'}" for n, h in zip(names, have))
            raise RecordFormatError(f"{self.kind} record {self.uid} has inputs {detail}")


def encode_record(r: Record) -> bytes:
    flags = 0
    parts = []
    t = h = w = 0
    if r.visual is not None:
        flags |= _F_VISUAL
        t, h, w = r.visual.shape
        parts.append(np.asarray(r.visual, dtype="<f4").tobytes())
    n_fb, fb_dim = 0, 0
    if r.audio is not None:
        flags |= _F_AUDIO
        n_fb, fb_dim = r.audio.shape
        parts.append(np.asarray(r.audio, dtype="<f4").tobytes())
    n_ph = 0
    if r.phonemes is not None:
        flags |= _F_PHON
        n_ph = len(r.phonemes)
        parts.append(np.asarray(r.phonemes, dtype="<u2").tobytes())
    if r.durations is not None:
        flags |= _F_DUR
        if r.phonemes is not None and len(r.durations) != n_ph:
            raise RecordFormatError(f"record {r.uid}: {len(r.durations)} durations for {n_ph} phonemes")
        n_ph = len(r.durations)
        parts.append(np.asarray(r.durations, dtype="<u2").tobytes())
    n_tg = 0
    if r.target is not None:
        flags |= _F_TARGET
        n_tg = len(r.target)
        parts.append(np.asarray(r.target, dtype="<u2").tobytes())
    head = _HEAD.pack(KIND_CODES[r.kind], r.uid, r.frames, h, w, n_fb, fb_dim, n_ph, n_tg, flags)
    return head + b"".join(parts)


def decode_record(body: bytes) -> Record:
    if len(body) < _HEAD.size:
        raise RecordFormatError("record body shorter than its header")
    kind, uid, t, h, w, n_fb, fb_dim, n_ph, n_tg, flags = _HEAD.unpack_from(body)
    off = _HEAD.size

    def take(dtype, count):
        nonlocal off
        nbytes = np.dtype(dtype).itemsize * count
        if off + nbytes > len(body):
            raise RecordFormatError(f"record {uid} truncated")
        arr = np.frombuffer(body, dtype=dtype, count=count, offset=off)
        off += nbytes
        return arr

    visual = take("<f4", t * h * w).astype(np.float64).reshape(t, h, w) if flags & _F_VISUAL else None
    audio = take("<f4", n_fb * fb_dim).astype(np.float64).reshape(n_fb, fb_dim) if flags & _F_AUDIO else None
    phon = take("<u2", n_ph).astype(np.int64) if flags & _F_PHON else None
    dur = take("<u2", n_ph).astype(np.int64) if flags & _F_DUR else None
    target = take("<u2", n_tg).astype(np.int64) if flags & _F_TARGET else None
    if off != len(body):
        raise RecordFormatError(f"record {uid} has {len(body) - off} trailing bytes")
    if kind not in KIND_NAMES:
        raise RecordFormatError(f"record {uid} has unknown kind code {kind}")
    return Record(uid, KIND_NAMES[kind], visual, audio, phon, dur, target)


def write_records(path, records) -> None:
    records = list(records)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for r in records:
        body = encode_record(r)
        chunks.append(struct.pack("<I", len(body)))
        chunks.append(body)
    Path(path).write_bytes(b"".join(chunks))


def read_records(path) -> list[Record]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise RecordFormatError(f"{path}: not a record file")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise RecordFormatError(f"{path}: record format version {version}, expected {VERSION}")
    off = 12
    out = []
    for _ in range(count):
        if off + 4 > len(raw):
            raise RecordFormatError(f"{path}: truncated")
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        if off + n > len(raw):
            raise RecordFormatError(f"{path}: truncated")
        out.append(decode_record(raw[off : off + n]))
        off += n
    if off != len(raw):
        raise RecordFormatError(f"{path}: trailing bytes after {count} records")
    return out
