"""Binary ``.ld`` checkpoint records and a directory-backed store.

Layout (little-endian)::

    magic "LDIF" | version u16 | kind u8 | dense_len u64 | iteration u64
    | covered_start u64 | covered_end u64 | ratio f64 | payload_len u64
    | crc32 u32 | payload

Full payload: ``params, moment1, moment2`` as f64 (``3 * dense_len * 8``
bytes); the state's step equals the record iteration.
Diff payload: ``k`` u32 indices then ``k`` f64 values.
Batched payload: entries of ``k u32 | ratio f64 | indices | values``.  A
record-batched file has one entry per covered iteration; an accumulated
file has a single entry spanning the whole range.
"""
from __future__ import annotations

import os
import re
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .compression import INDEX_WIDTH, VALUE_WIDTH, SparseGradient
from .errors import (
    ChainGapError,
    CorruptCheckpointError,
    FormatError,
    MissingCheckpointError,
    StorageError,
)
from .model import ModelState

MAGIC = b"LDIF"
VERSION = 1
HEADER = struct.Struct("<4sHBQQQQdQI")
HEADER_SIZE = HEADER.size  # 59
_ENTRY = struct.Struct("<Id")
_NAME_RE = re.compile(r"^ckpt_(full|diff|batch)_(\d+)\.ld$")


class Kind(IntEnum):
    FULL = 0
    DIFF = 1
    BATCHED = 2

    @property
    def tag(self) -> str:
        return ("full", "diff", "batch")[self]


@dataclass(eq=False)
class CheckpointRecord:
    kind: Kind
    iteration: int
    covered: tuple[int, int]
    payload: Union[ModelState, list]
    checksum: Optional[int] = None

    @property
    def state(self) -> ModelState:
        if self.kind != Kind.FULL:
            raise TypeError("only full records carry a model state")
        return self.payload

    @property
    def gradients(self) -> list[SparseGradient]:
        if self.kind == Kind.FULL:
            raise TypeError("full records carry no gradients")
        return self.payload

    @property
    def accumulated(self) -> bool:
        """True when one summed gradient stands for several iterations."""
        lo, hi = self.covered
        return self.kind != Kind.FULL and hi > lo and len(self.payload) == 1

    @property
    def object_id(self) -> str:
        return f"ckpt_{self.kind.tag}_{self.iteration}.ld"

    @property
    def dense_len(self) -> int:
        if self.kind == Kind.FULL:
            return self.payload.size
        return self.payload[0].dense_len


def full_record(state: ModelState, iteration: Optional[int] = None) -> CheckpointRecord:
    it = state.step if iteration is None else iteration
    if state.step != it:
        raise ValueError(f"full record iteration {it} != state step {state.step}")
    return CheckpointRecord(Kind.FULL, it, (it, it), state)


def diff_record(grad: SparseGradient) -> CheckpointRecord:
    return CheckpointRecord(Kind.DIFF, grad.iteration, (grad.iteration, grad.iteration), [grad])


def batched_record(grads: Sequence[SparseGradient], covered: Optional[tuple[int, int]] = None) -> CheckpointRecord:
    grads = list(grads)
    if not grads:
        raise ValueError("empty batch")
    if covered is None:
        covered = (grads[0].iteration, grads[-1].iteration)
    lo, hi = covered
    if len(grads) > 1:
        its = [g.iteration for g in grads]
        if its != list(range(lo, hi + 1)):
            raise ValueError(f"batched gradients {its} do not cover {covered} consecutively")
    return CheckpointRecord(Kind.BATCHED, hi, (lo, hi), grads)


# -- encoding -------------------------------------------------------------------

def _sparse_body(g: SparseGradient) -> bytes:
    if g.dense_len > 0xFFFFFFFF:
        raise ValueError("dense length exceeds u32 index range")
    return g.indices.astype("<u4").tobytes() + g.values.astype("<f8").tobytes()


def _encode_payload(rec: CheckpointRecord) -> tuple[bytes, int, float]:
    if rec.kind == Kind.FULL:
        st = rec.state
        body = b"".join(a.astype("<f8", copy=False).tobytes() for a in (st.params, st.moment1, st.moment2))
        return body, st.size, 1.0
    grads = rec.gradients
    dense_len = grads[0].dense_len
    if any(g.dense_len != dense_len for g in grads):
        raise ValueError("gradients in one record must share dense length")
    if rec.kind == Kind.DIFF:
        if len(grads) != 1:
            raise ValueError("a diff record holds exactly one gradient")
        return _sparse_body(grads[0]), dense_len, grads[0].ratio
    parts = []
    for g in grads:
        parts.append(_ENTRY.pack(g.k, g.ratio))
        parts.append(_sparse_body(g))
    ratio = sum(g.k for g in grads) / (len(grads) * dense_len)
    return b"".join(parts), dense_len, min(1.0, ratio)


def encode_record(rec: CheckpointRecord) -> bytes:
    payload, dense_len, ratio = _encode_payload(rec)
    crc = zlib.crc32(payload) & 0xFFFFFFFF
    rec.checksum = crc
    lo, hi = rec.covered
    head = HEADER.pack(MAGIC, VERSION, int(rec.kind), dense_len, rec.iteration, lo, hi, ratio, len(payload), crc)
    return head + payload


@dataclass(frozen=True)
class RecordHeader:
    kind: Kind
    dense_len: int
    iteration: int
    covered: tuple[int, int]
    ratio: float
    payload_len: int
    crc: int

    @property
    def total_bytes(self) -> int:
        return HEADER_SIZE + self.payload_len


def decode_header(raw: bytes) -> RecordHeader:
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError("unknown magic; not an .ld checkpoint")
    if len(raw) < HEADER_SIZE:
        raise CorruptCheckpointError(f"truncated header ({len(raw)} < {HEADER_SIZE} bytes)")
    magic, version, kind, dense_len, it, lo, hi, ratio, plen, crc = HEADER.unpack_from(raw)
    if version != VERSION:
        raise FormatError(f"unsupported format version {version}")
    try:
        kind = Kind(kind)
    except ValueError:
        raise FormatError(f"unknown record kind {kind}") from None
    return RecordHeader(kind, dense_len, it, (lo, hi), ratio, plen, crc)


def _decode_sparse(buf: memoryview, k: int, dense_len: int, ratio: float, iteration: int) -> SparseGradient:
    idx = np.frombuffer(buf[: 4 * k], dtype="<u4").astype(np.int64)
    val = np.frombuffer(buf[4 * k: 12 * k], dtype="<f8").astype(np.float64)
    return SparseGradient(dense_len, ratio, idx, val, iteration)


def decode_record(raw: bytes) -> CheckpointRecord:
    h = decode_header(raw)
    payload = memoryview(raw)[HEADER_SIZE:]
    if len(payload) != h.payload_len:
        raise CorruptCheckpointError(f"payload is {len(payload)} bytes, header says {h.payload_len}")
    if zlib.crc32(payload) & 0xFFFFFFFF != h.crc:
        raise CorruptCheckpointError("checksum mismatch")
    n = h.dense_len
    lo, hi = h.covered
    try:
        if h.kind == Kind.FULL:
            if h.payload_len != 24 * n:
                raise CorruptCheckpointError("full payload size does not match 3 * dense_len values")
            flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
            payload_obj = ModelState.from_flat(flat, h.iteration)
        elif h.kind == Kind.DIFF:
            if h.payload_len % (INDEX_WIDTH + VALUE_WIDTH):
                raise CorruptCheckpointError("diff payload not a whole number of entries")
            k = h.payload_len // (INDEX_WIDTH + VALUE_WIDTH)
            payload_obj = [_decode_sparse(payload, k, n, h.ratio, h.iteration)]
        else:
            entries = []
            off = 0
            while off < len(payload):
                k, ratio = _ENTRY.unpack_from(payload, off)
                off += _ENTRY.size
                end = off + k * (INDEX_WIDTH + VALUE_WIDTH)
                if end > len(payload):
                    raise CorruptCheckpointError("batched entry overruns payload")
                entries.append(_decode_sparse(payload[off:end], k, n, ratio, 0))
                off = end
            if len(entries) == 1:
                its = [hi]
            elif len(entries) == hi - lo + 1:
                its = list(range(lo, hi + 1))
            else:
                raise CorruptCheckpointError(f"{len(entries)} entries cannot cover [{lo}, {hi}]")
            payload_obj = [
                SparseGradient(g.dense_len, g.ratio, g.indices, g.values, it) for g, it in zip(entries, its)
            ]
    except (ValueError, struct.error) as exc:
        if isinstance(exc, CorruptCheckpointError):
            raise
        raise CorruptCheckpointError(f"malformed payload: {exc}") from exc
    return CheckpointRecord(h.kind, h.iteration, h.covered, payload_obj, h.crc)


# -- storage backend --------------------------------------------------------------

@dataclass
class StorageBackend:
    """Directory of ``.ld`` objects with atomic temp-then-rename writes.

    ``write_bandwidth`` (bytes/s) throttles writes to model slow storage.
    """

    root: Path
    write_bandwidth: Optional[float] = None
    fsync: bool = False
    reads: int = field(default=0, init=False)
    writes: int = field(default=0, init=False)
    bytes_written: int = field(default=0, init=False)

    def __post_init__(self):
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def path(self, object_id: str) -> Path:
        return self.root / object_id

    def write(self, rec: CheckpointRecord) -> tuple[str, int]:
        data = encode_record(rec)
        oid = rec.object_id
        final = self.path(oid)
        tmp = self.root / f".{oid}.{os.getpid()}.{threading.get_ident()}.tmp"
        with self._lock:
            try:
                with open(tmp, "wb") as fh:
                    fh.write(data)
                    fh.flush()
                    if self.fsync:
                        os.fsync(fh.fileno())
                if self.write_bandwidth:
                    time.sleep(len(data) / self.write_bandwidth)
                os.replace(tmp, final)
            except OSError as exc:
                try:
                    tmp.unlink()
                except OSError:
                    pass
                raise StorageError(f"failed to write {oid}: {exc}") from exc
            self.writes += 1
            self.bytes_written += len(data)
        return oid, len(data)

    def read_bytes(self, object_id: str) -> bytes:
        try:
            data = self.path(object_id).read_bytes()
        except FileNotFoundError:
            raise MissingCheckpointError(f"no checkpoint {object_id} in {self.root}") from None
        except OSError as exc:
            raise StorageError(f"failed to read {object_id}: {exc}") from exc
        with self._lock:
            self.reads += 1
        return data

    def read(self, object_id: str) -> CheckpointRecord:
        return decode_record(self.read_bytes(object_id))

    def read_header(self, object_id: str) -> RecordHeader:
        try:
            with open(self.path(object_id), "rb") as fh:
                raw = fh.read(HEADER_SIZE)
        except FileNotFoundError:
            raise MissingCheckpointError(f"no checkpoint {object_id} in {self.root}") from None
        return decode_header(raw)

    def object_ids(self) -> list[str]:
        return sorted(p.name for p in self.root.iterdir() if _NAME_RE.match(p.name))


def write_checkpoint(rec: CheckpointRecord, backend: StorageBackend) -> tuple[str, int]:
    return backend.write(rec)


def read_checkpoint(object_id: str, backend: StorageBackend) -> CheckpointRecord:
    return backend.read(object_id)


# -- chain listing ----------------------------------------------------------------

@dataclass(frozen=True)
class ChainEntry:
    object_id: str
    header: RecordHeader


@dataclass(frozen=True)
class Chain:
    base: ChainEntry
    diffs: list[ChainEntry]

    @property
    def end_iteration(self) -> int:
        return self.diffs[-1].header.covered[1] if self.diffs else self.base.header.iteration


def list_chain(backend: StorageBackend, up_to_iteration: int) -> Chain:
    """Latest full checkpoint at or before ``up_to_iteration`` plus the
    differential records after it, in order.

    Only records whose covered range ends by ``up_to_iteration`` qualify,
    since anything later could not have been durable at that point.
    """
    fulls, diffs = [], []
    for oid in backend.object_ids():
        h = backend.read_header(oid)
        if h.kind == Kind.FULL:
            if h.iteration <= up_to_iteration:
                fulls.append(ChainEntry(oid, h))
        elif h.covered[1] <= up_to_iteration:
            diffs.append(ChainEntry(oid, h))
    if not fulls:
        raise MissingCheckpointError(f"no full checkpoint at or before iteration {up_to_iteration}")
    base = max(fulls, key=lambda e: e.header.iteration)
    start = base.header.iteration
    after = sorted((e for e in diffs if e.header.covered[0] > start), key=lambda e: e.header.covered)
    expected = start + 1
    for e in after:
        lo, hi = e.header.covered
        if lo != expected:
            raise ChainGapError(f"chain after full@{start} expects iteration {expected}, found {e.object_id} covering [{lo}, {hi}]")
        expected = hi + 1
    return Chain(base, after)
