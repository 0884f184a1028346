"""Adapter checkpoints: the binary file format, manifests and sync plans.

File layout (all integers little-endian)::

    magic "LORA" | version u32 = 1 | n_entries u32
    per entry, sorted bytewise by name:
        name_len u16 | name utf-8 | d_out u32 | d_in u32 | rank u32 | alpha f32
        A: rank*d_in f32 row-major | B: d_out*rank f32 row-major

The file carries no adapter id; the id is the file stem (``<id>.lora``) or
the URL path segment it was uploaded under.
"""

from __future__ import annotations

import os
import re
import struct
import threading
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    CorruptionError,
    DomainError,
    FormatError,
    TruncationError,
    UnknownAdapterError,
    UnsupportedVersionError,
    ValidationError,
)
from .linalg import LoraLayerDelta, as_matrix

MAGIC = b"LORA"
VERSION = 1
ADAPTER_SUFFIX = ".lora"
MANIFEST_NAME = "MANIFEST"

_ID_RE = re.compile(r"[A-Za-z0-9._-]{1,128}")
_HEADER = struct.Struct("<4sII")
_ENTRY_DIMS = struct.Struct("<IIIf")
_F32_LE = np.dtype("<f4")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1


def validate_adapter_id(adapter_id: str) -> str:
    if not isinstance(adapter_id, str) or not _ID_RE.fullmatch(adapter_id):
        raise ValidationError(
            f"invalid adapter id {adapter_id!r}: need 1-128 chars from [a-zA-Z0-9._-]"
        )
    return adapter_id


class LoraAdapter:
    """A named set of per-layer low-rank deltas."""

    def __init__(self, adapter_id: str, entries: Mapping[str, LoraLayerDelta]):
        self.adapter_id = validate_adapter_id(adapter_id)
        if not entries:
            raise ValidationError(f"adapter {adapter_id!r} has no entries")
        for layer_id, delta in entries.items():
            if not isinstance(delta, LoraLayerDelta):
                raise ValidationError(f"entry {layer_id!r} is not a LoraLayerDelta")
            if not layer_id or len(layer_id.encode("utf-8")) > 0xFFFF:
                raise ValidationError(f"bad layer id {layer_id!r}")
        self.entries = dict(sorted(entries.items(), key=lambda kv: kv[0].encode("utf-8")))

    @property
    def n_params(self) -> int:
        return sum(d.n_params for d in self.entries.values())

    @property
    def ranks(self) -> dict[str, int]:
        return {k: d.rank for k, d in self.entries.items()}

    def __eq__(self, other):
        if not isinstance(other, LoraAdapter):
            return NotImplemented
        return self.adapter_id == other.adapter_id and self.entries == other.entries

    __hash__ = None  # type: ignore[assignment]

    def __repr__(self):
        return f"LoraAdapter({self.adapter_id!r}, layers={list(self.entries)})"


# -- serialization ----------------------------------------------------------


def serialize_adapter(adapter: LoraAdapter) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(adapter.entries))]
    for name, delta in adapter.entries.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(_ENTRY_DIMS.pack(delta.d_out, delta.d_in, delta.rank, delta.alpha))
        parts.append(delta.a.astype(_F32_LE).tobytes())
        parts.append(delta.b.astype(_F32_LE).tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int, what: str) -> memoryview:
        end = self.pos + n
        if end > len(self.data):
            raise TruncationError(
                f"truncated {what}: need {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}",
                offset=self.pos,
            )
        chunk = self.data[self.pos : end]
        self.pos = end
        return chunk


def deserialize_adapter(data: bytes, adapter_id: str) -> LoraAdapter:
    data = bytes(data)
    if len(data) >= 4 and data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    r = _Reader(data)
    magic, version, n_entries = _HEADER.unpack(r.take(_HEADER.size, "header"))
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}")
    if n_entries == 0:
        raise CorruptionError("adapter file declares zero entries")

    entries: dict[str, LoraLayerDelta] = {}
    prev = None
    for _ in range(n_entries):
        entry_offset = r.pos
        (name_len,) = struct.unpack("<H", r.take(2, "name length"))
        raw_name = bytes(r.take(name_len, "layer name"))
        try:
            name = raw_name.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CorruptionError(f"layer name at offset {entry_offset} is not utf-8") from exc
        if not name or name in entries:
            raise CorruptionError(f"empty or duplicate layer name {name!r}")
        if prev is not None and raw_name < prev:
            raise CorruptionError(f"entries not sorted at {name!r}")
        prev = raw_name
        d_out, d_in, rank, alpha = _ENTRY_DIMS.unpack(r.take(_ENTRY_DIMS.size, "dims"))
        if rank == 0 or d_out == 0 or d_in == 0 or rank > min(d_in, d_out):
            raise CorruptionError(
                f"inconsistent dims for {name!r}: d_out={d_out} d_in={d_in} rank={rank}"
            )
        a = np.frombuffer(r.take(4 * rank * d_in, f"A payload of {name!r}"), dtype=_F32_LE)
        b = np.frombuffer(r.take(4 * d_out * rank, f"B payload of {name!r}"), dtype=_F32_LE)
        try:
            entries[name] = LoraLayerDelta(
                as_matrix(a.reshape(rank, d_in), "A"),
                as_matrix(b.reshape(d_out, rank), "B"),
                alpha,
                rank,
            )
        except (ValidationError, DomainError) as exc:
            raise CorruptionError(f"entry {name!r}: {exc}") from exc
    if r.pos != len(data):
        raise CorruptionError(
            f"{len(data) - r.pos} trailing bytes after last entry at offset {r.pos}"
        )
    return LoraAdapter(adapter_id, entries)


def payload_bytes(adapter: LoraAdapter) -> int:
    """Bytes of A/B payload in the serialized form (headers excluded)."""
    return 4 * adapter.n_params


# -- size accounting ----------------------------------------------------------


def _positive_int(value, name: str) -> int:
    if isinstance(value, bool):
        raise DomainError(f"{name} must be a positive count")
    if isinstance(value, float):
        if not value.is_integer():
            raise DomainError(f"{name} must be integral, got {value}")
        value = int(value)
    if not isinstance(value, (int, np.integer)) or value <= 0:
        raise DomainError(f"{name} must be a positive count, got {value!r}")
    return int(value)


def estimate_full_checkpoint_bytes(n_params, bytes_per_param) -> int:
    return _positive_int(n_params, "n_params") * _positive_int(bytes_per_param, "bytes_per_param")


def estimate_adapter_bytes(layers: Iterable[tuple[int, int]], rank, bytes_per_param) -> int:
    rank = _positive_int(rank, "rank")
    bpp = _positive_int(bytes_per_param, "bytes_per_param")
    total = 0
    for d_in, d_out in layers:
        total += rank * (_positive_int(d_in, "d_in") + _positive_int(d_out, "d_out"))
    return total * bpp


# -- digests and manifests ------------------------------------------------------


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


@dataclass(frozen=True)
class ManifestRecord:
    adapter_id: str
    digest: int
    size: int

    @property
    def hex_digest(self) -> str:
        return f"{self.digest:016x}"


class Manifest:
    """Adapter id -> (content digest, byte size)."""

    def __init__(self, records: Iterable[ManifestRecord] = ()):
        self.records: dict[str, ManifestRecord] = {}
        for rec in records:
            self.add(rec)

    def add(self, rec: ManifestRecord) -> None:
        validate_adapter_id(rec.adapter_id)
        if rec.adapter_id in self.records:
            raise ValidationError(f"duplicate manifest id {rec.adapter_id!r}")
        self.records[rec.adapter_id] = rec

    def put(self, rec: ManifestRecord) -> None:
        self.records[rec.adapter_id] = rec

    def remove(self, adapter_id: str) -> None:
        self.records.pop(adapter_id, None)

    @classmethod
    def from_blobs(cls, blobs: Mapping[str, bytes]) -> "Manifest":
        return cls(ManifestRecord(k, fnv1a64(v), len(v)) for k, v in blobs.items())

    def digests(self) -> dict[str, int]:
        return {k: r.digest for k, r in self.records.items()}

    def __contains__(self, adapter_id) -> bool:
        return adapter_id in self.records

    def __len__(self) -> int:
        return len(self.records)

    def __eq__(self, other):
        if not isinstance(other, Manifest):
            return NotImplemented
        return self.records == other.records

    def to_text(self) -> str:
        lines = [
            f"{r.adapter_id} {r.hex_digest} {r.size}\n"
            for r in sorted(self.records.values(), key=lambda r: r.adapter_id)
        ]
        return "".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "Manifest":
        m = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            fields = line.split()
            if len(fields) != 3:
                raise FormatError(f"manifest line {lineno}: expected 3 fields, got {len(fields)}")
            adapter_id, digest, size = fields
            try:
                rec = ManifestRecord(adapter_id, int(digest, 16), int(size))
            except ValueError as exc:
                raise FormatError(f"manifest line {lineno}: {exc}") from exc
            m.add(rec)
        return m

    @classmethod
    def load(cls, path) -> "Manifest":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def save(self, path) -> None:
        _atomic_write(Path(path), self.to_text().encode("utf-8"))


def diff_sync_plan(local: Manifest, remote: Manifest) -> list[str]:
    """Ids to fetch so that ``local`` agrees with ``remote``: new or changed."""
    plan = []
    for adapter_id, rec in remote.records.items():
        mine = local.records.get(adapter_id)
        if mine is None or mine.digest != rec.digest:
            plan.append(adapter_id)
    return sorted(plan)


# -- on-disk registry -----------------------------------------------------------


def _atomic_write(path: Path, data: bytes) -> None:
    tmp = path.with_name(f".{path.name}.tmp.{os.getpid()}.{threading.get_ident()}")
    tmp.write_bytes(data)
    os.replace(tmp, path)


class AdapterRegistry:
    """A directory of ``<id>.lora`` files plus a ``MANIFEST`` file.

    Writes for one id are serialized; the manifest is rewritten under a
    registry-wide lock after every change.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._id_locks: dict[str, threading.Lock] = {}
        self._manifest = self._scan()
        self._manifest.save(self.manifest_path)

    @property
    def manifest_path(self) -> Path:
        return self.root / MANIFEST_NAME

    def _scan(self) -> Manifest:
        blobs = {}
        for p in sorted(self.root.glob(f"*{ADAPTER_SUFFIX}")):
            stem = p.name[: -len(ADAPTER_SUFFIX)]
            if _ID_RE.fullmatch(stem):
                blobs[stem] = p.read_bytes()
        return Manifest.from_blobs(blobs)

    def _id_lock(self, adapter_id: str) -> threading.Lock:
        with self._lock:
            return self._id_locks.setdefault(adapter_id, threading.Lock())

    def path_for(self, adapter_id: str) -> Path:
        return self.root / f"{validate_adapter_id(adapter_id)}{ADAPTER_SUFFIX}"

    def ids(self) -> list[str]:
        with self._lock:
            return sorted(self._manifest.records)

    def manifest(self) -> Manifest:
        with self._lock:
            return Manifest(self._manifest.records.values())

    def __contains__(self, adapter_id) -> bool:
        with self._lock:
            return adapter_id in self._manifest

    def put_bytes(self, adapter_id: str, data: bytes) -> LoraAdapter:
        """Validate ``data`` as an adapter file and store it, replacing any old copy."""
        adapter = deserialize_adapter(data, adapter_id)
        with self._id_lock(adapter_id):
            _atomic_write(self.path_for(adapter_id), bytes(data))
            with self._lock:
                self._manifest.put(ManifestRecord(adapter_id, fnv1a64(data), len(data)))
                self._manifest.save(self.manifest_path)
        return adapter

    def put(self, adapter: LoraAdapter) -> bytes:
        data = serialize_adapter(adapter)
        self.put_bytes(adapter.adapter_id, data)
        return data

    def get_bytes(self, adapter_id: str) -> bytes:
        with self._id_lock(adapter_id):
            path = self.path_for(adapter_id)
            if not path.exists():
                raise UnknownAdapterError(adapter_id)
            return path.read_bytes()

    def get(self, adapter_id: str) -> LoraAdapter:
        return deserialize_adapter(self.get_bytes(adapter_id), adapter_id)

    def remove(self, adapter_id: str) -> None:
        with self._id_lock(adapter_id):
            path = self.path_for(adapter_id)
            if not path.exists():
                raise UnknownAdapterError(adapter_id)
            path.unlink()
            with self._lock:
                self._manifest.remove(adapter_id)
                self._manifest.save(self.manifest_path)

    def verify(self) -> list[str]:
        """Ids whose stored bytes no longer match the manifest digest."""
        bad = []
        for adapter_id, rec in self.manifest().records.items():
            data = self.get_bytes(adapter_id)
            if fnv1a64(data) != rec.digest or len(data) != rec.size:
                bad.append(adapter_id)
        return bad
