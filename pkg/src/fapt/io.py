"""Binary dataset/checkpoint formats and the flat key=value config format.

Dataset file (little-endian)::

    b"FAPT" | u32 version=1 | u32 T, F, N, M, n_samples
    per sample: u32 ue_id | f64 speed_mps | u32 t0_slot | u64 seed
                past (T,N,M) | future (F,N,M) | reference (F,N,M)
    tensors are f32 interleaved (re, im), row-major [time][n][m]

Checkpoint file (little-endian)::

    b"FAPC" | u32 version=1 | u32 len | config JSON (utf-8) | u32 n_entries
    per entry: u32 name_len | name | u8 dtype (0=f32, 1=f64) | u8 flags
               | u32 ndim | u64 * ndim shape | payload
    flags: bit0 trainable, bit1 adapter, bit2 buffer (non-parameter state)
"""

import json
import os
import struct
import tempfile
from dataclasses import dataclass
from typing import Dict, Iterable

import numpy as np

from .scenario import ChannelDataset

DATASET_MAGIC = b"FAPT"
DATASET_VERSION = 1
CHECKPOINT_MAGIC = b"FAPC"
CHECKPOINT_VERSION = 1

_HEADER = struct.Struct("<4sIIIIII")
_META = struct.Struct("<IdIQ")
# refuse headers that would describe more than this many payload bytes
MAX_PAYLOAD_BYTES = 1 << 40


class FormatError(ValueError):
    """Base class for malformed dataset/checkpoint files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class DimensionOverflowError(FormatError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

def _interleave(x: np.ndarray) -> bytes:
    out = np.empty(x.shape + (2,), dtype="<f4")
    out[..., 0] = x.real
    out[..., 1] = x.imag
    return out.tobytes()


def encode_dataset(ds: ChannelDataset) -> bytes:
    t_in, f_out, n, m = ds.dims
    parts = [_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, t_in, f_out, n, m, len(ds))]
    for i in range(len(ds)):
        parts.append(_META.pack(int(ds.ue_id[i]), float(ds.speed[i]), int(ds.t0_slot[i]),
                                int(ds.seed[i])))
        parts.append(_interleave(ds.past[i]))
        parts.append(_interleave(ds.future[i]))
        parts.append(_interleave(ds.reference[i]))
    return b"".join(parts)


def write_dataset(path, ds: ChannelDataset) -> None:
    atomic_write_bytes(path, encode_dataset(ds))


def decode_dataset(buf: bytes) -> ChannelDataset:
    if len(buf) < 4 or buf[:4] != DATASET_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {DATASET_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError("file shorter than the dataset header")
    _, version, t_in, f_out, n, m, count = _HEADER.unpack_from(buf, 0)
    if version != DATASET_VERSION:
        raise VersionMismatchError(f"dataset format version {version}, expected {DATASET_VERSION}")
    table = n * m
    per_sample = _META.size + 8 * table * (t_in + 2 * f_out)
    total = per_sample * count
    if total > MAX_PAYLOAD_BYTES or (count and per_sample > MAX_PAYLOAD_BYTES):
        raise DimensionOverflowError(
            f"header dims T={t_in} F={f_out} N={n} M={m} x {count} samples exceed the size limit")
    if len(buf) - _HEADER.size < total:
        raise TruncatedPayloadError(
            f"payload has {len(buf) - _HEADER.size} bytes, header implies {total}")

    ds = ChannelDataset.empty(t_in, f_out, n, m)
    if count == 0:
        return ds
    ue = np.empty(count, np.uint32)
    speed = np.empty(count, np.float64)
    t0 = np.empty(count, np.uint32)
    seed = np.empty(count, np.uint64)
    past = np.empty((count, t_in, n, m), np.complex64)
    future = np.empty((count, f_out, n, m), np.complex64)
    ref = np.empty((count, f_out, n, m), np.complex64)
    off = _HEADER.size

    def take(frames):
        nonlocal off
        raw = np.frombuffer(buf, dtype="<f4", count=2 * frames * table, offset=off)
        off += 8 * frames * table
        pairs = raw.reshape(frames, n, m, 2)
        return pairs[..., 0] + 1j * pairs[..., 1]

    for i in range(count):
        ue[i], speed[i], t0[i], seed[i] = _META.unpack_from(buf, off)
        off += _META.size
        past[i] = take(t_in)
        future[i] = take(f_out)
        ref[i] = take(f_out)
    return ChannelDataset(past, future, ref, ue, speed, t0, seed)


def read_dataset(path) -> ChannelDataset:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())


def read_dataset_header(path):
    """``(T, F, N, M, n_samples)`` from a dataset file without loading tensors."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if head[:4] != DATASET_MAGIC:
        raise BadMagicError(f"bad magic {head[:4]!r}")
    if len(head) < _HEADER.size:
        raise TruncatedPayloadError("file shorter than the dataset header")
    _, version, *dims = _HEADER.unpack(head)
    if version != DATASET_VERSION:
        raise VersionMismatchError(f"dataset format version {version}")
    return tuple(dims)


# ---------------------------------------------------------------------------
# checkpoint
# ---------------------------------------------------------------------------

FLAG_TRAINABLE = 1
FLAG_ADAPTER = 2
FLAG_BUFFER = 4
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TAGS = {np.dtype("float32"): 0, np.dtype("float64"): 1}


@dataclass
class TensorEntry:
    name: str
    value: np.ndarray
    flags: int = 0


def encode_checkpoint(config: dict, entries: Iterable[TensorEntry]) -> bytes:
    entries = list(entries)
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(cfg)), cfg,
             struct.pack("<I", len(entries))]
    for e in entries:
        arr = np.asarray(e.value)
        tag = _DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            raise TypeError(f"unsupported dtype {arr.dtype} for {e.name}")
        name = e.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<BBI", tag, e.flags, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes):
    """Return ``(config dict, {name: TensorEntry})`` preserving file order."""
    if buf[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    off = 4

    def unpack(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(buf):
            raise TruncatedPayloadError("checkpoint ends inside a header field")
        vals = struct.unpack_from(fmt, buf, off)
        off += size
        return vals

    version, cfg_len = unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if off + cfg_len > len(buf):
        raise TruncatedPayloadError("checkpoint ends inside the config block")
    config = json.loads(buf[off:off + cfg_len].decode("utf-8"))
    off += cfg_len
    (count,) = unpack("<I")
    entries: Dict[str, TensorEntry] = {}
    for _ in range(count):
        (name_len,) = unpack("<I")
        if off + name_len > len(buf):
            raise TruncatedPayloadError("checkpoint ends inside a parameter name")
        name = buf[off:off + name_len].decode("utf-8")
        off += name_len
        tag, flags, ndim = unpack("<BBI")
        if tag not in _DTYPES:
            raise FormatError(f"unknown dtype tag {tag} for {name}")
        shape = unpack(f"<{ndim}Q") if ndim else ()
        size = int(np.prod(shape, dtype=np.float64)) if ndim else 1
        nbytes = size * _DTYPES[tag].itemsize
        if nbytes > MAX_PAYLOAD_BYTES:
            raise DimensionOverflowError(f"{name}: shape {shape} exceeds the size limit")
        if off + nbytes > len(buf):
            raise TruncatedPayloadError(f"checkpoint ends inside tensor {name}")
        arr = np.frombuffer(buf, dtype=_DTYPES[tag], count=size, offset=off).reshape(shape).copy()
        off += nbytes
        entries[name] = TensorEntry(name, arr, flags)
    return config, entries


def write_checkpoint(path, config: dict, entries) -> None:
    atomic_write_bytes(path, encode_checkpoint(config, entries))


def read_checkpoint(path):
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())


# ---------------------------------------------------------------------------
# key=value config files
# ---------------------------------------------------------------------------

def parse_kv_text(text: str, allowed=None) -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys raise."""
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if allowed is not None and key not in allowed:
            raise ValueError(f"line {lineno}: unknown key {key!r}")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv_file(path, allowed=None) -> Dict[str, str]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_kv_text(fh.read(), allowed)
