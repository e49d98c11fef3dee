"""Binary tensor blobs with a JSON sidecar.

Blob layout (all integers little-endian ``uint32``)::

    magic  b"MRTB"
    version            (1)
    count              number of records
    record * count:
        rank
        extent * rank
        dtype code         (1 = float32, 2 = float64)
        values             rank-major (C order), little-endian

The sidecar ``<stem>.json`` next to the blob maps each name to the byte
offset of its record, plus shape, dtype, kind and a SHA-256 of the whole blob.
Readers check the digest and every record header against the sidecar, so a
truncated or corrupted pair raises :class:`FormatError` and yields nothing.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"MRTB"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


def sidecar_path(blob_path) -> Path:
    return Path(blob_path).with_suffix(".json")


def encode(tensors: dict[str, np.ndarray]) -> tuple[bytes, list[dict]]:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    offset = sum(len(p) for p in parts)
    entries = []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise FormatError(f"{name}: unsupported dtype {arr.dtype}")
        header = struct.pack(f"<I{arr.ndim}II", arr.ndim, *arr.shape, code)
        payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "offset": offset, "shape": list(arr.shape), "dtype": arr.dtype.name})
        parts += [header, payload]
        offset += len(header) + len(payload)
    return b"".join(parts), entries


def decode(blob: bytes, entries: list[dict]) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise FormatError("bad magic: not a tensor blob")
    if len(blob) < 12:
        raise FormatError("blob truncated in header")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise FormatError(f"unsupported blob version {version}")
    if count != len(entries):
        raise FormatError(f"blob holds {count} records, sidecar lists {len(entries)}")
    out: dict[str, np.ndarray] = {}
    for entry in entries:
        name, pos = entry["name"], int(entry["offset"])
        try:
            (rank,) = struct.unpack_from("<I", blob, pos)
            dims = struct.unpack_from(f"<{rank}I", blob, pos + 4)
            (code,) = struct.unpack_from("<I", blob, pos + 4 + 4 * rank)
        except struct.error as exc:
            raise FormatError(f"{name}: record header truncated") from exc
        if list(dims) != list(entry["shape"]):
            raise FormatError(f"{name}: blob shape {list(dims)} != sidecar shape {entry['shape']}")
        dtype = _DTYPES.get(code)
        if dtype is None or dtype.name != np.dtype(entry["dtype"]).newbyteorder("<").name:
            raise FormatError(f"{name}: dtype code {code} disagrees with sidecar {entry['dtype']}")
        start = pos + 8 + 4 * rank
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        if start + nbytes > len(blob):
            raise FormatError(f"{name}: values truncated")
        arr = np.frombuffer(blob, dtype=dtype, count=nbytes // dtype.itemsize, offset=start)
        out[name] = arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)
    return out


def write_tensors(path, tensors: dict[str, np.ndarray], kinds: dict[str, str] | None = None, meta=None) -> Path:
    """Write ``tensors`` to ``path`` and the sidecar next to it. Returns the sidecar path."""
    path = Path(path)
    blob, entries = encode(tensors)
    for e in entries:
        e["kind"] = (kinds or {}).get(e["name"], "tensor")
    side = {
        "format": "miniresnet-tensors",
        "version": VERSION,
        "blob": path.name,
        "bytes": len(blob),
        "sha256": hashlib.sha256(blob).hexdigest(),
        "endianness": "little",
        "entries": entries,
        "meta": meta or {},
    }
    path.write_bytes(blob)
    sc = sidecar_path(path)
    sc.write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")
    return sc


def read_sidecar(path) -> dict:
    sc = sidecar_path(path)
    try:
        side = json.loads(sc.read_text())
    except FileNotFoundError as exc:
        raise FormatError(f"missing sidecar {sc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt sidecar {sc}: {exc}") from exc
    if side.get("format") != "miniresnet-tensors":
        raise FormatError(f"{sc} is not a tensor sidecar")
    return side


def read_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a blob + sidecar pair. Returns (tensors, sidecar)."""
    path = Path(path)
    side = read_sidecar(path)
    try:
        blob = path.read_bytes()
    except FileNotFoundError as exc:
        raise FormatError(f"missing blob {path}") from exc
    if len(blob) != side["bytes"]:
        raise FormatError(f"{path}: expected {side['bytes']} bytes, found {len(blob)} (truncated?)")
    if hashlib.sha256(blob).hexdigest() != side["sha256"]:
        raise FormatError(f"{path}: checksum mismatch")
    return decode(blob, side["entries"]), side
