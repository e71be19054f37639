"""Versioned binary checkpoint container.

Layout: 4 magic bytes, little-endian u32 format version, u32 header
length, a JSON header (arbitrary metadata plus the array manifest), then
each array's raw C-order bytes in manifest order, then a trailing SHA-256
digest of everything before it.  Round trips are bit-exact; any flipped
or missing byte fails the digest check on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DQCK"
FORMAT_VERSION = 1
_DIGEST = hashlib.sha256


class CheckpointError(ValueError):
    """Unreadable, corrupt or structurally inconsistent checkpoint."""


def save_arrays(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write metadata and named arrays; array order is preserved."""
    manifest = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        # record the shape before ascontiguousarray, which promotes 0-d to 1-d
        manifest.append(
            {"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)}
        )
        blobs.append(np.ascontiguousarray(arr).tobytes())
    header = json.dumps(
        {"meta": meta, "arrays": manifest}, sort_keys=True
    ).encode("utf-8")

    digest = _DIGEST()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with tmp.open("wb") as fh:
        for chunk in (
            MAGIC,
            struct.pack("<I", FORMAT_VERSION),
            struct.pack("<I", len(header)),
            header,
            *blobs,
        ):
            fh.write(chunk)
            digest.update(chunk)
        fh.write(digest.digest())
    tmp.replace(path)


def load_arrays(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint back; returns (meta, arrays)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc

    digest_size = _DIGEST().digest_size
    if len(raw) < len(MAGIC) + 8 + digest_size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    (version,) = struct.unpack_from("<I", raw, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})"
        )

    body, stored = raw[:-digest_size], raw[-digest_size:]
    if _DIGEST(body).digest() != stored:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupt")

    (header_len,) = struct.unpack_from("<I", raw, len(MAGIC) + 4)
    offset = len(MAGIC) + 8
    if offset + header_len > len(body):
        raise CheckpointError(f"{path}: header overruns file")
    try:
        header = json.loads(body[offset : offset + header_len].decode("utf-8"))
        meta = header["meta"]
        manifest = header["arrays"]
    except (json.JSONDecodeError, UnicodeDecodeError, KeyError) as exc:
        raise CheckpointError(f"{path}: malformed header: {exc}") from exc
    offset += header_len

    arrays: dict[str, np.ndarray] = {}
    for entry in manifest:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(int(s) for s in entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        if offset + nbytes > len(body):
            raise CheckpointError(f"{path}: array {entry['name']!r} overruns file")
        arr = np.frombuffer(body, dtype=dtype, count=max(int(np.prod(shape, dtype=np.int64)), 0), offset=offset)
        arrays[entry["name"]] = arr.reshape(shape).copy()
        offset += nbytes
    if offset != len(body):
        raise CheckpointError(f"{path}: trailing bytes after arrays")
    return meta, arrays
