"""Flat binary tensor container.

Layout (all little-endian):

    bytes 0..7    magic ``ALCKPT01``
    bytes 8..11   uint32 format version (currently 1)
    bytes 12..19  uint64 manifest length in bytes
    manifest      UTF-8 JSON: {"meta": {...}, "entries": [{"name",
                  "shape", "offset", "count"}, ...]}
    payload       concatenated float64 arrays, offsets relative to the
                  payload start

Entries appear in insertion order, values are always float64, and nothing
time- or host-dependent is written, so identical inputs produce identical
bytes.
"""

import json
import struct

import numpy as np

from .errors import IOFailure

MAGIC = b"ALCKPT01"
VERSION = 1


def save_arrays(path, arrays, meta=None):
    """Write named float64 arrays plus a small JSON meta dict."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append(
            {"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)}
        )
        blobs.append(a.tobytes())
        offset += a.size * 8
    manifest = json.dumps(
        {"meta": meta or {}, "entries": entries}, sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    try:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<Q", len(manifest)))
            f.write(manifest)
            for blob in blobs:
                f.write(blob)
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint {path}: {exc}") from exc


def load_arrays(path):
    """Read a container back; returns (dict name -> array, meta dict)."""
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise IOFailure(f"{path} is not a tensor container (bad magic)")
    (version,) = struct.unpack("<I", raw[8:12])
    if version != VERSION:
        raise IOFailure(f"{path}: unsupported container version {version}")
    (mlen,) = struct.unpack("<Q", raw[12:20])
    try:
        manifest = json.loads(raw[20:20 + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IOFailure(f"{path}: corrupt manifest: {exc}") from exc
    payload = raw[20 + mlen:]
    arrays = {}
    for entry in manifest["entries"]:
        start = entry["offset"]
        stop = start + entry["count"] * 8
        if stop > len(payload):
            raise IOFailure(f"{path}: truncated payload for entry {entry['name']}")
        flat = np.frombuffer(payload[start:stop], dtype="<f8")
        arrays[entry["name"]] = flat.reshape(entry["shape"]).astype(np.float64)
    return arrays, manifest["meta"]
