"""Deterministic binary container used for checkpoints and parameter snapshots.

Layout: 4-byte magic ``NSCK``, little-endian uint32 version, little-endian
uint64 header length, UTF-8 JSON header, then the raw little-endian bytes of
every array in header order.  Two saves of the same state are byte-identical
(the JSON is emitted with sorted keys and no whitespace).
"""

from __future__ import annotations

import json
import struct

import numpy as np

MAGIC = b"NSCK"
VERSION = 1


class ContainerError(Exception):
    """Raised on malformed, truncated or wrong-version container files."""


def save_container(path, kind: str, meta: dict, arrays: dict) -> None:
    """Write ``arrays`` (name -> ndarray) plus JSON-serializable ``meta``."""
    entries = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        entries.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape)})
    header = {"kind": kind, "meta": meta, "arrays": entries}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for name, arr in arrays.items():
            arr = np.ascontiguousarray(arr)
            if arr.dtype.byteorder == ">":
                arr = arr.astype(arr.dtype.newbyteorder("<"))
            fh.write(arr.tobytes())


def load_container(path, expect_kind: str | None = None):
    """Read a container; returns ``(kind, meta, arrays)``."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ContainerError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ContainerError(f"unsupported container version {version} (want {VERSION})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        blob = fh.read(hlen)
        if len(blob) != hlen:
            raise ContainerError("truncated header")
        header = json.loads(blob.decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64))
            raw = fh.read(nbytes)
            if len(raw) != nbytes:
                raise ContainerError(f"truncated payload for array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
    kind = header["kind"]
    if expect_kind is not None and kind != expect_kind:
        raise ContainerError(f"container kind {kind!r}, expected {expect_kind!r}")
    return kind, header["meta"], arrays
