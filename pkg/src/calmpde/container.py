"""Self-describing binary container shared by dataset and checkpoint files.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic, e.g. b"CALMDS01"
    offset 8   8 bytes   uint64 length J of the JSON header
    offset 16  J bytes   UTF-8 JSON header, zero-padded to a multiple of 16
    ...                  array payloads in header order, each zero-padded to a
                         multiple of 16 bytes

The header holds ``format_version``, ``payload_bytes`` and an ``arrays`` list
of ``{name, dtype, shape, offset, nbytes}`` with offsets relative to the
payload start. Everything else in the header is caller metadata.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

FORMAT_VERSION = 1
ALIGN = 16


class ContainerError(ValueError):
    """Base class for unreadable container files."""


class FormatError(ContainerError):
    """Wrong magic bytes or malformed header."""


class VersionError(ContainerError):
    """Header declares a format version this build cannot read."""


class TruncatedError(ContainerError):
    """File is shorter than its header declares."""


class PayloadSizeError(ContainerError):
    """Header metadata disagrees with the payload (shape/dtype/size)."""


def _pad(n: int) -> int:
    return -n % ALIGN


def aligned(n: int) -> int:
    return n + _pad(n)


def write(path, magic: bytes, meta: dict, arrays: dict[str, np.ndarray]) -> int:
    """Write ``arrays`` (in insertion order) with ``meta``; returns the file size."""
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append({"name": name, "dtype": le.dtype.str, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw + b"\0" * _pad(len(raw)))
        offset += aligned(len(raw))
    header = dict(meta)
    header.update(format_version=FORMAT_VERSION, payload_bytes=offset, arrays=entries)
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text + b"\0" * _pad(len(text)))
        for blob in blobs:
            fh.write(blob)
    return 16 + aligned(len(text)) + offset


def expected_size(json_len: int, nbytes: list[int]) -> int:
    return 16 + aligned(json_len) + sum(aligned(n) for n in nbytes)


def read(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) < 8 or head[:8] != magic:
            raise FormatError(f"{path}: bad magic {head[:8]!r}, expected {magic!r}")
        if len(head) < 16:
            raise TruncatedError(f"{path}: file ends inside the fixed header")
        (jlen,) = struct.unpack("<Q", head[8:16])
        if 16 + jlen > size:
            raise TruncatedError(f"{path}: header declares {jlen} JSON bytes, file has {size - 16}")
        try:
            header = json.loads(fh.read(jlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise FormatError(f"{path}: unreadable JSON header ({e})") from e
        if not isinstance(header, dict) or "arrays" not in header:
            raise FormatError(f"{path}: header lacks an array table")
        version = header.get("format_version")
        if version != FORMAT_VERSION:
            raise VersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
        start = 16 + aligned(jlen)
        declared = start + int(header.get("payload_bytes", -1))
        if size < declared:
            raise TruncatedError(f"{path}: {size} bytes on disk, header declares {declared}")
        if size > declared:
            raise PayloadSizeError(f"{path}: {size - declared} trailing bytes after the declared payload")
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            if count * dtype.itemsize != entry["nbytes"]:
                raise PayloadSizeError(f"{path}: array {entry['name']!r} shape {shape} x {dtype} "
                                       f"!= {entry['nbytes']} bytes")
            if entry["offset"] + aligned(entry["nbytes"]) > header["payload_bytes"]:
                raise PayloadSizeError(f"{path}: array {entry['name']!r} runs past the payload")
            fh.seek(start + entry["offset"])
            buf = fh.read(entry["nbytes"])
            arr = np.frombuffer(buf, dtype=dtype).reshape(shape)
            arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
    meta = {k: v for k, v in header.items() if k not in ("arrays", "payload_bytes", "format_version")}
    return meta, arrays
