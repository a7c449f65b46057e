"""Binary tensor blobs and model checkpoints.

Blob layout, in order:

    4 bytes   unsigned little-endian header length H
    H bytes   UTF-8 JSON header {"dtype": "float32"|"float64", "shape": [...], "name": str}
    N bytes   raw little-endian IEEE-754 values, row-major

A checkpoint file is the same framing one level up: a length-prefixed JSON
manifest (format version, model config, label names, label groups, blob
order) followed by one blob per named tensor. Round-trips are bitwise.
"""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError

CHECKPOINT_FORMAT_VERSION = 1

_DTYPE_CODES = {"float32": "<f4", "float64": "<f8"}
_LEN = struct.Struct("<I")


def write_blob(fh: BinaryIO, array: np.ndarray, name: str) -> None:
    if array.dtype == np.float32:
        dtype = "float32"
    elif array.dtype == np.float64:
        dtype = "float64"
    else:
        raise FormatError(f"blob {name!r}: unsupported dtype {array.dtype}")
    header = json.dumps(
        {"dtype": dtype, "shape": list(array.shape), "name": name},
        separators=(",", ":"),
    ).encode("utf-8")
    fh.write(_LEN.pack(len(header)))
    fh.write(header)
    fh.write(np.ascontiguousarray(array, dtype=_DTYPE_CODES[dtype]).tobytes())


def read_blob(fh: BinaryIO) -> tuple[str, np.ndarray]:
    """Read one blob; returns (name, array). Raises FormatError at EOF mid-record."""
    raw_len = fh.read(_LEN.size)
    if len(raw_len) == 0:
        raise FormatError("blob: unexpected end of file (no header length)")
    if len(raw_len) < _LEN.size:
        raise FormatError("blob: truncated header length")
    (hlen,) = _LEN.unpack(raw_len)
    raw_header = fh.read(hlen)
    if len(raw_header) < hlen:
        raise FormatError("blob: truncated header")
    try:
        header = json.loads(raw_header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"blob: bad header: {exc}") from exc
    for key in ("dtype", "shape", "name"):
        if key not in header:
            raise FormatError(f"blob: header missing {key!r}")
    dtype = header["dtype"]
    if dtype not in _DTYPE_CODES:
        raise FormatError(f"blob {header['name']!r}: unknown dtype {dtype!r}")
    shape = tuple(int(n) for n in header["shape"])
    count = 1
    for n in shape:
        count *= n
    nbytes = count * np.dtype(_DTYPE_CODES[dtype]).itemsize
    raw = fh.read(nbytes)
    if len(raw) < nbytes:
        raise FormatError(f"blob {header['name']!r}: truncated payload ({len(raw)}/{nbytes} bytes)")
    array = np.frombuffer(raw, dtype=_DTYPE_CODES[dtype]).reshape(shape)
    return header["name"], array.astype(array.dtype.newbyteorder("="), copy=True)


def write_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Write named tensors plus a JSON-serializable metadata dict."""
    order = list(tensors)
    manifest = json.dumps(
        {"format_version": CHECKPOINT_FORMAT_VERSION, "meta": meta, "tensors": order},
        separators=(",", ":"),
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_LEN.pack(len(manifest)))
        fh.write(manifest)
        for name in order:
            write_blob(fh, tensors[name], name)


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (tensors, meta); inverse of write_checkpoint."""
    with open(path, "rb") as fh:
        raw_len = fh.read(_LEN.size)
        if len(raw_len) < _LEN.size:
            raise FormatError("checkpoint: truncated manifest length")
        (mlen,) = _LEN.unpack(raw_len)
        raw_manifest = fh.read(mlen)
        if len(raw_manifest) < mlen:
            raise FormatError("checkpoint: truncated manifest")
        try:
            manifest = json.loads(raw_manifest.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"checkpoint: bad manifest: {exc}") from exc
        version = manifest.get("format_version")
        if version != CHECKPOINT_FORMAT_VERSION:
            raise FormatError(
                f"checkpoint: format version {version!r} not supported "
                f"(this build reads version {CHECKPOINT_FORMAT_VERSION})"
            )
        tensors = {}
        for expected in manifest["tensors"]:
            name, array = read_blob(fh)
            if name != expected:
                raise FormatError(f"checkpoint: expected blob {expected!r}, found {name!r}")
            tensors[name] = array
        return tensors, manifest["meta"]
