"""The ``docclean-ckpt-v1`` tensor container.

Layout::

    docclean-ckpt-v1
    meta.<key>=<json value>
    ...
    tensor_count=<K>
    tensor=<name>\t<dtype>\t<d0>x<d1>x...\t<offset>\t<nbytes>\t<crc32>
    ...
    end
    <zero padding to a 64-byte boundary>
    <payloads: little-endian float32, each starting 64-byte aligned>

Offsets are relative to the start of the payload section. The whole
manifest is parsed and cross-checked before any payload byte is read.
"""
from __future__ import annotations

import json
import os
import tempfile
import zlib
from collections import OrderedDict

import numpy as np

from .errors import (
    ChecksumError,
    ManifestError,
    MissingTensorError,
    ShapeMismatchError,
    TruncatedPayloadError,
    VersionError,
)

FORMAT_VERSION = "docclean-ckpt-v1"
ALIGN = 64
_MAX_MANIFEST_BYTES = 16 * 1024 * 1024
_DTYPES = {"float32": np.dtype("<f4")}


def _align(n):
    return -(-n // ALIGN) * ALIGN


def encode(tensors, meta=None) -> bytes:
    """Serialize ``{name: array}`` plus JSON-able ``meta`` to container bytes."""
    meta = meta or {}
    lines = [FORMAT_VERSION]
    for key, value in meta.items():
        if "\n" in key or "=" in key:
            raise ValueError(f"invalid metadata key {key!r}")
        lines.append(f"meta.{key}={json.dumps(value, sort_keys=True)}")
    lines.append(f"tensor_count={len(tensors)}")
    payloads = []
    offset = 0
    for name, arr in tensors.items():
        if any(ch in name for ch in "\t\n"):
            raise ValueError(f"invalid tensor name {name!r}")
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        shape = "x".join(str(d) for d in arr.shape) or "scalar"
        crc = zlib.crc32(data)
        lines.append(f"tensor={name}\tfloat32\t{shape}\t{offset}\t{len(data)}\t{crc:08x}")
        payloads.append((offset, data))
        offset = _align(offset + len(data))
    lines.append("end")
    head = ("\n".join(lines) + "\n").encode("utf-8")
    head += b"\0" * (_align(len(head)) - len(head))
    body = bytearray(offset)
    for off, data in payloads:
        body[off:off + len(data)] = data
    return head + bytes(body)


def save(path, tensors, meta=None):
    """Write a container atomically (temp file + rename)."""
    blob = encode(tensors, meta)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return len(blob)


def _parse_manifest(f):
    first = f.readline(256)
    try:
        version = first.decode("utf-8").rstrip("\n")
    except UnicodeDecodeError:
        raise ManifestError("manifest is not UTF-8") from None
    if not version:
        raise ManifestError("empty file")
    if version != FORMAT_VERSION:
        if version.startswith("docclean-ckpt-"):
            raise VersionError(f"unsupported format version {version!r} (expected {FORMAT_VERSION})")
        raise ManifestError(f"not a {FORMAT_VERSION} file")
    meta = OrderedDict()
    table = []
    count = None
    consumed = len(first)
    while True:
        raw = f.readline(_MAX_MANIFEST_BYTES)
        consumed += len(raw)
        if not raw or consumed > _MAX_MANIFEST_BYTES:
            raise ManifestError("manifest has no 'end' line")
        try:
            line = raw.decode("utf-8").rstrip("\n")
        except UnicodeDecodeError:
            raise ManifestError("manifest is not UTF-8") from None
        if line == "end":
            break
        key, sep, value = line.partition("=")
        if not sep:
            raise ManifestError(f"malformed manifest line: {line!r}")
        if key.startswith("meta."):
            try:
                meta[key[5:]] = json.loads(value)
            except json.JSONDecodeError:
                raise ManifestError(f"bad metadata value for {key[5:]!r}") from None
        elif key == "tensor_count":
            try:
                count = int(value)
            except ValueError:
                raise ManifestError(f"bad tensor_count {value!r}") from None
        elif key == "tensor":
            table.append(_parse_tensor_line(value))
        else:
            raise ManifestError(f"unknown manifest key {key!r}")
    if count is None or count != len(table):
        raise ManifestError(f"tensor_count={count} but {len(table)} tensor lines")
    return meta, table, _align(consumed)


def _parse_tensor_line(value):
    fields = value.split("\t")
    if len(fields) != 6:
        raise ManifestError(f"tensor line needs 6 fields: {value!r}")
    name, dtype, shape_s, off_s, len_s, crc_s = fields
    if dtype not in _DTYPES:
        raise ManifestError(f"{name}: unsupported dtype {dtype!r}")
    try:
        shape = () if shape_s == "scalar" else tuple(int(d) for d in shape_s.split("x"))
        offset, nbytes, crc = int(off_s), int(len_s), int(crc_s, 16)
    except ValueError:
        raise ManifestError(f"{name}: malformed tensor entry {value!r}") from None
    if any(d < 0 for d in shape) or offset < 0 or offset % ALIGN:
        raise ManifestError(f"{name}: invalid shape or unaligned offset")
    expected = int(np.prod(shape, dtype=np.int64)) * _DTYPES[dtype].itemsize
    if nbytes != expected:
        raise ManifestError(f"{name}: byte length {nbytes} does not match shape {shape}")
    return name, dtype, shape, offset, nbytes, crc


def read_manifest(path):
    """Parse only the manifest: ``(meta, [(name, dtype, shape, offset, nbytes, crc)])``."""
    with open(path, "rb") as f:
        meta, table, _ = _parse_manifest(f)
    return meta, table


def load(path):
    """Read a container; returns ``(meta, OrderedDict(name -> float32 array))``."""
    size = os.path.getsize(path)
    with open(path, "rb") as f:
        meta, table, base = _parse_manifest(f)
        names = [t[0] for t in table]
        if len(set(names)) != len(names):
            raise ManifestError("duplicate tensor names")
        for name, _, _, offset, nbytes, _ in table:
            if base + offset + nbytes > size:
                raise TruncatedPayloadError(
                    f"{name}: payload ends at byte {base + offset + nbytes}, file has {size}"
                )
        tensors = OrderedDict()
        for name, dtype, shape, offset, nbytes, crc in table:
            f.seek(base + offset)
            data = f.read(nbytes)
            if len(data) != nbytes:
                raise TruncatedPayloadError(f"{name}: short read")
            if zlib.crc32(data) != crc:
                raise ChecksumError(f"{name}: payload checksum mismatch")
            tensors[name] = np.frombuffer(data, dtype=_DTYPES[dtype]).astype(np.float32).reshape(shape)
    return meta, tensors


def match_tensors(stored, expected_shapes):
    """Check stored tensors against ``{name: shape}``.

    Shape conflicts are reported before missing names.
    """
    bad = [
        f"{name}: stored {stored[name].shape}, expected {tuple(shape)}"
        for name, shape in expected_shapes.items()
        if name in stored and stored[name].shape != tuple(shape)
    ]
    if bad:
        more = f"; ... {len(bad) - 4} more" if len(bad) > 4 else ""
        raise ShapeMismatchError(f"{len(bad)} tensor(s) do not fit: " + "; ".join(bad[:4]) + more)
    missing = [name for name in expected_shapes if name not in stored]
    if missing:
        raise MissingTensorError(missing)
