"""Binary container used for saved models and training checkpoints.

Layout (little-endian)::

    b"MKIS"  u32 version
    u32 n    n bytes of UTF-8 JSON (config block)
    u32 k    k tensor records
    [b"OPTM" u32 n  JSON meta  u32 k  k tensor records]   optional section

A tensor record is ``u16 name_len, name, u8 dtype, u8 ndim, u32 dims[ndim],
u32 crc32, u64 nbytes, payload``.
"""
import io
import json
import struct
import zlib

import numpy as np

from .errors import ChecksumError, ModelFileError, TruncatedFileError, VersionError

MAGIC = b"MKIS"
SECTION_MAGIC = b"OPTM"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def _write_records(f, tensors):
    f.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise ModelFileError(f"unsupported dtype {arr.dtype} for tensor {name!r}")
        payload = arr.astype(_DTYPES[code], copy=False).tobytes()
        raw = name.encode("utf-8")
        f.write(struct.pack("<H", len(raw)) + raw)
        f.write(struct.pack("<BB", code, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(struct.pack("<IQ", zlib.crc32(payload), len(payload)))
        f.write(payload)


def _json_block(f, obj):
    raw = json.dumps(obj, sort_keys=True).encode("utf-8")
    f.write(struct.pack("<I", len(raw)) + raw)


def dump(f, config, tensors, section=None):
    """Write a container. ``section`` is an optional ``(meta, tensors)`` pair."""
    f.write(MAGIC + struct.pack("<I", VERSION))
    _json_block(f, config)
    _write_records(f, tensors)
    if section is not None:
        meta, extra = section
        f.write(SECTION_MAGIC)
        _json_block(f, meta)
        _write_records(f, extra)


def dumps(config, tensors, section=None):
    buf = io.BytesIO()
    dump(buf, config, tensors, section)
    return buf.getvalue()


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file ends inside {what} (need {n} bytes at offset {self.pos})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def json_block(self, what):
        (n,) = self.unpack("<I", what)
        try:
            return json.loads(self.take(n, what).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ModelFileError(f"malformed {what}: {exc}") from None

    def records(self):
        (count,) = self.unpack("<I", "record count")
        out = {}
        for _ in range(count):
            (nlen,) = self.unpack("<H", "tensor name")
            name = self.take(nlen, "tensor name").decode("utf-8", errors="replace")
            code, ndim = self.unpack("<BB", f"header of {name!r}")
            if code not in _DTYPES:
                raise ModelFileError(f"tensor {name!r} has unknown dtype code {code}")
            shape = self.unpack(f"<{ndim}I", f"shape of {name!r}")
            crc, nbytes = self.unpack("<IQ", f"header of {name!r}")
            expected = int(np.prod(shape, dtype=np.int64)) * _DTYPES[code].itemsize
            if nbytes != expected:
                raise ModelFileError(f"tensor {name!r} declares {nbytes} bytes, shape implies {expected}")
            payload = self.take(nbytes, f"payload of {name!r}")
            if zlib.crc32(payload) != crc:
                raise ChecksumError(f"checksum mismatch in tensor {name!r}", tensor_name=name)
            arr = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(shape)
            out[name] = arr.astype(_DTYPES[code].newbyteorder("="), copy=True)
        return out


def loads(data):
    """Parse a container; returns ``(config, tensors, section_or_None)``."""
    r = _Reader(data)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise ModelFileError(f"not a model file (magic {magic!r})")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(f"unsupported model file version {version} (expected {VERSION})")
    config = r.json_block("config block")
    tensors = r.records()
    section = None
    if r.pos < len(data):
        tag = r.take(4, "section tag")
        if tag != SECTION_MAGIC:
            raise ModelFileError(f"unknown trailing section {tag!r}")
        meta = r.json_block("section meta")
        section = (meta, r.records())
    if r.pos != len(data):
        raise ModelFileError(f"{len(data) - r.pos} unexpected trailing bytes")
    return config, tensors, section


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())


def save(path, config, tensors, section=None):
    data = dumps(config, tensors, section)
    with open(path, "wb") as f:
        f.write(data)
    return len(data)
