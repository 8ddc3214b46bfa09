"""Binary checkpoint format.

Layout (all integers little-endian):
    magic "BEVD" | format version u32 | config sha256 (32 bytes) |
    block count u32 | blocks... | crc32 u32 of everything before it
Each block: name length u16, utf-8 name, dtype tag u8, rank u8,
dims u32 * rank, raw little-endian payload. Blocks are written in sorted
name order, so save -> load -> save round-trips byte-identically.
"""
from __future__ import annotations

import struct
import warnings
import zlib
from pathlib import Path

import numpy as np

from .errors import BevDriveError

MAGIC = b"BEVD"
FORMAT_VERSION = 1

_TAG_FOR_KIND = {("f", 4): 1, ("f", 8): 2, ("i", 8): 3}
_DTYPE_FOR_TAG = {1: "<f4", 2: "<f8", 3: "<i8"}


class CheckpointVersionError(BevDriveError):
    """Format version of the file is not the one this code writes."""


class CheckpointFormatError(BevDriveError):
    """The file is not a valid checkpoint (magic, checksum, structure)."""


def save_checkpoint(path, arrays: dict, config_hash: bytes = b"\x00" * 32):
    if len(config_hash) != 32:
        raise CheckpointFormatError("config hash must be 32 bytes")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", FORMAT_VERSION)
    out += config_hash
    names = sorted(arrays)
    out += struct.pack("<I", len(names))
    for name in names:
        arr = np.asarray(arrays[name])
        kind = (arr.dtype.kind, arr.dtype.itemsize)
        if kind not in _TAG_FOR_KIND:
            raise CheckpointFormatError(f"unsupported dtype {arr.dtype} for block {name!r}")
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<BB", _TAG_FOR_KIND[kind], arr.ndim)
        for dim in arr.shape:
            out += struct.pack("<I", dim)
        out += arr.astype(_DTYPE_FOR_TAG[_TAG_FOR_KIND[kind]], copy=False).tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(out)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected_config_hash: bytes | None = None):
    """Returns (arrays, config_hash); config-hash mismatch warns, version
    mismatch and corruption raise."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4 + 4 + 32 + 4 + 4 or blob[:4] != MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic)")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointFormatError(f"{path} failed its integrity checksum")
    version = struct.unpack("<I", blob[4:8])[0]
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path} has format version {version}, this build reads {FORMAT_VERSION}")
    config_hash = blob[8:40]
    if expected_config_hash is not None and config_hash != expected_config_hash:
        warnings.warn("checkpoint was written under a different configuration", stacklevel=2)
    off = 40
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        tag, rank = struct.unpack_from("<BB", blob, off)
        off += 2
        if tag not in _DTYPE_FOR_TAG:
            raise CheckpointFormatError(f"unknown dtype tag {tag} in block {name!r}")
        dims = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        dtype = np.dtype(_DTYPE_FOR_TAG[tag])
        n_elems = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arrays[name] = np.frombuffer(blob, dtype=dtype, count=n_elems,
                                     offset=off).reshape(dims).copy()
        off += n_elems * dtype.itemsize
    if off != len(blob) - 4:
        raise CheckpointFormatError(f"{path} has trailing or missing block data")
    return arrays, config_hash
