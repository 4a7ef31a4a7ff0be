"""PMUSE1 binary checkpoint format.

Layout (all integers unsigned 64-bit little-endian, floats float64 LE)::

    b"PMUSE1\\0"  count
    repeated count times:
        name_len  name(utf-8)  rank  extent*rank  trainable(1 byte)  values

A JSON manifest is written next to the binary as ``<path>.manifest.json``.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .params import ParameterSet

MAGIC = b"PMUSE1\x00"
_PREFIX = b"PMUSE"


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


def manifest_path(path) -> Path:
    return Path(str(path) + ".manifest.json")


def encode_params(params: ParameterSet) -> bytes:
    out = [MAGIC, struct.pack("<Q", len(params))]
    for name, t in params.items():
        raw = name.encode("utf-8")
        out.append(struct.pack("<Q", len(raw)))
        out.append(raw)
        out.append(struct.pack("<Q", t.ndim))
        out.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        out.append(b"\x01" if t.requires_grad else b"\x00")
        out.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(out)


def decode_params(buf: bytes) -> ParameterSet:
    if len(buf) < len(MAGIC):
        raise TruncatedCheckpointError("file shorter than the magic header")
    if buf[:len(MAGIC)] != MAGIC:
        if buf[:len(_PREFIX)] == _PREFIX:
            raise UnsupportedVersionError(f"unknown checkpoint version {buf[5:6]!r}")
        raise BadMagicError("not a PMUSE checkpoint (magic mismatch)")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedCheckpointError(f"truncated at byte {pos} (wanted {n} more)")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<Q", take(8))
    ps = ParameterSet()
    for _ in range(count):
        (nlen,) = struct.unpack("<Q", take(8))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        shape = struct.unpack(f"<{rank}Q", take(8 * rank))
        flag = take(1)
        if flag not in (b"\x00", b"\x01"):
            raise CheckpointError(f"bad trainable flag for {name!r}")
        n = int(np.prod(shape)) if rank else 1
        values = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        ps.add(name, values, trainable=flag == b"\x01")
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after last entry")
    return ps


def save_checkpoint(path, params: ParameterSet, manifest: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_params(params))
    os.replace(tmp, path)
    if manifest is not None:
        manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> Tuple[ParameterSet, dict]:
    """Read a checkpoint and its manifest (empty dict if none was written)."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(str(path))
    params = decode_params(path.read_bytes())
    mp = manifest_path(path)
    manifest = json.loads(mp.read_text()) if mp.exists() else {}
    return params, manifest
