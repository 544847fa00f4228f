"""Self-describing binary serialization of trained parameters.

Layout: magic string, u32 format version, u32 parameter count, then per
parameter a u16 name length + utf-8 name, u8 rank, u32 extents, and the
row-major float64 payload. Everything multi-byte is little-endian and the
round trip is bit-exact.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import ParseError

MAGIC = b"MODKITPARAMS"
VERSION = 1


def save_params(net, path) -> None:
    path = Path(path)
    named = list(net.named_parameters())
    chunks = [MAGIC, struct.pack("<II", VERSION, len(named))]
    for name, p in named:
        raw = name.encode()
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", p.ndim))
        chunks.append(struct.pack(f"<{p.ndim}I", *p.shape))
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    path.write_bytes(b"".join(chunks))


def load_params(net, path) -> None:
    """Fill ``net``'s parameters in place from a file written by save_params."""
    path = Path(path)
    blob = path.read_bytes()
    entries = read_param_file(path, blob)
    params = dict(net.named_parameters())
    missing = set(params) - set(entries)
    extra = set(entries) - set(params)
    if missing or extra:
        raise ParseError(
            f"parameter names do not match the network "
            f"(missing={sorted(missing)}, extra={sorted(extra)})",
            str(path),
            0,
        )
    for name, value in entries.items():
        p = params[name]
        if value.shape != p.shape:
            raise ParseError(
                f"parameter {name!r} has shape {value.shape}, expected {p.shape}",
                str(path),
                0,
            )
        p.data = value


def read_param_file(path, blob: bytes | None = None) -> dict[str, np.ndarray]:
    path = Path(path)
    if blob is None:
        blob = path.read_bytes()
    off = 0

    def need(nbytes: int) -> int:
        nonlocal off
        if off + nbytes > len(blob):
            raise ParseError("file truncated", str(path), off)
        start = off
        off += nbytes
        return start

    if blob[need(len(MAGIC)) : len(MAGIC)] != MAGIC:
        raise ParseError("bad magic string", str(path), 0)
    version, count = struct.unpack_from("<II", blob, need(8))
    if version != VERSION:
        raise ParseError(f"unsupported format version {version}", str(path), len(MAGIC))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, need(2))
        name = blob[need(nlen) : off].decode()
        (rank,) = struct.unpack_from("<B", blob, need(1))
        shape = struct.unpack_from(f"<{rank}I", blob, need(4 * rank))
        size = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(blob, dtype="<f8", count=size, offset=need(8 * size))
        out[name] = data.reshape(shape).astype(np.float64)
    return out
