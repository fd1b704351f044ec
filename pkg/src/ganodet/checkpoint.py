"""Binary parameter checkpoint format.

Layout (little-endian): magic "NADT", format version u32, tensor count
u32, then per tensor: name length u32, UTF-8 name, rank u32, one u32 per
dim, raw float64 data. Round-trips are bit-exact.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import BadMagicError, TruncatedFileError

MAGIC = b"NADT"
VERSION = 1


def dump_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        out.append(struct.pack("<I", len(encoded)))
        out.append(encoded)
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.astype("<f8", copy=False).tobytes(order="C"))
    return b"".join(out)


def save_checkpoint(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(dump_tensors(tensors))


def parse_tensors(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedFileError(f"checkpoint ends at byte {len(view)}, "
                                     f"needed {pos + n}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise BadMagicError("not a NADT checkpoint")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise BadMagicError(f"unsupported checkpoint version {version}")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n_elem = 1
        for d in dims:
            n_elem *= d
        data = np.frombuffer(take(8 * n_elem), dtype="<f8").reshape(dims)
        # copy out of the blob: a view at an odd byte offset is unaligned,
        # which flips SIMD code paths and breaks bit-reproducibility
        tensors[name] = np.array(data, dtype=np.float64, order="C")
    if pos != len(view):
        raise TruncatedFileError(f"{len(view) - pos} trailing bytes after payload")
    return tensors


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return parse_tensors(fh.read())
