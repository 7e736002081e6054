"""Binary container for named float64 tensors.

Layout (little-endian):
    magic b"TWGM", uint16 version, uint32 layer count
    per layer: uint16 name length, name (utf-8), uint8 rank, rank x uint64 dims,
               float64 payload in row-major order
    uint32 metadata length, metadata as utf-8 JSON (may be empty)
"""

import json
import struct

import numpy as np

MAGIC = b"TWGM"
VERSION = 1


def dumps(tensors, metadata=None):
    parts = [MAGIC, struct.pack("<HI", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    meta = b"" if metadata is None else json.dumps(metadata, sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    return b"".join(parts)


def loads(buf):
    if buf[:4] != MAGIC:
        raise ValueError("not a model container (bad magic)")
    pos = 4
    version, count = struct.unpack_from("<HI", buf, pos)
    pos += 6
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).astype(np.float64)
        pos += 8 * size
        tensors[name] = arr.reshape(shape)
    (mlen,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    metadata = json.loads(buf[pos:pos + mlen].decode("utf-8")) if mlen else None
    return tensors, metadata


def save(path, tensors, metadata=None):
    with open(path, "wb") as f:
        f.write(dumps(tensors, metadata))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
