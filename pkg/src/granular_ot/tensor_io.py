"""Binary tensor records.

Layout: magic ``b"TNS1"``, u32 rank, ``rank`` u32 extents, then the
row-major float64 payload.  Everything is little-endian.
"""

import struct

import numpy as np

from .errors import FormatError

MAGIC = b"TNS1"
_U32 = struct.Struct("<I")


def tensor_to_bytes(array):
    a = np.asarray(array, dtype="<f8")
    head = MAGIC + _U32.pack(a.ndim) + b"".join(_U32.pack(n) for n in a.shape)
    return head + a.tobytes()


def read_u32(buf, offset, what="u32"):
    if offset + 4 > len(buf):
        raise FormatError(f"truncated {what}", offset)
    return _U32.unpack_from(buf, offset)[0], offset + 4


def tensor_from_bytes(buf, offset=0):
    """Parse one record starting at ``offset``; return (array, next_offset)."""
    if buf[offset : offset + 4] != MAGIC:
        if len(buf) - offset < 4:
            raise FormatError("truncated tensor magic", offset)
        raise FormatError(f"bad tensor magic {bytes(buf[offset:offset + 4])!r}", offset)
    rank, pos = read_u32(buf, offset + 4, "tensor rank")
    shape = []
    for _ in range(rank):
        n, pos = read_u32(buf, pos, "tensor extent")
        shape.append(n)
    count = int(np.prod(shape, dtype=np.int64))
    end = pos + 8 * count
    if end > len(buf):
        raise FormatError(f"truncated tensor payload: need {8 * count} bytes, have {len(buf) - pos}", pos)
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64)
    return data.reshape(tuple(shape)), end


def save_tensor(path, array):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(array))


def load_tensor(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    array, end = tensor_from_bytes(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor record", end)
    return array
