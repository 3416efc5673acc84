"""Binary checkpoint format.

Layout (all integers unsigned 32-bit little-endian)::

    b"VRWK" | version | len(config_json) | config_json (UTF-8)
    then per tensor, in declaration order:
    len(name) | name (UTF-8) | rank | dim_0 ... dim_{rank-1} | float32 LE payload
"""

import json
import os
import struct
import tempfile

import numpy as np

MAGIC = b"VRWK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(config, params):
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for name, arr in params.items():
        arr = np.asarray(arr)
        nm = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nm)))
        parts.append(nm)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(data):
    """Return ``(config_dict, params)`` with params as float32 arrays."""
    mv = memoryview(data)
    if bytes(mv[:4]) != MAGIC:
        raise CheckpointError("bad magic bytes")
    pos = 4

    def u32(n=1):
        nonlocal pos
        if pos + 4 * n > len(mv):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(f"<{n}I", mv, pos)
        pos += 4 * n
        return vals

    version, blen = u32(2)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    if pos + blen > len(mv):
        raise CheckpointError("truncated config blob")
    try:
        config = json.loads(bytes(mv[pos:pos + blen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt config blob: {e}")
    pos += blen
    params = {}
    while pos < len(mv):
        (nlen,) = u32()
        name = bytes(mv[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (rank,) = u32()
        shape = u32(rank) if rank else ()
        count = int(np.prod(shape, dtype=np.int64))
        end = pos + 4 * count
        if end > len(mv):
            raise CheckpointError(f"truncated payload for tensor {name!r}")
        params[name] = np.frombuffer(mv[pos:end], dtype="<f4").reshape(shape).copy()
        pos = end
    return config, params


def save(path, config, params):
    """Write atomically: temp file in the same directory, then rename."""
    data = dumps(config, params)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())
