"""Binary checkpoint container for named float64 arrays.

Layout (all integers little-endian):

    magic   4 bytes  b"FLSC"
    version u32      currently 1
    count   u32      number of entries
    entry   repeated count times:
        name_len u32
        name     UTF-8 bytes
        rank     u64
        extent   u64 * rank
        data     little-endian float64, C order

Round trips are bit-exact: the saved bytes encode the exact IEEE-754
payload of every array, so ``load(save(state)) == state`` down to the
bit pattern, including signed zeros and NaN payloads.
"""

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"FLSC"
VERSION = 1


def dumps(state):
    """Serialize a name -> array mapping to bytes."""
    parts = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, array in state.items():
        # not ascontiguousarray: that would promote rank-0 arrays to (1,)
        array = np.asarray(array, dtype="<f8")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<Q", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}Q", *array.shape))
        parts.append(array.tobytes())
    return b"".join(parts)


def loads(blob):
    """Parse bytes produced by :func:`dumps` back into an ordered mapping."""
    if blob[:4] != MAGIC:
        raise ValueError(f"bad checkpoint magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 12
    state = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        shape = struct.unpack_from(f"<{rank}Q", blob, offset)
        offset += 8 * rank
        n = 1
        for extent in shape:
            n *= extent
        array = np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
        offset += 8 * n
        state[name] = array.reshape(shape).astype(np.float64).copy()
    if offset != len(blob):
        raise ValueError("trailing bytes after last checkpoint entry")
    return state


def save(path, state):
    with open(path, "wb") as fh:
        fh.write(dumps(state))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
