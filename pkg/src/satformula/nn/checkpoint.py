"""``.satw`` parameter checkpoints.

Layout: a header line ``SATW version=1 tensors=<n>``, then ``n`` table lines
``<name> <dim>x<dim>...`` (``-`` for scalars), then the float64
little-endian payload of every tensor in table order.
"""

from __future__ import annotations

import numpy as np

MAGIC = "SATW"
VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def params_to_bytes(params: dict) -> bytes:
    arrays = {k: np.asarray(getattr(v, "data", v), dtype=np.float64) for k, v in params.items()}
    lines = [f"{MAGIC} version={VERSION} tensors={len(arrays)}"]
    for name, a in arrays.items():
        if not name or " " in name or "\n" in name:
            raise CheckpointError(f"invalid tensor name {name!r}")
        lines.append(f"{name} {'x'.join(map(str, a.shape)) or '-'}")
    head = ("\n".join(lines) + "\n").encode("ascii")
    return head + b"".join(a.astype(_DTYPE, copy=False).tobytes(order="C") for a in arrays.values())


def params_from_bytes(blob: bytes) -> dict:
    nl = blob.find(b"\n")
    first = blob[:nl].decode("ascii", errors="replace").split(" ") if nl >= 0 else []
    if len(first) != 3 or first[0] != MAGIC:
        raise CheckpointError("not a SATW checkpoint")
    if first[1] != f"version={VERSION}":
        raise CheckpointError(f"unsupported checkpoint {first[1]}")
    n = int(first[2].partition("=")[2])
    pos = nl + 1
    table = []
    for _ in range(n):
        end = blob.find(b"\n", pos)
        if end < 0:
            raise CheckpointError("truncated tensor table")
        name, _, dims = blob[pos:end].decode("ascii").partition(" ")
        shape = () if dims == "-" else tuple(int(d) for d in dims.split("x"))
        table.append((name, shape))
        pos = end + 1
    out = {}
    for name, shape in table:
        size = int(np.prod(shape)) * _DTYPE.itemsize
        if pos + size > len(blob):
            raise CheckpointError(f"truncated payload for {name}")
        out[name] = np.frombuffer(blob[pos:pos + size], dtype=_DTYPE).reshape(shape).astype(np.float64)
        pos += size
    if pos != len(blob):
        raise CheckpointError("trailing bytes after payload")
    return out


def save_params(params: dict, path) -> None:
    with open(path, "wb") as fh:
        fh.write(params_to_bytes(params))


def load_params(path) -> dict:
    with open(path, "rb") as fh:
        return params_from_bytes(fh.read())
