"""Portable weight archive.

Layout (all header text is UTF-8, lines end with ``\\n``)::

    VLROUTE-CKPT 1
    signature <architecture signature>
    seed <int>
    step <int>
    arrays <N>
    <blank line>
    then N records, each:
        <name> <ndim> <d0> <d1> ...\\n
        prod(dims) little-endian float64 values

Arrays are written in the model's parameter order, so save -> load -> save
is byte-identical.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = "VLROUTE-CKPT 1"


@dataclass
class Checkpoint:
    signature: str
    seed: int
    step: int
    arrays: "OrderedDict[str, np.ndarray]"


def to_bytes(model, *, seed: int = 0, step: int = 0) -> bytes:
    params = list(model.named_parameters())
    head = [MAGIC, f"signature {model.signature()}", f"seed {int(seed)}", f"step {int(step)}",
            f"arrays {len(params)}", ""]
    chunks = ["\n".join(head).encode() + b"\n"]
    for name, p in params:
        if " " in name or "\n" in name:
            raise CheckpointError(f"array name {name!r} contains whitespace")
        dims = " ".join(str(n) for n in p.shape)
        chunks.append(f"{name} {p.ndim} {dims}".rstrip().encode() + b"\n")
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return b"".join(chunks)


def parse(blob: bytes) -> Checkpoint:
    pos = 0

    def line() -> str:
        nonlocal pos
        end = blob.find(b"\n", pos)
        if end < 0:
            raise CheckpointError("truncated checkpoint header")
        text = blob[pos:end].decode()
        pos = end + 1
        return text

    if line() != MAGIC:
        raise CheckpointError("not a vlroute checkpoint (bad magic line)")
    fields = {}
    for key in ("signature", "seed", "step", "arrays"):
        k, _, v = line().partition(" ")
        if k != key:
            raise CheckpointError(f"expected header field {key!r}, found {k!r}")
        fields[key] = v
    if line() != "":
        raise CheckpointError("missing blank line after header")
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for _ in range(int(fields["arrays"])):
        parts = line().split(" ")
        name, ndim = parts[0], int(parts[1])
        shape = tuple(int(x) for x in parts[2 : 2 + ndim])
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if pos + nbytes > len(blob):
            raise CheckpointError(f"truncated data for array {name!r}")
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
        pos += nbytes
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last array")
    return Checkpoint(fields["signature"], int(fields["seed"]), int(fields["step"]), arrays)


def save(model, path: "str | Path | None" = None, *, seed: int = 0, step: int = 0) -> bytes:
    blob = to_bytes(model, seed=seed, step=step)
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


def read(source: "str | Path | bytes | Checkpoint") -> Checkpoint:
    if isinstance(source, Checkpoint):
        return source
    if isinstance(source, (bytes, bytearray)):
        return parse(bytes(source))
    return parse(Path(source).read_bytes())


def load(model, source: "str | Path | bytes | Checkpoint") -> Checkpoint:
    """Copy archived values into ``model`` in place after checking the signature."""
    ckpt = read(source)
    sig = model.signature()
    if ckpt.signature != sig:
        raise CheckpointError(f"architecture signature mismatch: archive has {ckpt.signature}, model has {sig}")
    params = dict(model.named_parameters())
    if list(params) != list(ckpt.arrays):
        raise CheckpointError("archive array names do not match the model")
    for name, arr in ckpt.arrays.items():
        params[name].data[...] = arr
    return ckpt
