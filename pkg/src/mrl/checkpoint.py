"""Versioned binary checkpoints.

Layout: the 4-byte magic "MRL1", then one record per parameter in the
model's deterministic traversal order:

    u32 LE   name byte length
    bytes    name (UTF-8)
    u32 LE   rank
    u32 LE * rank   dims
    f64 LE * prod(dims)   data

Float64 values round-trip bit-exactly, so save -> load -> save produces
byte-identical files. Loading verifies the magic, detects truncation
(naming the last complete entry), and matches names and shapes against
the target model, listing anything missing or unexpected.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import CheckpointError
from .layers import Module

MAGIC = b"MRL1"


def save_checkpoint(module: Module, path) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        for name, p in module.named_parameters():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            shape = p.data.shape
            f.write(struct.pack("<I", len(shape)))
            for dim in shape:
                f.write(struct.pack("<I", dim))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def _read_exact(f, n: int, what: str, last_complete: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        after = f"after entry {last_complete!r}" if last_complete else "at the header"
        raise CheckpointError(f"truncated checkpoint: short read of {what} {after}")
    return buf


def read_checkpoint(path) -> dict[str, np.ndarray]:
    """All entries as {name: array}, in file order."""
    entries: dict[str, np.ndarray] = {}
    last = ""
    try:
        f = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot open checkpoint {path}: {exc}") from None
    with f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(
                f"bad magic {magic!r}; expected {MAGIC!r}")
        while True:
            head = f.read(4)
            if len(head) == 0:
                return entries
            if len(head) != 4:
                raise CheckpointError(
                    f"truncated checkpoint: short read of name length after "
                    f"entry {last!r}")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(f, name_len, "name", last).decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank", last))
            dims = struct.unpack(
                f"<{rank}I", _read_exact(f, 4 * rank, "dims", last)) if rank else ()
            count = 1
            for dim in dims:
                count *= dim
            raw = _read_exact(f, 8 * count, f"data of {name!r}", last)
            if name in entries:
                raise CheckpointError(f"duplicate entry {name!r}")
            entries[name] = np.frombuffer(raw, dtype="<f8").reshape(dims).copy()
            last = name


def load_checkpoint(module: Module, path) -> None:
    """Copy a checkpoint's values into the module's parameters, in place."""
    entries = read_checkpoint(path)
    params = dict(module.named_parameters())
    missing = [n for n in params if n not in entries]
    extra = [n for n in entries if n not in params]
    if missing or extra:
        raise CheckpointError(
            f"checkpoint does not match the model: missing {missing}, "
            f"unexpected {extra}")
    for name, p in params.items():
        value = entries[name]
        if value.shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {value.shape}, "
                f"model {p.data.shape}")
        p.data[...] = value
