"""Single-file binary checkpoints.

Layout (all integers little-endian):

    magic b"OPLM" | u32 format version | u32 section count | sections...

Every section is length-prefixed and named:

    u16 name length | name utf-8 | u8 kind | payload
    kind 0 (tensor): u8 ndim | u64 per-dim extents | float64 data, C order
    kind 1 (bytes):  u64 length | raw bytes

Checkpoints are self-contained: parameters, optimizer accumulators, the rng
state, the full resolved config text, and book-keeping scalars all travel in
one file, so evaluation needs nothing but the checkpoint path.
"""

from __future__ import annotations

import io
import json
import struct

import numpy as np

MAGIC = b"OPLM"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _write_section(buf: io.BytesIO, name: str, value) -> None:
    encoded = name.encode("utf-8")
    buf.write(struct.pack("<H", len(encoded)))
    buf.write(encoded)
    if isinstance(value, bytes):
        buf.write(struct.pack("<B", 1))
        buf.write(struct.pack("<Q", len(value)))
        buf.write(value)
    else:
        arr = np.asarray(value, dtype="<f8")  # asarray keeps 0-d scalars 0-d
        buf.write(struct.pack("<B", 0))
        buf.write(struct.pack("<B", arr.ndim))
        for extent in arr.shape:
            buf.write(struct.pack("<Q", extent))
        buf.write(arr.tobytes())  # C order regardless of the input layout


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointError("truncated checkpoint file")
    return data


def _read_section(fh):
    (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
    name = _read_exact(fh, name_len).decode("utf-8")
    (kind,) = struct.unpack("<B", _read_exact(fh, 1))
    if kind == 1:
        (length,) = struct.unpack("<Q", _read_exact(fh, 8))
        return name, _read_exact(fh, length)
    if kind != 0:
        raise CheckpointError(f"unknown section kind {kind}")
    (ndim,) = struct.unpack("<B", _read_exact(fh, 1))
    shape = tuple(struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(ndim))
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(_read_exact(fh, count * 8), dtype="<f8").reshape(shape)
    return name, np.array(data)  # owned, native layout


def checkpoint_save(path: str, sections: dict) -> None:
    """Write named tensors (ndarray) and byte strings atomically."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(sections)))
    for name in sorted(sections):
        _write_section(buf, name, sections[name])
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    import os

    os.replace(tmp, path)


def checkpoint_load(path: str) -> dict:
    """Read every section; raises on any corruption, never partial state."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4) != MAGIC:
            raise CheckpointError(f"{path}: bad magic bytes")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != VERSION:
            raise CheckpointError(f"{path}: format version {version}, expected {VERSION}")
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        sections = {}
        for _ in range(count):
            name, value = _read_section(fh)
            sections[name] = value
    return sections


# -- helpers for the training loop -------------------------------------------------


def pack_state(
    config_text: str,
    iteration: int,
    params: dict[str, np.ndarray],
    adam_m: dict[str, np.ndarray] | None = None,
    adam_v: dict[str, np.ndarray] | None = None,
    adam_step_count: int = 0,
    rng_state: dict | None = None,
    best: dict[str, np.ndarray] | None = None,
    best_metric: float | None = None,
    best_iteration: int = 0,
) -> dict:
    sections: dict = {
        "meta/config": config_text.encode("utf-8"),
        "meta/iteration": np.asarray(float(iteration)),
    }
    for k, v in params.items():
        sections[f"p/{k}"] = v
    for prefix, table in (("m", adam_m), ("v", adam_v), ("best", best)):
        if table is not None:
            for k, v in table.items():
                sections[f"{prefix}/{k}"] = v
    sections["meta/adam_step"] = np.asarray(float(adam_step_count))
    if rng_state is not None:
        sections["meta/rng"] = json.dumps(rng_state).encode("utf-8")
    if best_metric is not None:
        sections["meta/best_metric"] = np.asarray(best_metric)
        sections["meta/best_iteration"] = np.asarray(float(best_iteration))
    return sections


def unpack_group(sections: dict, prefix: str) -> dict[str, np.ndarray]:
    plen = len(prefix) + 1
    return {k[plen:]: v for k, v in sections.items() if k.startswith(prefix + "/")}


def unpack_rng(sections: dict) -> dict | None:
    raw = sections.get("meta/rng")
    return json.loads(raw.decode("utf-8")) if raw is not None else None
