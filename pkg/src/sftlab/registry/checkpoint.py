"""Binary container for parameter trees, masks and datasets.

Layout: b"SFT1", an 8-byte little-endian header length, a UTF-8 JSON header,
then the raw payload. Every entry in the header records its byte range in
the payload; the payload carries a 64-bit FNV-1a digest.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from ..autodiff import Tensor
from ..errors import CheckpointError, DigestMismatchError, ShapeMismatchError
from .tree import ParamTree

MAGIC = b"SFT1"
FORMAT_VERSION = 1
_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK64 = 0xFFFFFFFFFFFFFFFF
_NP_DTYPES = {"f32": np.dtype("<f4"), "i32": np.dtype("<i4")}


def fnv1a64(data: bytes) -> str:
    h = _FNV_OFFSET
    for b in data:
        h = ((h ^ b) * _FNV_PRIME) & _MASK64
    return f"{h:016x}"


def _encode(dtype: str, arr: np.ndarray) -> bytes:
    if dtype == "bit":
        return np.packbits(np.asarray(arr, dtype=bool).ravel(), bitorder="little").tobytes()
    return np.ascontiguousarray(arr, dtype=_NP_DTYPES[dtype]).tobytes()


def _decode(dtype: str, shape, raw: bytes) -> np.ndarray:
    n = int(np.prod(shape, dtype=np.int64))
    if dtype == "bit":
        bits = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), count=n, bitorder="little")
        return bits.astype(bool).reshape(shape)
    if dtype not in _NP_DTYPES:
        raise CheckpointError(f"unknown entry dtype {dtype!r}")
    return np.frombuffer(raw, dtype=_NP_DTYPES[dtype]).reshape(shape).copy()


def write_container(path, kind: str, arrays: Mapping[str, np.ndarray], dtypes: Mapping[str, str] | str,
                    meta: dict | None = None) -> None:
    """Write ``arrays`` in insertion order. ``meta`` is merged into the header."""
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        dtype = dtypes if isinstance(dtypes, str) else dtypes[name]
        raw = _encode(dtype, arr)
        entries.append({"path": name, "dtype": dtype, "shape": list(np.shape(arr)),
                        "byte_offset": offset, "byte_len": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {"format_version": FORMAT_VERSION, "model_kind": kind, **(meta or {}),
              "entries": entries, "payload_digest": fnv1a64(payload)}
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    if len(blob) < 12 or blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an SFT1 container")
    (hlen,) = struct.unpack("<Q", blob[4:12])
    if 12 + hlen > len(blob):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed header") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')!r}")
    payload = blob[12 + hlen :]
    expected = sum(e["byte_len"] for e in header["entries"])
    if len(payload) != expected:
        raise DigestMismatchError(f"{path}: payload has {len(payload)} bytes, header declares {expected}")
    if fnv1a64(payload) != header["payload_digest"]:
        raise DigestMismatchError(f"{path}: payload digest mismatch")
    arrays = {}
    for e in header["entries"]:
        raw = payload[e["byte_offset"] : e["byte_offset"] + e["byte_len"]]
        arrays[e["path"]] = _decode(e["dtype"], tuple(e["shape"]), raw)
    return header, arrays


def shape_diff(expected: Mapping[str, tuple], found: Mapping[str, tuple], limit: int = 10) -> list[str]:
    diffs = []
    for p in expected:
        if p not in found:
            diffs.append(f"missing {p} {tuple(expected[p])}")
        elif tuple(found[p]) != tuple(expected[p]):
            diffs.append(f"{p}: expected {tuple(expected[p])}, found {tuple(found[p])}")
    diffs.extend(f"unexpected {p} {tuple(found[p])}" for p in found if p not in expected)
    return diffs[:limit] if limit else diffs


def check_shapes(expected: Mapping[str, tuple], found: Mapping[str, tuple]) -> None:
    all_diffs = shape_diff(expected, found, limit=0)
    if all_diffs:
        shown = "\n  ".join(all_diffs[:10])
        raise ShapeMismatchError(f"{len(all_diffs)} shape mismatches; first {min(10, len(all_diffs))}:\n  {shown}")


def save_checkpoint(path, params: ParamTree, model_kind: str = "", config: dict | None = None,
                    extra: dict | None = None) -> None:
    meta = {"config": config or {}}
    if extra:
        meta["extra"] = extra
    write_container(path, model_kind, params.arrays(), "f32", meta)


def load_checkpoint(path, expect_shapes: Mapping[str, tuple] | None = None,
                    requires_grad: bool = True) -> tuple[ParamTree, dict]:
    """Load a parameter tree; ``expect_shapes`` enables the shape-diff check."""
    header, arrays = read_container(path)
    if any(e["dtype"] != "f32" for e in header["entries"]):
        raise CheckpointError(f"{path}: not a parameter checkpoint")
    if expect_shapes is not None:
        check_shapes(expect_shapes, {k: v.shape for k, v in arrays.items()})
    tree = ParamTree({k: Tensor.wrap(v, requires_grad=requires_grad) for k, v in arrays.items()})
    for k, t in tree.items():
        t.name = k
    return tree, header
