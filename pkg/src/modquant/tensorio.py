"""Dense matrices, deterministic RNG, and the binary tensor container.

The container layout is:

    bytes 0..3    magic "CMDQ"
    bytes 4..7    format version, u32 little-endian
    bytes 8..15   manifest length in bytes, u64 little-endian
    manifest      UTF-8 JSON: {"tensors": {name: {dtype, shape, offset,
                  length}}, "attrs": {...}}
    payload       concatenated little-endian raw tensor bytes

Offsets in the manifest are relative to the start of the payload and must
tile it without gaps or overlaps. Supported dtypes are f32, f16, u32, i32;
tensors are 1-D or 2-D only.
"""

from __future__ import annotations

import json
import struct
from typing import Mapping

import numpy as np

from .errors import FormatError, InvariantError

MAGIC = b"CMDQ"
VERSION = 1

_HEADER = struct.Struct("<4sIQ")

DTYPES = {
    "f32": np.dtype("<f4"),
    "f16": np.dtype("<f2"),
    "u32": np.dtype("<u4"),
    "i32": np.dtype("<i4"),
}
_DTYPE_NAMES = {v: k for k, v in DTYPES.items()}


def dense_matrix(data, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    """Build a validated row-major f32 matrix.

    Accepts anything array-like; raises InvariantError on a non-2-D shape,
    zero dimensions, or non-finite values.
    """
    m = np.ascontiguousarray(np.asarray(data, dtype=np.float32))
    if rows is not None:
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise InvariantError(f"expected a 2-D matrix, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise InvariantError(f"matrix dimensions must be >= 1, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvariantError("matrix contains NaN or Inf")
    return m


def check_matrix(m: np.ndarray) -> np.ndarray:
    """Validate an existing array against the DenseMatrix invariants."""
    return dense_matrix(m)


def seeded_random_matrix(rows: int, cols: int, seed: int) -> np.ndarray:
    """Standard-normal f32 matrix; a pure function of (rows, cols, seed)."""
    if rows < 1 or cols < 1:
        raise InvariantError(f"dimensions must be >= 1, got ({rows}, {cols})")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((rows, cols), dtype=np.float32)


def _check_tensor(name: str, t: np.ndarray) -> np.ndarray:
    t = np.ascontiguousarray(t)
    dt = t.dtype.newbyteorder("<")
    if dt not in _DTYPE_NAMES:
        raise InvariantError(
            f"tensor {name!r}: dtype {t.dtype} not in {sorted(DTYPES)}"
        )
    if t.ndim not in (1, 2):
        raise InvariantError(f"tensor {name!r}: only 1-D/2-D supported, got {t.ndim}-D")
    return t.astype(dt, copy=False)


def write_container(
    path, tensors: Mapping[str, np.ndarray], attrs: dict | None = None
) -> None:
    """Write a tensor map (plus optional JSON-able attributes) to `path`."""
    entries = {}
    chunks = []
    offset = 0
    for name, tensor in tensors.items():
        t = _check_tensor(name, tensor)
        raw = t.tobytes()
        entries[name] = {
            "dtype": _DTYPE_NAMES[t.dtype.newbyteorder("<")],
            "shape": list(t.shape),
            "offset": offset,
            "length": len(raw),
        }
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"tensors": entries, "attrs": attrs or {}}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(manifest)))
        fh.write(manifest)
        for raw in chunks:
            fh.write(raw)


def _load(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the container header")
    magic, version, manifest_len = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported container version {version}")
    body = blob[_HEADER.size :]
    if len(body) < manifest_len:
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(body[:manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: malformed manifest: {exc}") from exc
    if not isinstance(manifest, dict) or "tensors" not in manifest:
        raise FormatError(f"{path}: manifest missing 'tensors' map")
    payload = body[manifest_len:]

    tensors = {}
    spans = []
    for name, entry in manifest["tensors"].items():
        try:
            dtype = DTYPES[entry["dtype"]]
            shape = tuple(int(s) for s in entry["shape"])
            off, length = int(entry["offset"]), int(entry["length"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: bad manifest entry for {name!r}") from exc
        if off < 0 or off + length > len(payload):
            raise FormatError(
                f"{path}: tensor {name!r} extends past the payload "
                f"({off}+{length} > {len(payload)})"
            )
        expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        if expected != length:
            raise FormatError(
                f"{path}: tensor {name!r} length {length} != shape bytes {expected}"
            )
        spans.append((off, off + length, name))
        tensors[name] = np.frombuffer(
            payload, dtype=dtype, count=expected // dtype.itemsize, offset=off
        ).reshape(shape).copy()
    spans.sort()
    for (_, end_a, name_a), (start_b, _, name_b) in zip(spans, spans[1:]):
        if start_b < end_a:
            raise FormatError(
                f"{path}: tensors {name_a!r} and {name_b!r} overlap in the payload"
            )
    return tensors, manifest.get("attrs", {})


def read_container(path) -> dict[str, np.ndarray]:
    """Read back the tensor map written by `write_container`, bit-exactly."""
    tensors, _ = _load(path)
    return tensors


def load_container(path) -> tuple[dict[str, np.ndarray], dict]:
    """Like `read_container` but also returns the manifest attributes."""
    return _load(path)
