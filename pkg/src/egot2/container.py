"""Binary array container used for datasets and checkpoints.

A *blob* encodes one numpy array:

    magic "EGT2" | u8 version=1 | u8 dtype code | u8 rank | rank x u32 dims (LE) | payload (LE, row-major)

dtype codes: 1 = float32, 2 = float64, 3 = int64.  Multi-array files
(checkpoints) start with a blob-like header whose dtype code is 0, followed
by a u32 length-prefixed JSON index mapping each array name to the absolute
file offset of its blob plus its shape/dtype, followed by the blobs
themselves.  Everything is little-endian; identical inputs produce identical
bytes.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct

import numpy as np

__all__ = [
    "FormatError",
    "encode_array",
    "decode_array",
    "write_arrays",
    "read_arrays",
    "file_digest",
]

MAGIC = b"EGT2"
VERSION = 1

# dtype code 0 is reserved for the multi-array index header.
_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2, np.dtype(np.int64): 3}
_INDEX_CODE = 0
_MAX_RANK = 8

_DTYPE_NAME = {1: "f32", 2: "f64", 3: "i64"}
_NAME_TO_CODE = {v: k for k, v in _DTYPE_NAME.items()}


class FormatError(ValueError):
    """Raised when container bytes are malformed; names the offending field."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


def encode_array(arr: np.ndarray) -> bytes:
    """Serialize one array to blob bytes."""
    a = np.asarray(arr, order="C")  # ascontiguousarray would promote rank 0 to rank 1
    if a.dtype not in _DTYPE_TO_CODE:
        raise FormatError("dtype", f"unsupported dtype {a.dtype}")
    if a.ndim > _MAX_RANK:
        raise FormatError("rank", f"rank {a.ndim} exceeds {_MAX_RANK}")
    code = _DTYPE_TO_CODE[a.dtype]
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<BBB", VERSION, code, a.ndim))
    for dim in a.shape:
        out.write(struct.pack("<I", dim))
    out.write(a.astype(a.dtype.newbyteorder("<"), copy=False).tobytes(order="C"))
    return out.getvalue()


def decode_array(buf: bytes, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one blob starting at ``offset``.

    Returns (array, next_offset).  Raises FormatError on any malformed field.
    """
    need = offset + len(MAGIC) + 3
    if len(buf) < need:
        raise FormatError("header", "truncated before header end")
    if buf[offset : offset + 4] != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}, got {buf[offset:offset + 4]!r}")
    version, code, rank = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise FormatError("version", f"unsupported version {version}")
    if code not in _CODE_TO_DTYPE:
        raise FormatError("dtype", f"unknown dtype code {code}")
    if rank > _MAX_RANK:
        raise FormatError("rank", f"rank {rank} exceeds {_MAX_RANK}")
    pos = offset + 7
    if len(buf) < pos + 4 * rank:
        raise FormatError("dims", "truncated inside dimension list")
    shape = struct.unpack_from(f"<{rank}I", buf, pos) if rank else ()
    pos += 4 * rank
    dtype = _CODE_TO_DTYPE[code]
    count = 1
    for dim in shape:
        count *= dim
    nbytes = count * dtype.itemsize
    if len(buf) < pos + nbytes:
        raise FormatError("payload", f"need {nbytes} payload bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(shape)
    return arr.copy(), pos + nbytes


def write_arrays(path: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write a named-array container (checkpoint file).

    Arrays are written in sorted-name order so identical inputs yield
    identical bytes.  ``meta`` is an arbitrary JSON-serializable dict stored
    in the index block.
    """
    names = sorted(arrays)
    blobs = {name: encode_array(arrays[name]) for name in names}

    def index_bytes(entries: dict) -> bytes:
        doc = {"version": VERSION, "meta": meta or {}, "arrays": entries}
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")

    # Offsets depend on the index length, which depends on the offsets; the
    # digit-width of the offsets stabilizes after a couple of passes.
    entries = {
        name: {"offset": 0, "shape": list(arrays[name].shape),
               "dtype": _DTYPE_NAME[_DTYPE_TO_CODE[np.ascontiguousarray(arrays[name]).dtype]]}
        for name in names
    }
    header_fixed = len(MAGIC) + 3 + 4  # magic, version/code/rank bytes, u32 json length
    for _ in range(8):
        idx = index_bytes(entries)
        pos = header_fixed + len(idx)
        changed = False
        for name in names:
            if entries[name]["offset"] != pos:
                entries[name]["offset"] = pos
                changed = True
            pos += len(blobs[name])
        if not changed:
            break
    else:  # pragma: no cover - offsets always converge in a few passes
        raise RuntimeError("index offsets failed to converge")

    idx = index_bytes(entries)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<BBB", VERSION, _INDEX_CODE, 0))
        fh.write(struct.pack("<I", len(idx)))
        fh.write(idx)
        for name in names:
            fh.write(blobs[name])


def read_arrays(path: str) -> tuple[dict[str, np.ndarray], dict]:
    """Read a named-array container; returns (arrays, meta)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < len(MAGIC) + 3 + 4:
        raise FormatError("header", "file shorter than container header")
    if buf[:4] != MAGIC:
        raise FormatError("magic", f"expected {MAGIC!r}, got {buf[:4]!r}")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise FormatError("version", f"unsupported version {version}")
    if code != _INDEX_CODE or rank != 0:
        raise FormatError("index", "not a multi-array container (dtype code != 0)")
    (json_len,) = struct.unpack_from("<I", buf, 7)
    if len(buf) < 11 + json_len:
        raise FormatError("index", "truncated inside index block")
    try:
        doc = json.loads(buf[11 : 11 + json_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("index", f"index block is not valid JSON ({exc})") from None
    arrays: dict[str, np.ndarray] = {}
    for name, entry in doc.get("arrays", {}).items():
        arr, _ = decode_array(buf, entry["offset"])
        if list(arr.shape) != list(entry["shape"]):
            raise FormatError("shape", f"{name}: index says {entry['shape']}, blob has {list(arr.shape)}")
        if entry["dtype"] not in _NAME_TO_CODE:
            raise FormatError("dtype", f"{name}: unknown dtype name {entry['dtype']!r}")
        if _CODE_TO_DTYPE[_NAME_TO_CODE[entry["dtype"]]] != arr.dtype:
            raise FormatError("dtype", f"{name}: index says {entry['dtype']}, blob differs")
        arrays[name] = arr
    return arrays, doc.get("meta", {})


def file_digest(path: str) -> str:
    """sha256 hex digest of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
