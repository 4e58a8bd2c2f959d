#!/usr/bin/env python3
"""
MAURA1 binary container.

Single arrays are stored as:
    magic "MAURA1" (6 bytes) | u8 dtype code | u8 rank | rank x u32 LE dims | row-major LE payload

Checkpoint bundles reuse the same magic with dtype code 255:
    magic | u8 255 | u32 LE header length | UTF-8 JSON header | concatenated array records

The bundle header carries an entry table (name -> offset/length inside the
payload) and the SHA-256 of the payload, which is verified on every load.
"""

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
from loguru import logger

from maura.constants import BUNDLE_CODE, DTYPE_CODES, DTYPE_TO_CODE, FORMAT_VERSION, MAGIC
from maura.exceptions import CheckpointIntegrityError, DatasetFormatError, ValidationError

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """Write bytes to a temp file in the target directory, then rename over the target."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def _storable(arr: np.ndarray) -> np.ndarray:
    """Convert an array to one of the three storable dtypes."""
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    elif arr.dtype.kind == "f" and arr.dtype != np.float32:
        arr = arr.astype(np.float32)
    elif arr.dtype.kind in "iu" and arr.dtype not in (np.uint8, np.int32):
        info = np.iinfo(np.int32)
        if arr.size and (arr.min() < info.min or arr.max() > info.max):
            raise ValidationError(f"Integer array with range [{arr.min()}, {arr.max()}] does not fit int32")
        arr = arr.astype(np.int32)

    dtype = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
    if dtype not in DTYPE_TO_CODE:
        raise ValidationError(f"Unsupported dtype for MAURA1 array: {arr.dtype}")
    return np.ascontiguousarray(arr, dtype=dtype)


def encode_array(arr: np.ndarray) -> bytes:
    """Serialize one array to a MAURA1 record."""
    arr = _storable(arr)
    code = DTYPE_TO_CODE[arr.dtype]
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_array(buf: bytes, path: PathLike = "<memory>", offset: int = 0) -> Tuple[np.ndarray, int]:
    """
    Parse one MAURA1 record.

    Args:
        buf: Raw bytes
        path: File name used in diagnostics
        offset: Start of the record inside buf

    Returns:
        Tuple of (array, offset just past the record)

    Raises:
        DatasetFormatError: bad magic, unknown dtype code, or truncated data
    """
    head_len = len(MAGIC) + 2
    if len(buf) - offset < head_len:
        raise DatasetFormatError(path, "truncated header")
    if buf[offset:offset + len(MAGIC)] != MAGIC:
        found = bytes(buf[offset:offset + len(MAGIC)])
        raise DatasetFormatError(path, f"bad magic {found!r}, expected {MAGIC!r}")

    code, rank = struct.unpack_from("<BB", buf, offset + len(MAGIC))
    if code not in DTYPE_CODES:
        raise DatasetFormatError(path, f"unknown dtype code {code}")

    pos = offset + head_len
    if len(buf) - pos < 4 * rank:
        raise DatasetFormatError(path, "truncated dimension table")
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank

    dtype = DTYPE_CODES[code]
    n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - pos < n_bytes:
        raise DatasetFormatError(path, f"truncated payload: expected {n_bytes} bytes, found {len(buf) - pos}")

    arr = np.frombuffer(buf, dtype=dtype, count=n_bytes // dtype.itemsize, offset=pos).reshape(dims).copy()
    return arr, pos + n_bytes


def write_array(path: PathLike, arr: np.ndarray) -> Path:
    """Atomically write a single MAURA1 array file."""
    return atomic_write_bytes(path, encode_array(arr))


def read_array(path: PathLike) -> np.ndarray:
    """Read a single MAURA1 array file; trailing bytes are a format error."""
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) >= len(MAGIC) + 1 and buf[:len(MAGIC)] == MAGIC and buf[len(MAGIC)] == BUNDLE_CODE:
        raise DatasetFormatError(path, "file is a checkpoint bundle, not an array")
    arr, end = decode_array(buf, path)
    if end != len(buf):
        raise DatasetFormatError(path, f"{len(buf) - end} trailing bytes after payload")
    return arr


def write_bundle(path: PathLike, header: Dict, arrays: Dict[str, np.ndarray]) -> str:
    """
    Atomically write a checkpoint bundle.

    Args:
        path: Target file
        header: JSON-serializable metadata (configs, kind, references)
        arrays: Named arrays; written in sorted-name order

    Returns:
        Hex SHA-256 content hash of the payload
    """
    records = []
    entries = []
    offset = 0
    for name in sorted(arrays):
        record = encode_array(arrays[name])
        entries.append({"name": name, "offset": offset, "length": len(record)})
        records.append(record)
        offset += len(record)
    payload = b"".join(records)
    content_hash = hashlib.sha256(payload).hexdigest()

    full_header = dict(header)
    full_header["format_version"] = FORMAT_VERSION
    full_header["entries"] = entries
    full_header["content_hash"] = content_hash
    header_bytes = json.dumps(full_header, sort_keys=True).encode("utf-8")

    blob = MAGIC + struct.pack("<BI", BUNDLE_CODE, len(header_bytes)) + header_bytes + payload
    atomic_write_bytes(path, blob)
    logger.debug(f"Wrote bundle {path} ({len(blob):,} bytes, {len(entries)} arrays)")
    return content_hash


def read_bundle(path: PathLike) -> Tuple[Dict, Dict[str, np.ndarray]]:
    """
    Read and verify a checkpoint bundle.

    Returns:
        Tuple of (header dict, name -> array)

    Raises:
        DatasetFormatError: malformed container
        CheckpointIntegrityError: payload hash does not match the header
    """
    path = Path(path)
    buf = path.read_bytes()
    head_len = len(MAGIC) + 5
    if len(buf) < head_len or buf[:len(MAGIC)] != MAGIC:
        raise DatasetFormatError(path, "bad magic for checkpoint bundle")
    code, n_header = struct.unpack_from("<BI", buf, len(MAGIC))
    if code != BUNDLE_CODE:
        raise DatasetFormatError(path, f"dtype code {code} is not a bundle")
    if len(buf) < head_len + n_header:
        raise DatasetFormatError(path, "truncated bundle header")

    try:
        header = json.loads(buf[head_len:head_len + n_header].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(path, f"unreadable bundle header: {e}") from e

    payload = buf[head_len + n_header:]
    actual = hashlib.sha256(payload).hexdigest()
    if actual != header.get("content_hash"):
        raise CheckpointIntegrityError(
            f"{path}: content hash mismatch (header {header.get('content_hash')}, payload {actual})"
        )

    arrays = {}
    for entry in header["entries"]:
        arr, end = decode_array(payload, path, entry["offset"])
        if end - entry["offset"] != entry["length"]:
            raise DatasetFormatError(path, f"entry {entry['name']} length mismatch")
        arrays[entry["name"]] = arr
    return header, arrays


def bundle_hash(path: PathLike) -> str:
    """Content hash recorded in a bundle header (verified)."""
    header, _ = read_bundle(path)
    return header["content_hash"]
