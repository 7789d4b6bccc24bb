"""Versioned on-disk container: JSON-lines header + raw float64 block.

Byte layout (documented byte-exactly in docs/formats.md):

    bytes 0..3    magic (ASCII, file kind)
    bytes 4..7    format version, uint32 little-endian
    bytes 8..15   header length in bytes, uint64 little-endian
    next N bytes  UTF-8 JSON-lines header (one JSON object per line)
    rest          float64 little-endian data block
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC_DATASET = b"MMDS"
MAGIC_CHECKPOINT = b"MMCK"
FORMAT_VERSION = 1


class CorruptFileError(ValueError):
    """The file is not a container of the expected kind."""


class VersionMismatchError(ValueError):
    """The file was written by a newer format version."""


def write_container(path: str | Path, magic: bytes, header_lines: list[dict], block: np.ndarray) -> None:
    header = "\n".join(json.dumps(line, sort_keys=True) for line in header_lines).encode("utf-8")
    payload = np.ascontiguousarray(block, dtype="<f8").tobytes()
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(payload)


def read_container(path: str | Path, magic: bytes) -> tuple[list[dict], np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16 or raw[:4] != magic:
        raise CorruptFileError(f"{path}: corrupt file (expected magic {magic.decode()!r})")
    (version,) = struct.unpack("<I", raw[4:8])
    if version > FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path}: version mismatch (file v{version}, supported up to v{FORMAT_VERSION})"
        )
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CorruptFileError(f"{path}: corrupt file (truncated header)")
    try:
        header_lines = [json.loads(line) for line in raw[16 : 16 + hlen].decode("utf-8").splitlines()]
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CorruptFileError(f"{path}: corrupt file ({err})") from None
    body = raw[16 + hlen :]
    if len(body) % 8:
        raise CorruptFileError(f"{path}: corrupt file (data block not float64-aligned)")
    return header_lines, np.frombuffer(body, dtype="<f8").astype(np.float64)
