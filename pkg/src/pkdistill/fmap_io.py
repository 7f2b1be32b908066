"""Binary feature-dump files ("FMP1"): a pyramid of float32 tensors.

Layout, all integers unsigned 32-bit little-endian:

    magic "FMP1" | level_count | per level: b, c, h, w | b*c*h*w float32 LE

Values are row-major with batch outermost and width innermost.  All levels
must share the batch size, the file size must match the header exactly, and
non-finite values are rejected with their (level, flat index).  Writes go to
a temp file in the target directory and are renamed into place, so a failed
write never leaves a partial file.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from .features import FeatureMap, FeaturePyramid

__all__ = ["FmapFormatError", "read_fmap", "write_fmap", "MAGIC"]

MAGIC = b"FMP1"
_U32 = struct.Struct("<I")


class FmapFormatError(ValueError):
    """Malformed feature-dump file; carries the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


def read_fmap(path) -> FeaturePyramid:
    """Read and validate an FMP1 file into a FeaturePyramid (float64 inside)."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8:
        raise FmapFormatError(f"file too short for header ({len(blob)} bytes)", 0)
    if blob[:4] != MAGIC:
        raise FmapFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", 0)
    (level_count,) = _U32.unpack_from(blob, 4)
    if level_count == 0:
        raise FmapFormatError("level count is zero", 4)
    offset = 8
    levels = []
    batch = None
    for level in range(level_count):
        if offset + 16 > len(blob):
            raise FmapFormatError(f"truncated dimension header for level {level}", offset)
        b, c, h, w = struct.unpack_from("<4I", blob, offset)
        if min(b, c, h, w) < 1:
            raise FmapFormatError(
                f"level {level} has a zero dimension (b={b}, c={c}, h={h}, w={w})", offset
            )
        if batch is None:
            batch = b
        elif b != batch:
            raise FmapFormatError(
                f"level {level} batch size {b} differs from level 0 batch size {batch}", offset
            )
        offset += 16
        count = b * c * h * w
        nbytes = count * 4
        if offset + nbytes > len(blob):
            raise FmapFormatError(
                f"truncated payload for level {level}: need {nbytes} bytes, "
                f"have {len(blob) - offset}",
                offset,
            )
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        finite = np.isfinite(values)
        if not finite.all():
            bad = int(np.flatnonzero(~finite)[0])
            raise FmapFormatError(
                f"non-finite value at level {level}, flat index {bad}", offset + bad * 4
            )
        levels.append(FeatureMap(values.astype(np.float64).reshape(b, c, h, w)))
        offset += nbytes
    if offset != len(blob):
        raise FmapFormatError(
            f"{len(blob) - offset} trailing bytes beyond the header-implied size", offset
        )
    return FeaturePyramid(tuple(levels))


def _encode(pyr: FeaturePyramid) -> bytes:
    parts = [MAGIC, _U32.pack(len(pyr.levels))]
    for lvl in pyr.levels:
        parts.append(struct.pack("<4I", lvl.b, lvl.c, lvl.h, lvl.w))
        parts.append(lvl.data.astype("<f4").tobytes())
    return b"".join(parts)


def write_fmap(path, pyr: FeaturePyramid) -> None:
    """Write a pyramid as FMP1 (values cast to float32), atomically.

    Reading a file and writing it back reproduces the bytes exactly, since
    float32 -> float64 -> float32 is lossless.
    """
    atomic_write_bytes(path, _encode(pyr))


def atomic_write_bytes(path, blob: bytes) -> None:
    """Write via a temp file in the same directory, then rename into place."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))
