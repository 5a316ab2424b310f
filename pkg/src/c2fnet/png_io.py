"""Minimal PNG reader/writer for 8-bit grayscale and RGB images.

Writes non-interlaced images with filter type 0 on every row; reads any
non-interlaced 8-bit gray/RGB file (all five row filters). Everything else
is rejected rather than guessed at.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class PngFormatError(ValueError):
    """Structurally invalid or corrupt PNG data."""


class UnsupportedPngError(PngFormatError):
    """Valid PNG, but a flavor this codec does not handle."""


def _chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def write_png(path, image: np.ndarray) -> None:
    """Write an (h, w) grayscale or (h, w, 3) RGB uint8 array."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        raise UnsupportedPngError(f"only 8-bit images are written, got dtype {arr.dtype}")
    if arr.ndim == 2:
        color_type = 0
        channels = 1
    elif arr.ndim == 3 and arr.shape[2] == 3:
        color_type = 2
        channels = 3
    else:
        raise UnsupportedPngError(f"expected (h, w) or (h, w, 3), got shape {arr.shape}")
    h, w = arr.shape[0], arr.shape[1]
    ihdr = struct.pack(">IIBBBBB", w, h, 8, color_type, 0, 0, 0)
    rows = arr.reshape(h, w * channels)
    raw = b"".join(b"\x00" + rows[i].tobytes() for i in range(h))
    data = zlib.compress(raw, 6)
    blob = _SIGNATURE + _chunk(b"IHDR", ihdr) + _chunk(b"IDAT", data) + _chunk(b"IEND", b"")
    with open(path, "wb") as f:
        f.write(blob)


def _paeth(a: int, b: int, c: int) -> int:
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(raw: bytes, h: int, w: int, channels: int) -> np.ndarray:
    stride = w * channels
    if len(raw) != h * (stride + 1):
        raise PngFormatError(f"decompressed size {len(raw)} != expected {h * (stride + 1)}")
    out = np.zeros((h, stride), dtype=np.uint8)
    for y in range(h):
        ftype = raw[y * (stride + 1)]
        row = np.frombuffer(raw, dtype=np.uint8, count=stride, offset=y * (stride + 1) + 1)
        prev = out[y - 1] if y > 0 else np.zeros(stride, dtype=np.uint8)
        if ftype == 0:
            out[y] = row
        elif ftype == 1:  # Sub: prefix sum per channel lane
            lanes = row.reshape(w, channels).astype(np.int64)
            out[y] = (lanes.cumsum(axis=0) % 256).astype(np.uint8).reshape(stride)
        elif ftype == 2:  # Up
            out[y] = row + prev
        elif ftype == 3:  # Average
            cur = out[y]
            for x in range(stride):
                left = int(cur[x - channels]) if x >= channels else 0
                cur[x] = (int(row[x]) + (left + int(prev[x])) // 2) % 256
        elif ftype == 4:  # Paeth
            cur = out[y]
            for x in range(stride):
                left = int(cur[x - channels]) if x >= channels else 0
                up = int(prev[x])
                diag = int(prev[x - channels]) if x >= channels else 0
                cur[x] = (int(row[x]) + _paeth(left, up, diag)) % 256
        else:
            raise PngFormatError(f"unknown row filter {ftype}")
    if channels == 1:
        return out.reshape(h, w)
    return out.reshape(h, w, channels)


def read_png(path) -> np.ndarray:
    """Read an 8-bit gray or RGB PNG into (h, w) or (h, w, 3) uint8."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != _SIGNATURE:
        raise PngFormatError(f"{path}: not a PNG file")
    pos = 8
    ihdr = None
    idat = []
    while pos + 8 <= len(blob):
        (length,) = struct.unpack(">I", blob[pos : pos + 4])
        tag = blob[pos + 4 : pos + 8]
        payload = blob[pos + 8 : pos + 8 + length]
        if len(payload) != length or pos + 12 + length > len(blob):
            raise PngFormatError(f"{path}: truncated chunk {tag!r}")
        (crc,) = struct.unpack(">I", blob[pos + 8 + length : pos + 12 + length])
        if zlib.crc32(tag + payload) & 0xFFFFFFFF != crc:
            raise PngFormatError(f"{path}: CRC mismatch in chunk {tag!r}")
        pos += 12 + length
        if tag == b"IHDR":
            ihdr = payload
        elif tag == b"IDAT":
            idat.append(payload)
        elif tag == b"IEND":
            break
    if ihdr is None or not idat:
        raise PngFormatError(f"{path}: missing IHDR or IDAT")
    w, h, depth, color_type, compression, filt, interlace = struct.unpack(">IIBBBBB", ihdr)
    if depth != 8:
        raise UnsupportedPngError(f"{path}: bit depth {depth} unsupported (8 only)")
    if color_type not in (0, 2):
        raise UnsupportedPngError(f"{path}: color type {color_type} unsupported (gray/RGB only)")
    if interlace != 0:
        raise UnsupportedPngError(f"{path}: interlaced images unsupported")
    if compression != 0 or filt != 0:
        raise PngFormatError(f"{path}: nonstandard compression/filter method")
    try:
        raw = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise PngFormatError(f"{path}: IDAT decompression failed: {exc}") from exc
    return _unfilter(raw, h, w, 1 if color_type == 0 else 3)
