"""Minimal PNG codec for 8/16-bit gray, gray+alpha and RGB images.

Pillow cannot write 16-bit RGB or two-channel 16-bit data, both of which
the ISP emits, so the few lines of chunk framing live here.  Output is
byte-deterministic (fixed zlib level, filter type 0 on every row).  The
reader accepts any standard non-interlaced file of those colour types.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

_SIGNATURE = b"\x89PNG\r\n\x1a\n"
_COLOR_TYPES = {1: 0, 2: 4, 3: 2}
_CHANNELS = {v: k for k, v in _COLOR_TYPES.items()}


class PngError(ValueError):
    pass


def _chunk(tag: bytes, payload: bytes) -> bytes:
    crc = zlib.crc32(tag + payload) & 0xFFFFFFFF
    return struct.pack(">I", len(payload)) + tag + payload + struct.pack(">I", crc)


def encode_png(data: np.ndarray, bit_depth: int) -> bytes:
    """Encode an (H, W) or (H, W, C) integer array, C in {1, 2, 3}."""
    if bit_depth not in (8, 16):
        raise PngError(f"unsupported PNG bit depth {bit_depth}")
    arr = np.asarray(data)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    if c not in _COLOR_TYPES:
        raise PngError(f"unsupported channel count {c}")
    if arr.size and (arr.min() < 0 or arr.max() >= 1 << bit_depth):
        raise PngError(f"sample out of range for {bit_depth}-bit PNG")
    dtype = ">u2" if bit_depth == 16 else "u1"
    rows = arr.astype(dtype).reshape(h, w * c).view(np.uint8).reshape(h, -1)
    raw = np.concatenate([np.zeros((h, 1), np.uint8), rows], axis=1).tobytes()
    ihdr = struct.pack(">IIBBBBB", w, h, bit_depth, _COLOR_TYPES[c], 0, 0, 0)
    return (_SIGNATURE + _chunk(b"IHDR", ihdr)
            + _chunk(b"IDAT", zlib.compress(raw, 6)) + _chunk(b"IEND", b""))


def _paeth(a, b, c):
    p = a + b - c
    pa, pb, pc = abs(p - a), abs(p - b), abs(p - c)
    if pa <= pb and pa <= pc:
        return a
    return b if pb <= pc else c


def _unfilter(raw: bytes, h: int, stride: int, bpp: int) -> np.ndarray:
    buf = np.frombuffer(raw, np.uint8)
    if buf.size != h * (stride + 1):
        raise PngError("decompressed image data has wrong length")
    buf = buf.reshape(h, stride + 1)
    out = np.zeros((h, stride), np.uint8)
    prev = np.zeros(stride, np.int32)
    for y in range(h):
        ftype = buf[y, 0]
        line = buf[y, 1:].astype(np.int32)
        if ftype == 0:
            cur = line
        elif ftype == 2:
            cur = (line + prev) & 0xFF
        else:
            cur = line.copy()
            for x in range(stride):
                a = cur[x - bpp] if x >= bpp else 0
                c = prev[x - bpp] if x >= bpp else 0
                if ftype == 1:
                    pred = a
                elif ftype == 3:
                    pred = (a + prev[x]) >> 1
                elif ftype == 4:
                    pred = _paeth(a, prev[x], c)
                else:
                    raise PngError(f"bad filter type {ftype} on row {y}")
                cur[x] = (cur[x] + pred) & 0xFF
        out[y] = cur
        prev = cur
    return out


def decode_png(blob: bytes) -> tuple[np.ndarray, int]:
    """Decode to an (H, W) or (H, W, C) uint16/uint8 array plus bit depth."""
    if not blob.startswith(_SIGNATURE):
        raise PngError("not a PNG file")
    pos = len(_SIGNATURE)
    header = None
    idat = []
    while pos < len(blob):
        if pos + 12 > len(blob):
            raise PngError("truncated chunk")
        (length,) = struct.unpack(">I", blob[pos:pos + 4])
        tag = blob[pos + 4:pos + 8]
        payload = blob[pos + 8:pos + 8 + length]
        crc = blob[pos + 8 + length:pos + 12 + length]
        if len(crc) != 4 or struct.unpack(">I", crc)[0] != zlib.crc32(tag + payload):
            raise PngError(f"bad CRC in {tag!r} chunk")
        pos += 12 + length
        if tag == b"IHDR":
            header = struct.unpack(">IIBBBBB", payload)
        elif tag == b"IDAT":
            idat.append(payload)
        elif tag == b"IEND":
            break
    if header is None:
        raise PngError("missing IHDR")
    w, h, depth, ctype, _, _, interlace = header
    if depth not in (8, 16) or ctype not in _CHANNELS or interlace:
        raise PngError(f"unsupported PNG (depth={depth}, color type={ctype}, interlace={interlace})")
    c = _CHANNELS[ctype]
    bpp = c * depth // 8
    try:
        stream = zlib.decompress(b"".join(idat))
    except zlib.error as exc:
        raise PngError(f"corrupt image data: {exc}") from None
    rows = _unfilter(stream, h, w * bpp, bpp)
    if depth == 16:
        arr = rows.view(">u2").astype(np.uint16)
    else:
        arr = rows
    arr = arr.reshape(h, w, c)
    return (arr[:, :, 0] if c == 1 else arr), depth
