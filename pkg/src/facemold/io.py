"""Image file formats: PFM depth, 8-bit PGM intensity, PNG masks and channel maps.

PNG files are encoded here with zlib (filter type 0, fixed compression level)
so output bytes are deterministic; reading goes through Pillow.
"""

from __future__ import annotations

import re
import struct
import zlib
from pathlib import Path

import numpy as np


def write_pfm(path, data: np.ndarray, scale: float = -1.0) -> None:
    """Write a grayscale (H x W) or color (H x W x 3) PFM, little-endian by default.

    Rows are stored bottom-to-top as the format requires.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        tag = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM needs H x W or H x W x 3 data, got {data.shape}")
    h, w = data.shape[:2]
    dtype = "<f4" if scale < 0 else ">f4"
    payload = np.ascontiguousarray(np.flipud(data), dtype=dtype).tobytes()
    with open(path, "wb") as fh:
        fh.write(tag + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(f"{scale:.6f}\n".encode())
        fh.write(payload)


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        tag = fh.readline().strip()
        if tag not in (b"Pf", b"PF"):
            raise ValueError(f"{path}: not a PFM file")
        dims = fh.readline()
        while dims.startswith(b"#"):
            dims = fh.readline()
        match = re.match(rb"^\s*(\d+)\s+(\d+)\s*$", dims)
        if not match:
            raise ValueError(f"{path}: malformed PFM header")
        w, h = int(match.group(1)), int(match.group(2))
        scale = float(fh.readline().strip())
        channels = 3 if tag == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(fh.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return np.flipud(data.reshape(shape)).astype(np.float64)


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM; input intensities in [0, 1] are rounded to 0..255."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError("PGM needs a 2-D image")
    q = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(q.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (8 or 16 bit) and return intensities in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = np.uint8 if maxval < 256 else ">u2"
    data = np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64) / maxval


def _png_chunk(kind: bytes, body: bytes) -> bytes:
    crc = zlib.crc32(kind + body) & 0xFFFFFFFF
    return struct.pack(">I", len(body)) + kind + body + struct.pack(">I", crc)


def encode_png(pixels: np.ndarray) -> bytes:
    """Encode uint8/uint16 gray (H x W) or RGB (H x W x 3) pixels."""
    pixels = np.asarray(pixels)
    if pixels.dtype == np.uint8:
        depth = 8
    elif pixels.dtype == np.uint16:
        depth = 16
    else:
        raise ValueError(f"PNG pixels must be uint8 or uint16, got {pixels.dtype}")
    if pixels.ndim == 2:
        color = 0
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        color = 2
    else:
        raise ValueError(f"PNG needs H x W or H x W x 3, got {pixels.shape}")
    h, w = pixels.shape[:2]
    rows = pixels.astype(">u2" if depth == 16 else np.uint8).reshape(h, -1).view(np.uint8)
    raw = np.hstack([np.zeros((h, 1), np.uint8), rows.reshape(h, -1)]).tobytes()
    ihdr = struct.pack(">IIBBBBB", w, h, depth, color, 0, 0, 0)
    return (
        b"\x89PNG\r\n\x1a\n"
        + _png_chunk(b"IHDR", ihdr)
        + _png_chunk(b"IDAT", zlib.compress(raw, 6))
        + _png_chunk(b"IEND", b"")
    )


def write_png(path, pixels: np.ndarray) -> None:
    Path(path).write_bytes(encode_png(pixels))


def quantize16(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] to 0..65535 by ``round(clip(v, 0, 1) * 65535)``."""
    return np.round(np.clip(values, 0.0, 1.0) * 65535.0).astype(np.uint16)


def write_channel_png(path, data: np.ndarray, valid=None, signed: bool = False) -> None:
    """Write a 3-channel map as 16-bit RGB.

    ``signed=True`` first maps [-1, 1] to [0, 1] (used for normal maps).
    Invalid pixels are written as 0.
    """
    data = np.asarray(data, dtype=np.float64)
    vals = 0.5 * (data + 1.0) if signed else data
    if valid is not None:
        vals = np.where(np.asarray(valid)[..., None], vals, 0.0)
    write_png(path, quantize16(vals))


def write_scalar_png(path, data: np.ndarray, vmax: float | None = None) -> None:
    """16-bit gray PNG of a nonnegative map scaled by ``vmax`` (default: its max)."""
    data = np.asarray(data, dtype=np.float64)
    top = float(data.max()) if vmax is None else float(vmax)
    write_png(path, quantize16(data / top if top > 0 else np.zeros_like(data)))


def write_mask_png(path, mask: np.ndarray) -> None:
    write_png(path, np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8))


def read_mask_png(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as img:
        arr = np.asarray(img)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr > 0
