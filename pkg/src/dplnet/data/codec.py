"""Binary PPM (P6) / PGM (P5) reading and writing.

Samples wider than 8 bits are big-endian, as the Netpbm formats require.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise ImageFormatError("truncated header", pos)
    return buf[start:pos], pos


def decode(buf: bytes) -> np.ndarray:
    """Decode P5/P6 bytes to (H, W) or (H, W, 3), uint8 or uint16."""
    if len(buf) < 2:
        raise ImageFormatError("file too short for a magic number", len(buf))
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"bad magic {magic!r}, expected P5 or P6", 0)
    pos = 2
    fields = []
    for label in ("width", "height", "maxval"):
        start = pos
        tok, pos = _read_token(buf, pos)
        try:
            value = int(tok)
        except ValueError:
            raise ImageFormatError(f"non-numeric {label} {tok!r}", start) from None
        if value <= 0:
            raise ImageFormatError(f"{label} must be positive", start)
        fields.append(value)
    width, height, maxval = fields
    if maxval > 65535:
        raise ImageFormatError("maxval above 65535", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("missing whitespace after maxval", pos)
    pos += 1
    channels = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    need = width * height * channels * dtype.itemsize
    if len(buf) - pos < need:
        raise ImageFormatError(f"truncated raster: need {need} bytes, have {len(buf) - pos}", len(buf))
    arr = np.frombuffer(buf, dtype=dtype, count=width * height * channels, offset=pos)
    arr = arr.astype(np.uint16 if maxval > 255 else np.uint8)
    if arr.max(initial=0) > maxval:
        raise ImageFormatError("sample exceeds maxval", pos)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape)


def encode(image: np.ndarray, maxval: int | None = None) -> bytes:
    """Encode (H, W) as P5 or (H, W, 3) as P6; uint16 data uses maxval 65535."""
    image = np.asarray(image)
    if image.dtype not in (np.uint8, np.uint16):
        raise TypeError(f"images must be uint8 or uint16, got {image.dtype}")
    if image.ndim == 3 and image.shape[2] == 3:
        magic = b"P6"
    elif image.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"unsupported image shape {image.shape}")
    if maxval is None:
        maxval = 65535 if image.dtype == np.uint16 else 255
    h, w = image.shape[:2]
    header = magic + f"\n{w} {h}\n{maxval}\n".encode("ascii")
    body = image.astype(">u2" if maxval > 255 else np.uint8).tobytes()
    return header + body


def load_image(path) -> np.ndarray:
    return decode(Path(path).read_bytes())


def save_image(image: np.ndarray, path) -> None:
    Path(path).write_bytes(encode(image))
