"""File formats: Middlebury .flo, grayscale PFM, binary PPM (P6).

All payloads are 32-bit little-endian floats (.flo / PFM) or 8-bit RGB
(PPM), matching the formats' conventions exactly so files interoperate with
other tools.
"""

from __future__ import annotations

import numpy as np

FLO_TAG = 202021.25


class FormatError(ValueError):
    """A file did not match its declared format."""


def write_flo(field: np.ndarray, path) -> None:
    """Middlebury format: float32 tag, int32 width/height, row-major (u, v) pairs."""
    field = np.asarray(field)
    if field.ndim != 3 or field.shape[0] != 2:
        raise FormatError(f"write_flo: expected a [2, H, W] field, got {field.shape}")
    _, h, w = field.shape
    with open(path, "wb") as f:
        np.array([FLO_TAG], dtype="<f4").tofile(f)
        np.array([w, h], dtype="<i4").tofile(f)
        np.transpose(field, (1, 2, 0)).astype("<f4").tofile(f)


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 12:
        raise FormatError(f"read_flo: file too short ({len(raw)} bytes)")
    tag = np.frombuffer(raw, dtype="<f4", count=1)[0]
    if tag != np.float32(FLO_TAG):
        raise FormatError(f"read_flo: bad magic tag {tag!r}, expected {FLO_TAG}")
    w, h = (int(v) for v in np.frombuffer(raw, dtype="<i4", count=2, offset=4))
    if w <= 0 or h <= 0:
        raise FormatError(f"read_flo: invalid dimensions {w}x{h}")
    expected = 12 + 8 * w * h
    if len(raw) != expected:
        raise FormatError(f"read_flo: expected {expected} bytes for {w}x{h}, got {len(raw)}")
    data = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    return np.transpose(data, (2, 0, 1)).astype(np.float64)


def write_pfm(field: np.ndarray, path) -> None:
    """Grayscale PFM, bottom-to-top rows, negative scale for little-endian."""
    field = np.asarray(field)
    if field.ndim != 2:
        raise FormatError(f"write_pfm: expected an [H, W] map, got {field.shape}")
    h, w = field.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        field[::-1].astype("<f4").tofile(f)


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise FormatError(f"read_pfm: bad magic {magic!r}, expected b'Pf' (grayscale)")
        dims = f.readline().split()
        if len(dims) != 2:
            raise FormatError(f"read_pfm: malformed dimension line {dims!r}")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        if scale == 0:
            raise FormatError("read_pfm: zero scale")
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.fromfile(f, dtype=dtype, count=w * h)
    if data.size != w * h:
        raise FormatError(f"read_pfm: expected {w * h} floats, got {data.size}")
    return data.reshape(h, w)[::-1].astype(np.float64)


def read_ppm(path) -> np.ndarray:
    """Binary PPM (P6, maxval 255) -> [3, H, W] float image in [-1, 1]."""
    with open(path, "rb") as f:
        raw = f.read()

    # header: magic, width, height, maxval -- whitespace separated, # comments
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("read_ppm: truncated header")
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval

    if tokens[0] != b"P6":
        raise FormatError(f"read_ppm: bad magic {tokens[0]!r}, expected b'P6'")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError(f"read_ppm: only maxval 255 supported, got {maxval}")
    expected = 3 * w * h
    pixels = np.frombuffer(raw, dtype=np.uint8, count=-1, offset=pos)
    if pixels.size < expected:
        raise FormatError(f"read_ppm: expected {expected} pixel bytes, got {pixels.size}")
    img = pixels[:expected].reshape(h, w, 3).astype(np.float64)
    return np.transpose(img, (2, 0, 1)) / 255.0 * 2.0 - 1.0


def write_ppm(img: np.ndarray, path) -> None:
    """[3, H, W] image in [-1, 1] -> binary PPM (P6)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise FormatError(f"write_ppm: expected a [3, H, W] image, got {img.shape}")
    bytes_img = np.clip((img + 1.0) / 2.0 * 255.0, 0, 255).round().astype(np.uint8)
    _, h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        np.transpose(bytes_img, (1, 2, 0)).tofile(f)
