"""Binary PGM (P5) reading and writing.

Images are 8-bit grayscale; binary masks use maxval 1 with one byte per
pixel.  The format is dependency-free and byte-exact, which keeps dataset
regeneration reproducible down to file bytes.
"""

import numpy as np


def write_pgm(path, data, maxval=255):
    """Write a [H,W] uint8 array as binary PGM."""
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ValueError(f"PGM data must be 2-D, got shape {arr.shape}")
    if not (1 <= maxval <= 255):
        raise ValueError(f"maxval must be in [1, 255], got {maxval}")
    arr = arr.astype(np.uint8)
    if arr.max(initial=0) > maxval:
        raise ValueError(f"pixel value exceeds declared maxval {maxval}")
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def _next_token(data, pos, path):
    # skip whitespace and '#' comments, return (token, new_pos)
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos : pos + 1].isspace():
        pos += 1
    if start == pos:
        raise ValueError(f"{path}: truncated PGM header")
    return data[start:pos], pos


def read_pgm(path):
    """Read a binary PGM; returns (uint8 array [H,W], maxval)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (missing P5 magic)")
    pos = 2
    tokens = []
    for _ in range(3):
        tok, pos = _next_token(data, pos, path)
        tokens.append(tok)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ValueError(f"{path}: malformed PGM header") from exc
    if width < 1 or height < 1 or not (1 <= maxval <= 255):
        raise ValueError(f"{path}: invalid PGM dimensions/maxval {width}x{height}/{maxval}")
    pos += 1  # single whitespace byte after maxval
    raw = data[pos : pos + width * height]
    if len(raw) != width * height:
        raise ValueError(f"{path}: truncated PGM pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(height, width).copy(), maxval


def image_to_unit(data, maxval=255):
    """uint8 pixels -> float32 in [0, 1]."""
    return (np.asarray(data, dtype=np.float32) / float(maxval)).astype(np.float32)


def unit_to_image(values):
    """float [0,1] -> rounded uint8 pixels."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.round(v * 255.0).astype(np.uint8)
