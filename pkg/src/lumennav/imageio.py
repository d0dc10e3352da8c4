"""PFM (float depth) and binary PPM (8-bit RGB) readers and writers."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np


def write_pfm(path, image, comment=None):
    """Write a single- or three-channel float image as little-endian PFM.

    Rows are stored bottom-to-top as the format requires. An optional
    ``comment`` is emitted as ``#`` lines after the magic tag.
    """
    img = np.asarray(image, dtype="<f4")
    if img.ndim == 2:
        tag = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        tag = b"PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(tag + b"\n")
        if comment:
            for line in str(comment).splitlines():
                f.write(b"# " + line.encode("ascii") + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(np.flipud(img)).tobytes())


def _read_header_line(f):
    while True:
        line = f.readline()
        if not line:
            raise ValueError("truncated header")
        line = line.strip()
        if line and not line.startswith(b"#"):
            return line


def read_pfm(path):
    with open(path, "rb") as f:
        tag = _read_header_line(f)
        if tag == b"PF":
            channels = 3
        elif tag == b"Pf":
            channels = 1
        else:
            raise ValueError(f"{path}: not a PFM file")
        w, h = (int(x) for x in _read_header_line(f).split())
        scale = float(_read_header_line(f))
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(w * h * channels * 4), dtype=dtype)
    if data.size != w * h * channels:
        raise ValueError(f"{path}: truncated pixel data")
    shape = (h, w) if channels == 1 else (h, w, 3)
    return np.flipud(data.reshape(shape)).astype(np.float32)


def write_ppm(path, image):
    img = np.asarray(image)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("PPM needs an (H, W, 3) uint8 array")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path):
    raw = Path(path).read_bytes()
    m = re.match(rb"P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PPM supported")
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=m.end())
    return data.reshape(h, w, 3).copy()
