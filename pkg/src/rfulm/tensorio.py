"""RTNSR1 binary tensor files and quick-look PGM images.

Layout of an RTNSR1 file::

    b"RTNSR1\\0"            7 bytes magic
    u8 dtype code           1 = float32, 2 = float64
    u8 rank
    rank x u32 (LE)         extents
    payload                 row-major, little endian
"""

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RTNSR1\0"
_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_DTYPES = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class TensorFormatError(ValueError):
    pass


def dumps(array) -> bytes:
    a = np.asarray(array)
    if a.dtype not in _DTYPES:
        a = a.astype(np.float64)
    code = _DTYPES[a.dtype]
    if a.ndim > 255:
        raise TensorFormatError("rank too large")
    header = MAGIC + struct.pack("<BB", code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype=_CODES[code]).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if buf[:7] != MAGIC:
        raise TensorFormatError("bad magic, not an RTNSR1 tensor")
    code, rank = struct.unpack_from("<BB", buf, 7)
    if code not in _CODES:
        raise TensorFormatError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}I", buf, 9)
    offset = 9 + 4 * rank
    dt = _CODES[code]
    n = int(np.prod(shape, dtype=np.int64))
    if len(buf) - offset != n * dt.itemsize:
        raise TensorFormatError(
            f"payload has {len(buf) - offset} bytes, expected {n * dt.itemsize}")
    return np.frombuffer(buf, dtype=dt, count=n, offset=offset).reshape(shape).astype(dt.newbyteorder("="))


def save_tensor(path, array):
    Path(path).write_bytes(dumps(array))


def load_tensor(path) -> np.ndarray:
    return loads(Path(path).read_bytes())


def save_pgm(path, image, bits=8):
    """Write a 2-D array scaled to the full range of a binary PGM (P5)."""
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ValueError("PGM images are 2-D")
    maxval = 255 if bits == 8 else 65535
    lo, hi = float(img.min(initial=0.0)), float(img.max(initial=0.0))
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo)
    data = np.round(scaled * maxval).astype(">u2" if bits == 16 else "u1")
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n{maxval}\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def load_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    dt = ">u2" if maxval > 255 else "u1"
    payload = raw[len(raw) - w * h * np.dtype(dt).itemsize:]
    return np.frombuffer(payload, dtype=dt).reshape(h, w).astype(int)
