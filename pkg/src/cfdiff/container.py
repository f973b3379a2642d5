"""Bit-exact binary persistence for named tensors, plus PGM previews.

Container layout (all little-endian):

    magic "CFD1" | version u16 | entry count u32
    per entry: name length u16, UTF-8 name, dtype u8 (0=f32, 1=u8),
               rank u8, dims as u64 each, row-major payload

Writes go through a temp file and an atomic rename.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"CFD1"
VERSION = 1

_DTYPE_CODES = {np.dtype("<f4"): 0, np.dtype("u1"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}


class ContainerError(ValueError):
    pass


def write_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]):
    """Write named tensors; only float32 and uint8 payloads are accepted."""
    path = Path(path)
    entries = []
    seen = set()
    for name, arr in tensors.items():
        if name in seen:
            raise ContainerError(f"duplicate tensor name {name!r}")
        seen.add(name)
        arr = np.ascontiguousarray(arr)
        if arr.dtype == np.float64:
            raise ContainerError(f"tensor {name!r} is float64; cast explicitly before writing")
        if arr.dtype not in _DTYPE_CODES:
            raise ContainerError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        entries.append((name, arr))

    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(entries)))
        for name, arr in entries:
            raw_name = name.encode("utf-8")
            if len(raw_name) > 0xFFFF:
                raise ContainerError(f"tensor name too long: {name!r}")
            f.write(struct.pack("<H", len(raw_name)))
            f.write(raw_name)
            f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes(order="C"))
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_tensors(path: str | Path) -> dict[str, np.ndarray]:
    """Read a container back into an insertion-ordered name -> array dict."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ContainerError(f"{path}: bad magic {data[:4]!r}")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    offset = 10
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset : offset + name_len].decode("utf-8")
        offset += name_len
        code, rank = struct.unpack_from("<BB", data, offset)
        offset += 2
        if code not in _CODE_DTYPES:
            raise ContainerError(f"{path}: unknown dtype code {code} for {name!r}")
        dims = struct.unpack_from(f"<{rank}Q", data, offset)
        offset += 8 * rank
        dtype = _CODE_DTYPES[code]
        n_bytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if rank else dtype.itemsize
        payload = data[offset : offset + n_bytes]
        if len(payload) != n_bytes:
            raise ContainerError(f"{path}: truncated payload for {name!r}")
        offset += n_bytes
        if name in out:
            raise ContainerError(f"{path}: duplicate tensor name {name!r}")
        out[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    if offset != len(data):
        raise ContainerError(f"{path}: {len(data) - offset} trailing bytes")
    return out


def text_to_u8(text: str) -> np.ndarray:
    return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).copy()


def u8_to_text(arr: np.ndarray) -> str:
    return bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8")


def f64_to_u8(arr: np.ndarray) -> np.ndarray:
    """Pack float64 values into a u8 tensor so precision survives storage."""
    return np.frombuffer(np.ascontiguousarray(arr, dtype="<f8").tobytes(), dtype=np.uint8).copy()


def u8_to_f64(arr: np.ndarray) -> np.ndarray:
    return np.frombuffer(bytes(np.asarray(arr, dtype=np.uint8)), dtype="<f8").copy()


def to_pgm_bytes(image: np.ndarray) -> bytes:
    """8-bit binary PGM (P5) with the image min-max scaled to 0..255."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D image, got shape {image.shape}")
    lo, hi = float(image.min()), float(image.max())
    scaled = np.zeros_like(image) if hi <= lo else (image - lo) / (hi - lo)
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    header = f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii")
    return header + pixels.tobytes(order="C")


def write_pgm(path: str | Path, image: np.ndarray):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_pgm_bytes(image))
    os.replace(tmp, path)


def atomic_write_text(path: str | Path, text: str):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
