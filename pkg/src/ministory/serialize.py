"""Binary formats: TSR1 tensors, named checkpoint containers, P6 images.

TSR1 record layout (little-endian throughout):
    magic `TSR1` | u32 rank | rank x u32 dims | row-major f32 payload

A checkpoint container is a u32 tensor count followed by that many entries
of u32 name length, UTF-8 name bytes, and a TSR1 record. Images travel as
binary PPM (P6, maxval 255); the [-1, 1] float convention maps to bytes via
clamp((v+1)/2) * 255 rounded half away from zero.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Iterable

import numpy as np

from .tensor import ContractError, Parameter, Tensor

_MAGIC = b"TSR1"


class FormatError(ValueError):
    """Malformed or truncated serialized data."""


def write_tensor(f: BinaryIO, data: np.ndarray | Tensor) -> None:
    arr = data.data if isinstance(data, Tensor) else np.asarray(data)
    # asarray keeps rank 0 intact (ascontiguousarray would promote it to 1-D).
    arr = np.asarray(arr, dtype="<f4", order="C")
    f.write(_MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated stream: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4)
    if magic != _MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    (rank,) = struct.unpack("<I", _read_exact(f, 4))
    if rank > 32:
        raise FormatError(f"implausible rank {rank}")
    dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank)) if rank else ()
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    payload = _read_exact(f, 4 * count)
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_tensor(path, data: np.ndarray | Tensor) -> None:
    with open(path, "wb") as f:
        write_tensor(f, data)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def save_checkpoint(path, params: Iterable[Parameter]) -> None:
    """Write named tensors; order is the iteration order and round-trips."""
    items = list(params)
    names = [p.name for p in items]
    if len(set(names)) != len(names):
        dupes = sorted({n for n in names if names.count(n) > 1})
        raise ContractError(f"duplicate parameter names: {dupes}")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(items)))
        for p in items:
            raw = p.name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            write_tensor(f, p.tensor)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {}
    with open(path, "rb") as f:
        (count,) = struct.unpack("<I", _read_exact(f, 4))
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(f, 4))
            name = _read_exact(f, nlen).decode("utf-8")
            if name in out:
                raise FormatError(f"duplicate tensor name {name!r}")
            out[name] = read_tensor(f)
    return out


def restore_parameters(params: Iterable[Parameter], loaded: dict[str, np.ndarray]) -> None:
    """Copy checkpoint arrays into live parameters, strict on names/shapes."""
    items = list(params)
    missing = [p.name for p in items if p.name not in loaded]
    if missing:
        raise ContractError(f"checkpoint missing tensors: {missing[:5]}")
    extra = set(loaded) - {p.name for p in items}
    if extra:
        raise ContractError(f"checkpoint has unknown tensors: {sorted(extra)[:5]}")
    for p in items:
        arr = loaded[p.name]
        if arr.shape != p.tensor.shape:
            raise ContractError(
                f"shape mismatch for {p.name!r}: checkpoint {arr.shape}, "
                f"model {p.tensor.shape}"
            )
        p.tensor.data[...] = arr


def image_to_bytes(image: np.ndarray) -> np.ndarray:
    """[-1, 1] floats -> u8, rounding half away from zero after clamping."""
    arr = np.asarray(image, dtype=np.float64)
    scaled = np.clip((arr + 1.0) / 2.0, 0.0, 1.0) * 255.0
    return np.floor(scaled + 0.5).astype(np.uint8)


def bytes_to_image(raw: np.ndarray) -> np.ndarray:
    """u8 -> [-1, 1] float32 (inverse of the display mapping, up to rounding)."""
    return (np.asarray(raw, dtype=np.float32) / 255.0) * 2.0 - 1.0


def save_ppm(path, image: np.ndarray) -> None:
    """Write an [H, W, 3] image in [-1, 1] as binary PPM."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ContractError(f"PPM needs [H, W, 3], got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(image_to_bytes(arr).tobytes())


def load_ppm(path) -> np.ndarray:
    """Read a binary PPM back to [H, W, 3] float32 in [-1, 1]."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise FormatError("not a binary PPM (P6) file")
    fields: list[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1
    w, h, maxval = (int(v) for v in fields)
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}")
    payload = data[pos : pos + 3 * w * h]
    if len(payload) != 3 * w * h:
        raise FormatError("truncated PPM payload")
    raw = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return bytes_to_image(raw)
