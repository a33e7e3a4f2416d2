"""Binary tensor container and PNG image exchange.

Checkpoint container layout (all integers little-endian):

    magic   4 bytes  b"SPMD"
    version u32      (currently 1)
    count   u32      number of entries
    entry*  name_len:u32, name:utf-8, ndim:u32, dims:u32[ndim],
            payload: prod(dims) float32 values, little-endian

Entry names are unique; payloads are always float32 regardless of the
in-memory dtype. Images are exchanged as 8-bit PNG with the fixed mapping
u8 = round((v + 1) * 127.5), v = u8 / 127.5 - 1 between [0, 255] and [-1, 1].
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np
from PIL import Image

MAGIC = b"SPMD"
VERSION = 1


class CheckpointError(RuntimeError):
    """Raised on malformed, truncated or incompatible container files."""


def save_checkpoint(path: str | Path, entries: Mapping[str, np.ndarray]) -> None:
    """Write named float32 tensors to ``path`` in the container format."""
    names = list(entries)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate entry names")
    blobs = [struct.pack("<4sII", MAGIC, VERSION, len(names))]
    for name in names:
        arr = np.asarray(entries[name], dtype="<f4")
        if arr.ndim:
            arr = np.ascontiguousarray(arr)  # ascontiguousarray would promote 0-d to 1-d
        raw = name.encode("utf-8")
        if not raw:
            raise CheckpointError("empty entry name")
        blobs.append(struct.pack("<I", len(raw)) + raw)
        blobs.append(struct.pack("<I", arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blobs.append(arr.tobytes())
    Path(path).write_bytes(b"".join(blobs))


def load_checkpoint(
    path: str | Path, expected_names: set[str] | None = None
) -> dict[str, np.ndarray]:
    """Read a container file back into an ordered name -> float32 array dict.

    With ``expected_names`` the load is strict: any entry name outside the
    set is rejected.
    """
    buf = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(buf):
            raise CheckpointError(f"truncated file: need {n} bytes at offset {off}")
        chunk = buf[off : off + n]
        off += n
        return chunk

    magic, version, count = struct.unpack("<4sII", take(12))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        if name in out:
            raise CheckpointError(f"duplicate entry {name!r}")
        if expected_names is not None and name not in expected_names:
            raise CheckpointError(f"unknown entry {name!r} on strict load")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n_vals = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        payload = take(4 * n_vals)
        out[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes")
    return out


def save_tensor(path: str | Path, name: str, arr: np.ndarray) -> None:
    """Persist a single tensor using the checkpoint container."""
    save_checkpoint(path, {name: arr})


def load_tensor(path: str | Path) -> tuple[str, np.ndarray]:
    """Load a single-entry container, returning (name, array)."""
    entries = load_checkpoint(path)
    if len(entries) != 1:
        raise CheckpointError(f"expected one entry, found {len(entries)}")
    name = next(iter(entries))
    return name, entries[name]


def image_to_u8(img: np.ndarray) -> np.ndarray:
    """Map a [-1, 1] float image to uint8 [0, 255]."""
    return np.clip(np.round((np.asarray(img) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def u8_to_image(u8: np.ndarray) -> np.ndarray:
    """Inverse of :func:`image_to_u8` (quantized to 1/127.5 steps)."""
    return np.asarray(u8, dtype=np.float32) / 127.5 - 1.0


def save_image_png(path: str | Path, img: np.ndarray) -> None:
    """Save a (H, W) or (C, H, W) image in [-1, 1] as an 8-bit PNG."""
    img = np.asarray(img)
    if img.ndim == 3:
        if img.shape[0] == 1:
            img = img[0]
        elif img.shape[0] == 3:
            img = np.moveaxis(img, 0, -1)
        else:
            raise ValueError(f"cannot save image with {img.shape[0]} channels")
    Image.fromarray(image_to_u8(img)).save(Path(path))


def load_image_png(path: str | Path) -> np.ndarray:
    """Load a PNG back to a (C, H, W) float32 image in [-1, 1]."""
    arr = np.asarray(Image.open(Path(path)))
    if arr.ndim == 2:
        arr = arr[None]
    else:
        arr = np.moveaxis(arr, -1, 0)
    return u8_to_image(arr)
