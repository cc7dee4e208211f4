"""CSIM checkpoint format (little-endian, same framing as CSIT).

    "CSIM" | u32 version=1 | u32 tensor count
    count x (u16 len name, u8 rank, rank x u32 dims, f32 payload row-major)
"""

import struct
from math import prod
from pathlib import Path
from typing import BinaryIO

import numpy as np

from src.csi_model import STORAGE_DTYPE, StreamReader, pack_str
from src.errors import BadMagic, InvariantViolation, IoFailure, VersionUnsupported
from src.tensor import Tensor

MAGIC = b"CSIM"
VERSION = 1


def write_checkpoint(state: dict[str, Tensor], sink: BinaryIO) -> int:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(state))]
    for name, value in state.items():
        arr = np.asarray(value)
        if arr.ndim > 0xFF:
            raise InvariantViolation(f"{name}: rank {arr.ndim} does not fit in u8")
        chunks.append(pack_str(name))
        chunks.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(arr.astype(STORAGE_DTYPE).tobytes(order="C"))

    written = 0
    try:
        for chunk in chunks:
            sink.write(chunk)
            written += len(chunk)
    except OSError as exc:
        raise IoFailure(f"checkpoint write failed: {exc}") from exc
    return written


def read_checkpoint(source: BinaryIO) -> dict[str, Tensor]:
    reader = StreamReader(source)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {magic!r}")
    version = reader.u32("version")
    if version != VERSION:
        raise VersionUnsupported(f"CSIM version {version} is not supported")

    state: dict[str, Tensor] = {}
    for _ in range(reader.u32("tensor count")):
        name = reader.text("tensor name")
        rank = reader.take(1, "rank")[0]
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank, "dims"))
        size = prod(dims)
        payload = np.frombuffer(reader.take(4 * size, f"{name} payload"), dtype=STORAGE_DTYPE)
        state[name] = payload.astype(np.float64).reshape(dims)
    return state


def save_checkpoint(state: dict[str, Tensor], path: Path) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        return write_checkpoint(state, fh)


def load_checkpoint(path: Path) -> dict[str, Tensor]:
    if not path.exists():
        raise IoFailure(f"checkpoint not found: {path}")
    with path.open("rb") as fh:
        return read_checkpoint(fh)
