"""CSI instances, datasets, fold plans and the CSIT binary format.

An instance stores m complex measurements over n subcarriers and c antenna
pairs as real planes of shape ``[2m, n, c]``: row ``2i`` is the real part and
row ``2i + 1`` the imaginary part of measurement ``i``.

CSIT layout (little-endian)::

    "CSIT" | u32 version=1 | u32 count, m, n, c | u32 classes
    classes x (u16 len, utf-8 label)
    u32 meta count, meta x (u16 len key, u16 len value)
    count x (u32 label, 2*m*n*c f32 in row-major [2m, n, c])
"""

import io
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import BinaryIO

import numpy as np
import numpy.typing as npt

from src.errors import (
    BadMagic,
    HeterogeneousShapes,
    IndexOutOfRange,
    InvariantViolation,
    IoFailure,
    TooFewInstances,
    TruncatedStream,
    VersionUnsupported,
)
from src.seeding import Role, substream
from src.tensor import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"CSIT"
VERSION = 1
STORAGE_DTYPE = np.dtype("<f4")


def interleave(values: npt.NDArray[np.complex128]) -> Tensor:
    """[m, n, c] complex -> [2m, n, c] real planes."""
    if values.ndim != 3:
        raise InvariantViolation(f"complex block must be rank 3, got {values.ndim}")
    m, n, c = values.shape
    planes = np.empty((2 * m, n, c), dtype=np.float64)
    planes[0::2] = values.real
    planes[1::2] = values.imag
    return planes


def deinterleave(planes: Tensor) -> npt.NDArray[np.complex128]:
    return planes[0::2] + 1j * planes[1::2]


def to_storage_precision(planes: Tensor) -> Tensor:
    return planes.astype(STORAGE_DTYPE).astype(np.float64)


@dataclass(frozen=True, eq=False)
class CsiInstance:
    planes: Tensor
    label: int

    def __post_init__(self) -> None:
        planes = np.array(self.planes, dtype=np.float64, order="C")
        if planes.ndim != 3 or planes.shape[0] % 2 != 0 or 0 in planes.shape:
            raise InvariantViolation(
                f"planes must have shape [2m, n, c], got {list(planes.shape)}"
            )
        if self.label < 0:
            raise InvariantViolation(f"label must be non-negative, got {self.label}")
        planes.setflags(write=False)
        object.__setattr__(self, "planes", planes)
        object.__setattr__(self, "label", int(self.label))

    @classmethod
    def from_complex(cls, values: npt.NDArray[np.complex128], label: int) -> "CsiInstance":
        return cls(planes=interleave(np.asarray(values, dtype=np.complex128)), label=label)

    @property
    def m(self) -> int:
        return self.planes.shape[0] // 2

    @property
    def n(self) -> int:
        return self.planes.shape[1]

    @property
    def c(self) -> int:
        return self.planes.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return (self.m, self.n, self.c)

    def to_complex(self) -> npt.NDArray[np.complex128]:
        return deinterleave(self.planes)

    def with_planes(self, planes: Tensor) -> "CsiInstance":
        return CsiInstance(planes=planes, label=self.label)


def complex_at(
    inst: CsiInstance, sample: int, subcarrier: int, antenna: int
) -> tuple[float, float]:
    if not (0 <= sample < inst.m and 0 <= subcarrier < inst.n and 0 <= antenna < inst.c):
        raise IndexOutOfRange(
            f"({sample}, {subcarrier}, {antenna}) outside {list(inst.shape)}"
        )
    return (
        float(inst.planes[2 * sample, subcarrier, antenna]),
        float(inst.planes[2 * sample + 1, subcarrier, antenna]),
    )


@dataclass(frozen=True, eq=False)
class CsiDataset:
    instances: tuple[CsiInstance, ...]
    label_names: tuple[str, ...]
    meta: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "instances", tuple(self.instances))
        object.__setattr__(self, "label_names", tuple(self.label_names))
        object.__setattr__(self, "meta", dict(self.meta))
        self.validate()

    def validate(self) -> None:
        shapes = {inst.shape for inst in self.instances}
        if len(shapes) > 1:
            raise HeterogeneousShapes(f"instances mix shapes {sorted(shapes)}")
        for idx, inst in enumerate(self.instances):
            if inst.label >= len(self.label_names):
                raise InvariantViolation(
                    f"instance {idx} label {inst.label} outside {len(self.label_names)} classes"
                )

    def __len__(self) -> int:
        return len(self.instances)

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    @property
    def shape(self) -> tuple[int, int, int]:
        if not self.instances:
            raise InvariantViolation("empty dataset has no shape")
        return self.instances[0].shape

    @property
    def input_shape(self) -> tuple[int, int, int]:
        m, n, c = self.shape
        return (2 * m, n, c)

    @cached_property
    def labels(self) -> npt.NDArray[np.int64]:
        return np.array([inst.label for inst in self.instances], dtype=np.int64)

    @cached_property
    def planes(self) -> Tensor:
        """All instances stacked as ``[N, 2m, n, c]``."""
        stacked = np.stack([inst.planes for inst in self.instances])
        stacked.setflags(write=False)
        return stacked

    def subset(self, indices: npt.ArrayLike) -> "CsiDataset":
        return CsiDataset(
            instances=tuple(self.instances[int(i)] for i in np.asarray(indices)),
            label_names=self.label_names,
            meta=self.meta,
        )

    def map_planes(self, fn) -> "CsiDataset":
        return CsiDataset(
            instances=tuple(inst.with_planes(fn(inst)) for inst in self.instances),
            label_names=self.label_names,
            meta=self.meta,
        )

    def class_counts(self) -> dict[int, int]:
        return dict(Counter(int(x) for x in self.labels))


# ---------------------------------------------------------------------------
# CSIT reader / writer
# ---------------------------------------------------------------------------


def pack_str(text: str) -> bytes:
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise InvariantViolation(f"string too long for u16 length prefix: {len(raw)} bytes")
    return struct.pack("<H", len(raw)) + raw


def write_dataset(ds: CsiDataset, sink: BinaryIO) -> int:
    if not ds.instances:
        raise InvariantViolation("cannot write an empty dataset")
    ds.validate()
    m, n, c = ds.shape

    chunks = [
        MAGIC,
        struct.pack("<IIIIII", VERSION, len(ds), m, n, c, ds.num_classes),
    ]
    chunks.extend(pack_str(name) for name in ds.label_names)
    chunks.append(struct.pack("<I", len(ds.meta)))
    for key, value in ds.meta.items():
        chunks.append(pack_str(str(key)))
        chunks.append(pack_str(str(value)))
    for inst in ds.instances:
        chunks.append(struct.pack("<I", inst.label))
        chunks.append(inst.planes.astype(STORAGE_DTYPE).tobytes(order="C"))

    written = 0
    try:
        for chunk in chunks:
            sink.write(chunk)
            written += len(chunk)
    except OSError as exc:
        raise IoFailure(f"write failed after {written} bytes: {exc}") from exc
    return written


class StreamReader:
    def __init__(self, source: BinaryIO) -> None:
        self.source = source

    def remaining(self) -> int | None:
        """Bytes left in a seekable source, ``None`` when it cannot tell."""
        try:
            if not self.source.seekable():
                return None
            here = self.source.tell()
            end = self.source.seek(0, io.SEEK_END)
            self.source.seek(here)
        except (AttributeError, OSError):
            return None
        return end - here

    def expect(self, size: int, what: str) -> None:
        left = self.remaining()
        if left is not None and size > left:
            raise TruncatedStream(f"{what} declares {size} bytes, only {left} left")

    def take(self, size: int, what: str) -> bytes:
        self.expect(size, what)
        try:
            data = self.source.read(size)
        except OverflowError as exc:
            raise TruncatedStream(f"{what} declares an impossible size {size}") from exc
        except OSError as exc:
            raise IoFailure(f"read failed: {exc}") from exc
        if len(data) != size:
            raise TruncatedStream(f"stream ended while reading {what}")
        return data

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def text(self, what: str) -> str:
        raw = self.take(self.u16(what), what)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise InvariantViolation(f"{what} is not valid UTF-8") from exc


def read_dataset(source: BinaryIO) -> CsiDataset:
    reader = StreamReader(source)
    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise BadMagic(f"expected {MAGIC!r}, got {magic!r}")
    version = reader.u32("version")
    if version != VERSION:
        raise VersionUnsupported(f"CSIT version {version} is not supported")

    count, m, n, c, num_classes = struct.unpack("<IIIII", reader.take(20, "header"))
    if min(m, n, c) == 0:
        raise InvariantViolation(f"header declares empty shape m={m} n={n} c={c}")
    label_names = tuple(reader.text("label name") for _ in range(num_classes))
    meta: dict[str, str] = {}
    for _ in range(reader.u32("meta count")):
        key = reader.text("meta key")
        meta[key] = reader.text("meta value")

    values = 2 * m * n * c
    reader.expect(count * (4 + 4 * values), "instance payload")
    instances = []
    for _ in range(count):
        label = reader.u32("instance label")
        payload = np.frombuffer(reader.take(values * 4, "instance payload"), dtype=STORAGE_DTYPE)
        instances.append(
            CsiInstance(planes=payload.astype(np.float64).reshape(2 * m, n, c), label=label)
        )

    try:
        return CsiDataset(instances=tuple(instances), label_names=label_names, meta=meta)
    except HeterogeneousShapes as exc:
        raise InvariantViolation(str(exc)) from exc


def save_dataset(ds: CsiDataset, path: Path) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        size = write_dataset(ds, fh)
    logger.info("wrote %d instances (%d bytes) to %s", len(ds), size, path)
    return size


def load_dataset(path: Path) -> CsiDataset:
    if not path.exists():
        raise IoFailure(f"dataset not found: {path}")
    with path.open("rb") as fh:
        return read_dataset(fh)


# ---------------------------------------------------------------------------
# Cross-validation folds
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FoldPlan:
    k: int
    assignment: npt.NDArray[np.int64]

    def fold_indices(self, fold: int) -> npt.NDArray[np.int64]:
        return np.flatnonzero(self.assignment == fold)

    def train_indices(self, fold: int) -> npt.NDArray[np.int64]:
        return np.flatnonzero(self.assignment != fold)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FoldPlan):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.assignment, other.assignment)


def make_folds(ds: CsiDataset, k: int, seed: int) -> FoldPlan:
    """Stratified, seed-deterministic fold assignment.

    Each class is shuffled on its own substream and dealt round-robin; the
    dealing offset carries over between classes so fold totals stay balanced.
    """
    if k < 2:
        raise TooFewInstances(f"k must be at least 2, got {k}")
    counts = ds.class_counts()
    short = {cls: cnt for cls, cnt in counts.items() if cnt < k}
    if short:
        raise TooFewInstances(f"classes with fewer than {k} instances: {short}")

    assignment = np.full(len(ds), -1, dtype=np.int64)
    offset = 0
    labels = ds.labels
    for cls in sorted(counts):
        members = np.flatnonzero(labels == cls)
        order = substream(seed, Role.FOLDS, cls).permutation(members)
        assignment[order] = (offset + np.arange(len(order))) % k
        offset = (offset + len(order)) % k
    return FoldPlan(k=k, assignment=assignment)
