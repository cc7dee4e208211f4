import io
import struct
import unittest
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np

from src.csi_model import (
    CsiDataset,
    CsiInstance,
    complex_at,
    load_dataset,
    make_folds,
    read_dataset,
    save_dataset,
    to_storage_precision,
    write_dataset,
)
from src.errors import (
    BadMagic,
    CsiError,
    HeterogeneousShapes,
    IndexOutOfRange,
    InvariantViolation,
    IoFailure,
    TooFewInstances,
    TruncatedStream,
    VersionUnsupported,
)


def _dataset(per_class: int = 4, classes: int = 2, m: int = 2, n: int = 3, c: int = 1) -> CsiDataset:
    rng = np.random.default_rng(7)
    instances = [
        CsiInstance(planes=to_storage_precision(rng.normal(size=(2 * m, n, c))), label=k)
        for k in range(classes)
        for _ in range(per_class)
    ]
    return CsiDataset(
        instances=tuple(instances),
        label_names=tuple(f"gesture_{k}" for k in range(classes)),
        meta={"source": "test"},
    )


class CsiInstanceTests(unittest.TestCase):
    def test_complex_at_reads_interleaved_rows(self) -> None:
        values = np.array([[[1 + 2j], [3 + 4j]]])
        inst = CsiInstance.from_complex(values, label=0)
        self.assertEqual(inst.shape, (1, 2, 1))
        self.assertEqual(complex_at(inst, 0, 1, 0), (3.0, 4.0))
        np.testing.assert_array_equal(inst.to_complex(), values)

    def test_complex_at_out_of_range(self) -> None:
        inst = CsiInstance.from_complex(np.ones((1, 2, 1)), label=0)
        with self.assertRaises(IndexOutOfRange):
            complex_at(inst, 1, 0, 0)

    def test_odd_row_count_rejected(self) -> None:
        with self.assertRaises(InvariantViolation):
            CsiInstance(planes=np.zeros((3, 2, 1)), label=0)

    def test_planes_are_read_only(self) -> None:
        inst = CsiInstance(planes=np.zeros((2, 2, 1)), label=0)
        with self.assertRaises(ValueError):
            inst.planes[0, 0, 0] = 1.0


class CsiDatasetTests(unittest.TestCase):
    def test_mixed_shapes_rejected(self) -> None:
        a = CsiInstance(planes=np.zeros((2, 3, 1)), label=0)
        b = CsiInstance(planes=np.zeros((2, 4, 1)), label=0)
        with self.assertRaises(HeterogeneousShapes):
            CsiDataset(instances=(a, b), label_names=("x",))

    def test_label_outside_names_rejected(self) -> None:
        inst = CsiInstance(planes=np.zeros((2, 3, 1)), label=2)
        with self.assertRaises(InvariantViolation):
            CsiDataset(instances=(inst,), label_names=("a", "b"))

    def test_round_trip_is_byte_and_field_exact(self) -> None:
        ds = _dataset()
        buf = io.BytesIO()
        size = write_dataset(ds, buf)
        self.assertEqual(size, len(buf.getvalue()))

        back = read_dataset(io.BytesIO(buf.getvalue()))
        self.assertEqual(back.label_names, ds.label_names)
        self.assertEqual(back.meta, ds.meta)
        np.testing.assert_array_equal(back.labels, ds.labels)
        np.testing.assert_array_equal(back.planes, ds.planes)

        again = io.BytesIO()
        write_dataset(back, again)
        self.assertEqual(again.getvalue(), buf.getvalue())

    def test_header_layout(self) -> None:
        buf = io.BytesIO()
        write_dataset(_dataset(per_class=1, classes=1, m=1, n=2, c=1), buf)
        raw = buf.getvalue()
        self.assertEqual(raw[:4], b"CSIT")
        self.assertEqual(int.from_bytes(raw[4:8], "little"), 1)

    def test_bad_magic(self) -> None:
        with self.assertRaises(BadMagic):
            read_dataset(io.BytesIO(b"XXXX" + b"\x00" * 40))

    def test_unsupported_version(self) -> None:
        buf = io.BytesIO()
        write_dataset(_dataset(), buf)
        raw = bytearray(buf.getvalue())
        raw[4:8] = (2).to_bytes(4, "little")
        with self.assertRaises(VersionUnsupported):
            read_dataset(io.BytesIO(bytes(raw)))

    def test_truncated_payload(self) -> None:
        buf = io.BytesIO()
        write_dataset(_dataset(), buf)
        with self.assertRaises(TruncatedStream):
            read_dataset(io.BytesIO(buf.getvalue()[:-3]))

    def test_label_not_utf8(self) -> None:
        raw = b"CSIT" + struct.pack("<IIIIII", 1, 0, 1, 1, 1, 1) + struct.pack("<H", 2) + b"\xff\xfe"
        raw += struct.pack("<I", 0)
        with self.assertRaises(InvariantViolation) as ctx:
            read_dataset(io.BytesIO(raw))
        self.assertIsInstance(ctx.exception, CsiError)
        self.assertIn("UTF-8", str(ctx.exception))

    def test_meta_value_not_utf8(self) -> None:
        raw = b"CSIT" + struct.pack("<IIIIII", 1, 0, 1, 1, 1, 0)
        raw += struct.pack("<I", 1) + struct.pack("<H", 1) + b"k" + struct.pack("<H", 1) + b"\x80"
        with self.assertRaises(InvariantViolation):
            read_dataset(io.BytesIO(raw))

    def test_header_larger_than_stream(self) -> None:
        raw = b"CSIT" + struct.pack("<IIIIII", 1, 1, 0xFFFFFFFF, 0xFFFFFFFF, 0xFFFFFFFF, 1)
        raw += struct.pack("<H", 1) + b"a" + struct.pack("<I", 0) + b"\x00" * 64
        with self.assertRaises(TruncatedStream):
            read_dataset(io.BytesIO(raw))
        with TemporaryDirectory() as tmp:
            path = Path(tmp) / "huge.csit"
            path.write_bytes(raw)
            with self.assertRaises(TruncatedStream):
                load_dataset(path)

    def test_count_larger_than_stream(self) -> None:
        buf = io.BytesIO()
        write_dataset(_dataset(), buf)
        raw = bytearray(buf.getvalue())
        raw[8:12] = (1000).to_bytes(4, "little")
        with self.assertRaises(TruncatedStream):
            read_dataset(io.BytesIO(bytes(raw)))

    def test_empty_dataset_not_written(self) -> None:
        with self.assertRaises(InvariantViolation):
            write_dataset(CsiDataset(instances=(), label_names=("a",)), io.BytesIO())

    def test_save_and_load(self) -> None:
        ds = _dataset()
        with TemporaryDirectory() as tmp:
            path = Path(tmp) / "nested" / "d.csit"
            save_dataset(ds, path)
            np.testing.assert_array_equal(load_dataset(path).planes, ds.planes)
            with self.assertRaises(IoFailure):
                load_dataset(Path(tmp) / "missing.csit")


class FoldTests(unittest.TestCase):
    def test_folds_partition_and_stratify(self) -> None:
        ds = _dataset(per_class=10, classes=3)
        plan = make_folds(ds, 5, seed=3)
        seen = np.concatenate([plan.fold_indices(f) for f in range(5)])
        self.assertEqual(sorted(seen.tolist()), list(range(len(ds))))
        for f in range(5):
            labels = ds.labels[plan.fold_indices(f)]
            self.assertEqual(np.bincount(labels, minlength=3).tolist(), [2, 2, 2])
            self.assertEqual(
                len(plan.train_indices(f)) + len(plan.fold_indices(f)), len(ds)
            )

    def test_fold_sizes_balanced_with_uneven_classes(self) -> None:
        ds = _dataset(per_class=7, classes=3)
        plan = make_folds(ds, 5, seed=0)
        sizes = [len(plan.fold_indices(f)) for f in range(5)]
        self.assertLessEqual(max(sizes) - min(sizes), 1)

    def test_folds_deterministic(self) -> None:
        ds = _dataset(per_class=10)
        self.assertEqual(make_folds(ds, 5, 11), make_folds(ds, 5, 11))

    def test_too_few_instances(self) -> None:
        ds = _dataset(per_class=3)
        with self.assertRaises(TooFewInstances):
            make_folds(ds, 5, 0)
        with self.assertRaises(TooFewInstances):
            make_folds(ds, 1, 0)


if __name__ == "__main__":
    unittest.main()
