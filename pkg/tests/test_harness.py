import io
import json
import tempfile
import unittest
from math import sqrt
from pathlib import Path
from unittest.mock import patch

import numpy as np

from src.csi_model import CsiDataset, CsiInstance, make_folds
from src.errors import DivergedLoss, ShapeMismatch, UsageError
from src.framework import ArchitectureSpec, BatchNormOff, ConvDepth, ConvStage, FcStage, build
from src.harness import (
    AblationTable,
    EarlyStop,
    FoldResult,
    InputMode,
    RunReport,
    TrainConfig,
    compare_input_modes,
    config_digest,
    cross_validate,
    cross_validate_per_user,
    emit_report,
    evaluate,
    fit,
    load_report,
    preprocess_dataset,
    reference_for,
    run_ablation,
    train_once,
)
from src.nn.checkpoint import load_checkpoint
from src.nn.network import ForwardResult, Network
from src.nn.optim import OptimizerConfig
from src.sigproc import PipelineConfig, sanitized_complex
from src.synthgen import SynthConfig, generate, nearest_centroid_accuracy, split_train_test


def tiny_arch(input_shape=(4, 8, 1), num_classes=2) -> ArchitectureSpec:
    return ArchitectureSpec(
        conv_stages=(ConvStage((2, 1), (2, 1), 4, True, "valid"), ConvStage((1, 3), (1, 1), 4)),
        pool_bank=((1, 2),),
        fc_stages=(FcStage(16, 0.0),),
        num_classes=num_classes,
        input_shape=input_shape,
        name="tiny",
    )


def synth(classes=2, per_class=10, test_per_class=2, **overrides) -> CsiDataset:
    cfg = SynthConfig(
        num_classes=classes,
        instances_per_class=per_class,
        test_per_class=test_per_class,
        m=2,
        n=8,
        c=1,
        seed=3,
        **overrides,
    )
    return generate(cfg)


def quick(**overrides) -> TrainConfig:
    base = dict(optimizer=OptimizerConfig(lr=0.01), batch_size=8, epochs=2, seed=1)
    base.update(overrides)
    return TrainConfig(**base)


class PreprocessTests(unittest.TestCase):
    def test_raw_is_identity(self) -> None:
        ds = synth()
        self.assertIs(preprocess_dataset(ds, InputMode.RAW_COMPLEX), ds)

    def test_amplitude_only(self) -> None:
        inst = CsiInstance.from_complex(np.full((2, 9, 1), 3 + 4j), label=0)
        ds = CsiDataset(instances=(inst,), label_names=("a",))
        out = preprocess_dataset(ds, InputMode.AMPLITUDE_ONLY).instances[0]
        np.testing.assert_allclose(out.planes[0::2], 1 / sqrt(9), atol=1e-15)
        np.testing.assert_array_equal(out.planes[1::2], 0.0)
        self.assertEqual(out.planes.shape, inst.planes.shape)

    def test_sanitized_matches_sigproc(self) -> None:
        ds = synth(per_class=3, test_per_class=1)
        cfg = PipelineConfig()
        out = preprocess_dataset(ds, InputMode.SANITIZED_COMPLEX, cfg)
        for before, after in zip(ds.instances, out.instances):
            np.testing.assert_array_equal(after.planes, sanitized_complex(before, cfg)[0].planes)
            self.assertEqual(after.label, before.label)


class TrainTests(unittest.TestCase):
    def test_separable_toy_reaches_full_rate(self) -> None:
        cfg = SynthConfig(num_classes=2, instances_per_class=20, test_per_class=4, m=2, n=8, c=1, seed=3)
        self.assertEqual(nearest_centroid_accuracy(generate(cfg.impairment_free())), 1.0)
        noisy = cfg.impairment_free().model_copy(update={"noise_std": 0.02})
        train, test = split_train_test(generate(noisy), 4)
        report = train_once(train, test, tiny_arch(), quick(epochs=50))
        self.assertEqual(report.mean_rate, 1.0)
        self.assertEqual(report.k, 1)
        self.assertEqual(len(report.folds[0].loss_curve), 50)
        self.assertEqual(report.folds[0].test_count, 8)

    def test_zero_learning_rate_keeps_parameters(self) -> None:
        train, _ = split_train_test(synth(), 2)
        arch = tiny_arch()
        tc = quick(epochs=1, optimizer=OptimizerConfig(lr=0.0))
        net, _ = fit(train, arch, tc)
        initial = build(arch, tc.seed).parameters()
        for name, value in net.parameters().items():
            np.testing.assert_array_equal(value, initial[name])

    def test_train_once_deterministic(self) -> None:
        train, test = split_train_test(synth(), 2)
        a = train_once(train, test, tiny_arch(), quick())
        b = train_once(train, test, tiny_arch(), quick())
        self.assertEqual(a.model_dump(exclude={"wall_clock"}), b.model_dump(exclude={"wall_clock"}))

    def test_train_once_checkpoint(self) -> None:
        train, test = split_train_test(synth(), 2)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "model.csim"
            train_once(train, test, tiny_arch(), quick(), checkpoint=path)
            state = load_checkpoint(path)
        restored = build(tiny_arch(), 99)
        restored.load_state_dict(state)
        self.assertEqual(set(state), set(restored.state_dict()))
        self.assertIn("bn_1.running_var", state)
        rate, cm = evaluate(restored, test)
        self.assertEqual(int(cm.sum()), len(test))
        self.assertLessEqual(rate, 1.0)

    def test_shape_mismatch(self) -> None:
        train, test = split_train_test(synth(), 2)
        with self.assertRaises(ShapeMismatch):
            train_once(train, test, tiny_arch(input_shape=(4, 9, 1)), quick())
        with self.assertRaises(ShapeMismatch):
            train_once(train, test, tiny_arch(num_classes=3), quick())

    def test_divergence_raises(self) -> None:
        train, test = split_train_test(synth(), 2)
        nan = ForwardResult(loss=float("nan"), gradients={})
        with patch.object(Network, "backward", return_value=nan):
            with self.assertRaises(DivergedLoss) as ctx:
                train_once(train, test, tiny_arch(), quick())
        self.assertEqual(ctx.exception.epoch, 0)

    def test_early_stopping_on_flat_loss(self) -> None:
        train, _ = split_train_test(synth(), 2)
        tc = quick(
            epochs=10,
            batch_size=len(train),
            optimizer=OptimizerConfig(lr=0.0),
            early_stop=EarlyStop(patience=2, min_delta=1e-4),
        )
        _, curve = fit(train, tiny_arch(), tc)
        self.assertEqual(len(curve), 3)

    def test_metrics_identity(self) -> None:
        train, test = split_train_test(synth(classes=3, per_class=8), 2)
        net, _ = fit(train, tiny_arch(num_classes=3), quick())
        rate, cm = evaluate(net, test)
        self.assertAlmostEqual(rate, np.trace(cm) / cm.sum(), delta=1e-12)
        self.assertEqual(cm.sum(axis=1).tolist(), [2, 2, 2])
        predicted = net.predict(test.planes)
        manual = np.zeros((3, 3), dtype=int)
        for t, p in zip(test.labels, predicted):
            manual[t, p] += 1
        np.testing.assert_array_equal(cm, manual)


class CrossValidationTests(unittest.TestCase):
    def test_two_folds(self) -> None:
        report = cross_validate(synth(), tiny_arch(), quick(), k=2)
        self.assertEqual(len(report.folds), 2)
        self.assertEqual(report.k, 2)
        self.assertIsNotNone(report.mean_rate)

    def test_every_instance_tested_once(self) -> None:
        ds = synth(classes=5, per_class=5, test_per_class=1)
        report = cross_validate(ds, tiny_arch(num_classes=5), quick(epochs=1), k=5)
        self.assertEqual(sum(f.test_count for f in report.folds), 25)
        self.assertEqual(sum(int(np.sum(f.confusion_matrix)) for f in report.folds), 25)
        for f in report.folds:
            cm = np.array(f.confusion_matrix)
            self.assertAlmostEqual(f.true_detection_rate, np.trace(cm) / cm.sum(), delta=1e-12)

    def test_deterministic_and_parallel_identical(self) -> None:
        ds = synth()
        serial = cross_validate(ds, tiny_arch(), quick(), k=2)
        again = cross_validate(ds, tiny_arch(), quick(), k=2)
        parallel = cross_validate(ds, tiny_arch(), quick(), k=2, workers=2)
        for other in (again, parallel):
            self.assertEqual(
                [f.model_dump() for f in serial.folds], [f.model_dump() for f in other.folds]
            )
            self.assertEqual(serial.mean_rate, other.mean_rate)

    def test_test_fold_never_touches_training(self) -> None:
        ds = synth()
        tc = quick()
        plan = make_folds(ds, 2, tc.seed)
        held_out = set(plan.fold_indices(0).tolist())
        poisoned = CsiDataset(
            instances=tuple(
                inst.with_planes(inst.planes * 1000.0) if i in held_out else inst
                for i, inst in enumerate(ds.instances)
            ),
            label_names=ds.label_names,
        )
        clean = cross_validate(ds, tiny_arch(), tc, k=2)
        dirty = cross_validate(poisoned, tiny_arch(), tc, k=2)
        self.assertEqual(clean.folds[0].loss_curve, dirty.folds[0].loss_curve)

    def test_diverged_fold_recorded(self) -> None:
        nan = ForwardResult(loss=float("inf"), gradients={})
        with patch.object(Network, "backward", return_value=nan):
            report = cross_validate(synth(), tiny_arch(), quick(), k=2)
        self.assertTrue(all(f.failed for f in report.folds))
        self.assertIsNone(report.mean_rate)

    def test_per_user(self) -> None:
        ds = synth(per_class=8)
        users = ",".join("u1" if i % 2 == 0 else "u2" for i in range(len(ds)))
        ds = CsiDataset(instances=ds.instances, label_names=ds.label_names, meta={"user_ids": users})
        report = cross_validate_per_user(ds, tiny_arch(), quick(), k=2)
        self.assertEqual(sorted(report.groups), ["u1", "u2"])
        self.assertEqual(len(report.folds), 4)
        self.assertAlmostEqual(report.mean_rate, np.mean(list(report.groups.values())))

    def test_digest_ignores_input_mode_only(self) -> None:
        arch = tiny_arch()
        tc = quick()
        self.assertEqual(
            config_digest(arch, tc, 5, 0),
            config_digest(arch, tc.model_copy(update={"input_mode": InputMode.AMPLITUDE_ONLY}), 5, 0),
        )
        self.assertNotEqual(config_digest(arch, tc, 5, 0), config_digest(arch, tc, 5, 1))


class AblationAndComparisonTests(unittest.TestCase):
    def test_ablation_rows(self) -> None:
        ds = synth()
        table = run_ablation(ds, tiny_arch(), [BatchNormOff(), ConvDepth(2)], quick(epochs=1), k=2)
        self.assertEqual([row.label for row in table.rows], ["baseline", "batch_norm=off", "conv_depth=2"])
        self.assertEqual(table.rows[2].duplicate_of, "baseline")
        self.assertIsNone(table.rows[1].duplicate_of)

    def test_empty_knob_list(self) -> None:
        table = run_ablation(synth(), tiny_arch(), [], quick(epochs=1), k=2)
        self.assertEqual(len(table.rows), 1)

    def test_compare_input_modes(self) -> None:
        table = compare_input_modes(synth(), tiny_arch(), quick(epochs=1), k=2)
        self.assertEqual([row.label for row in table.rows], [m.value for m in InputMode])
        self.assertEqual(len({row.config_digest for row in table.rows}), 1)


class ReportTests(unittest.TestCase):
    def _report(self) -> RunReport:
        folds = [
            FoldResult(fold=0, true_detection_rate=1.0, confusion_matrix=[[2, 0], [0, 2]], loss_curve=[0.5], test_count=4),
            FoldResult(fold=1, true_detection_rate=0.9, confusion_matrix=[[5, 0], [1, 4]], loss_curve=[0.4], test_count=10),
        ]
        return RunReport(folds=folds, mean_rate=0.95, std_rate=0.05, config_digest="abc", seed=0, k=2)

    def test_csv_aggregate_row(self) -> None:
        sink = io.StringIO()
        size = emit_report(self._report(), "csv", sink)
        lines = sink.getvalue().splitlines()
        self.assertEqual(size, len(sink.getvalue().encode("utf-8")))
        self.assertEqual(len(lines), 4)
        self.assertTrue(lines[0].startswith("label,fold,"))
        self.assertIn("mean,,0.95,0.05,14", lines[-1])

    def test_json_round_trip(self) -> None:
        sink = io.StringIO()
        emit_report(self._report(), "json", sink)
        self.assertEqual(load_report(sink.getvalue()), self._report())
        self.assertEqual(json.loads(sink.getvalue())["config_digest"], "abc")

    def test_table_round_trip(self) -> None:
        table = AblationTable(rows=[self._report(), self._report().model_copy(update={"label": "x"})])
        sink = io.StringIO()
        emit_report(table, "json", sink)
        self.assertEqual(load_report(sink.getvalue()), table)

    def test_unknown_format_writes_nothing(self) -> None:
        sink = io.StringIO()
        with self.assertRaises(UsageError):
            emit_report(self._report(), "xml", sink)
        self.assertEqual(sink.getvalue(), "")

    def test_published_reference(self) -> None:
        self.assertEqual(reference_for("activity_rfi")["raw_complex"], 85.08)
        self.assertEqual(reference_for("signfi_home")["preprocessed_baseline"], 98.91)
        self.assertIsNone(reference_for(None))
        with self.assertRaises(UsageError):
            reference_for("unknown")


if __name__ == "__main__":
    unittest.main()
