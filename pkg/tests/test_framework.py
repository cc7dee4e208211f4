import unittest
from dataclasses import replace
from pathlib import Path
from tempfile import TemporaryDirectory

import numpy as np
import yaml

from src.errors import ConfigInvalid, InvalidKnob, ShapeIncompatible, ValidationFailed
from src.framework import (
    AvgPoolOff,
    BatchNormOff,
    ConvDepth,
    ConvStage,
    FcDepth,
    ablate,
    activity_preset,
    build,
    conv_output,
    dropout_rate,
    dump_spec,
    load_spec,
    parse_knob,
    shape_trace,
    signfi_preset,
    spec_from_dict,
    spec_to_dict,
    validate,
)
from src.nn.layers import BatchNorm2D, Flatten, PoolBank

GOLDEN = Path(__file__).resolve().parent / "golden"


def _small_activity():
    return activity_preset((4, 20, 1), 3, filters=2)


class PresetTests(unittest.TestCase):
    def test_signfi_matches_golden(self) -> None:
        spec = signfi_preset((400, 30, 3), 276)
        golden = yaml.safe_load((GOLDEN / "signfi_preset.yaml").read_text(encoding="utf-8"))
        self.assertEqual(spec_to_dict(spec), golden)
        self.assertEqual(load_spec(GOLDEN / "signfi_preset.yaml"), spec)

    def test_activity_matches_golden(self) -> None:
        spec = activity_preset((10, 52, 1), 8)
        golden = yaml.safe_load((GOLDEN / "activity_preset.yaml").read_text(encoding="utf-8"))
        self.assertEqual(spec_to_dict(spec), golden)
        self.assertEqual(load_spec(GOLDEN / "activity_preset.yaml"), spec)

    def test_signfi_structure_and_shapes(self) -> None:
        spec = signfi_preset((400, 30, 3), 276)
        self.assertEqual(spec.conv_depth, 4)
        self.assertEqual(len(spec.pool_bank), 5)
        self.assertEqual(conv_output(spec)[:2], (200, 30))
        trace = dict(shape_trace(spec))
        self.assertEqual(trace["ap_5"], (5, 10, 32))
        self.assertEqual(trace["softmax"], (276,))

    def test_activity_structure_and_shapes(self) -> None:
        spec = activity_preset((10, 52, 1), 8)
        self.assertEqual(spec.conv_depth, 7)
        self.assertEqual(len(spec.pool_bank), 3)
        self.assertEqual(len(spec.fc_stages), 2)
        self.assertEqual(conv_output(spec)[:2], (5, 52))

    def test_incompatible_inputs(self) -> None:
        with self.assertRaises(ShapeIncompatible):
            signfi_preset((40, 30, 3), 10)
        with self.assertRaises(ShapeIncompatible):
            activity_preset((10, 3, 1), 8)

    def test_keep_probability_reading(self) -> None:
        self.assertEqual(dropout_rate(0.8), 0.8)
        self.assertAlmostEqual(dropout_rate(0.8, is_keep_prob=True), 0.2)


class ValidateAndBuildTests(unittest.TestCase):
    def test_first_stage_rule(self) -> None:
        spec = _small_activity()
        bad = replace(spec, conv_stages=(ConvStage((3, 3), (1, 1)),) + spec.conv_stages[1:])
        with self.assertRaises(ValidationFailed) as ctx:
            validate(bad)
        self.assertEqual(ctx.exception.rule, "first stage must be 2×1/2×1")
        with self.assertRaises(ValidationFailed):
            build(bad, seed=0)

    def test_pool_misfit_fails_validation(self) -> None:
        spec = replace(_small_activity(), pool_bank=((3, 1),))
        with self.assertRaises(ValidationFailed):
            validate(spec)

    def test_empty_pool_bank_needs_avg_pool_off(self) -> None:
        with self.assertRaises(ValidationFailed):
            validate(replace(_small_activity(), pool_bank=()))

    def test_build_outputs_probabilities(self) -> None:
        spec = _small_activity()
        net = build(spec, seed=1)
        x = np.random.default_rng(0).normal(size=(3, 4, 20, 1))
        probs = net.predict_proba(x)
        self.assertEqual(probs.shape, (3, 3))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_build_matches_shape_trace(self) -> None:
        spec = _small_activity()
        trace = dict(shape_trace(spec))
        summary = dict(build(spec, seed=0).summary())
        self.assertEqual(summary["concat"], trace["concat"])
        self.assertEqual(summary["fc_2"], (1000,))

    def test_same_seed_same_parameters(self) -> None:
        spec = _small_activity()
        a = build(spec, seed=5).state_dict()
        b = build(spec, seed=5).state_dict()
        c = build(spec, seed=6).state_dict()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])
        self.assertFalse(np.array_equal(a["conv_1.kernel"], c["conv_1.kernel"]))


class AblationTests(unittest.TestCase):
    def test_conv_depth(self) -> None:
        spec = ablate(signfi_preset((400, 30, 3), 276), ConvDepth(1))
        self.assertEqual(spec.conv_depth, 1)
        self.assertEqual(spec.conv_stages[0].kernel, (2, 1))
        with self.assertRaises(InvalidKnob):
            ablate(spec, ConvDepth(2))
        with self.assertRaises(InvalidKnob):
            ablate(spec, ConvDepth(0))

    def test_batch_norm_off(self) -> None:
        spec = ablate(activity_preset((10, 52, 1), 8, filters=2), BatchNormOff())
        self.assertEqual(spec.conv_depth, 7)
        self.assertEqual(spec.batch_norm_layers, 0)
        net = build(replace(spec, fc_stages=spec.fc_stages[:1]), seed=0)
        self.assertFalse(any(isinstance(layer, BatchNorm2D) for layer in net.layers))

    def test_avg_pool_off_flattens_conv_output(self) -> None:
        spec = ablate(_small_activity(), AvgPoolOff())
        trace = dict(shape_trace(spec))
        self.assertEqual(trace["flatten"], (2 * 20 * 2,))
        net = build(spec, seed=0)
        self.assertTrue(any(isinstance(layer, Flatten) for layer in net.layers))
        self.assertFalse(any(isinstance(layer, PoolBank) for layer in net.layers))

    def test_fc_depth(self) -> None:
        spec = ablate(activity_preset((10, 52, 1), 8), FcDepth(1))
        self.assertEqual(len(spec.fc_stages), 1)

    def test_full_depth_equals_baseline(self) -> None:
        base = signfi_preset((400, 30, 3), 276)
        self.assertEqual(ablate(base, ConvDepth(4)), base)

    def test_parse_knob(self) -> None:
        self.assertEqual(parse_knob("conv_depth=3"), ConvDepth(3))
        self.assertEqual(parse_knob(" fc_depth = 1 "), FcDepth(1))
        self.assertEqual(parse_knob("batch_norm=off"), BatchNormOff())
        self.assertEqual(parse_knob("avg_pool=off"), AvgPoolOff())
        self.assertEqual(str(parse_knob("conv_depth=2")), "conv_depth=2")
        for text in ("conv_depth=x", "dropout=off", "batch_norm", "avg_pool=on"):
            with self.assertRaises(InvalidKnob):
                parse_knob(text)


class SerializationTests(unittest.TestCase):
    def test_dump_and_load(self) -> None:
        spec = ablate(_small_activity(), AvgPoolOff())
        with TemporaryDirectory() as tmp:
            path = Path(tmp) / "arch.yaml"
            dump_spec(spec, path)
            self.assertEqual(load_spec(path), spec)

    def test_bad_specs(self) -> None:
        data = spec_to_dict(_small_activity())
        gap = {k: v for k, v in data.items() if k != "conv_2"}
        with self.assertRaises(ConfigInvalid):
            spec_from_dict(gap)
        with self.assertRaises(ConfigInvalid):
            spec_from_dict({**data, "ap_1": [1]})
        with self.assertRaises(ConfigInvalid):
            spec_from_dict([1, 2])
        with self.assertRaises(ConfigInvalid):
            load_spec(Path("does/not/exist.yaml"))


if __name__ == "__main__":
    unittest.main()
