"""Declarative architectures for the raw-CSI framework.

A network is a conv stack (the first stage merges real and imaginary rows with
a 2x1 kernel at stride 2x1), followed by a bank of parallel average pools whose
flattened outputs are concatenated, fully connected stages with dropout, and a
final softmax over the classes.
"""

import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any

import yaml

from src.errors import ConfigInvalid, InvalidKnob, ShapeIncompatible, ShapeMismatch, ValidationFailed
from src.nn import functional as F
from src.nn.layers import BatchNorm2D, Conv2D, Dense, Dropout, Flatten, Layer, PoolBank, ReLU
from src.nn.network import Network
from src.seeding import Role, substream

logger = logging.getLogger(__name__)

DEFAULT_FILTERS = 32
TABLE_DROPOUT = 0.8
FIRST_STAGE = (2, 1)


@dataclass(frozen=True)
class ConvStage:
    kernel: tuple[int, int]
    stride: tuple[int, int] = (1, 1)
    filters: int = DEFAULT_FILTERS
    batch_norm: bool = True
    padding: F.Padding = "same"


@dataclass(frozen=True)
class FcStage:
    units: int
    dropout: float = 0.0


@dataclass(frozen=True)
class ArchitectureSpec:
    conv_stages: tuple[ConvStage, ...]
    pool_bank: tuple[tuple[int, int], ...]
    fc_stages: tuple[FcStage, ...]
    num_classes: int
    input_shape: tuple[int, int, int]
    avg_pool: bool = True
    name: str = "custom"

    @property
    def conv_depth(self) -> int:
        return len(self.conv_stages)

    @property
    def batch_norm_layers(self) -> int:
        return sum(stage.batch_norm for stage in self.conv_stages)


def dropout_rate(table_value: float, is_keep_prob: bool = False) -> float:
    """Drop probability for a table dropout value under the chosen reading."""
    return 1.0 - table_value if is_keep_prob else table_value


# ---------------------------------------------------------------------------
# shape checking
# ---------------------------------------------------------------------------


def conv_output(spec: ArchitectureSpec) -> tuple[int, int, int]:
    h, w, _ = spec.input_shape
    channels = spec.input_shape[2]
    for stage in spec.conv_stages:
        h, w = F.conv_output_shape((h, w), stage.kernel, stage.stride, stage.padding)
        channels = stage.filters
    return h, w, channels


def shape_trace(spec: ArchitectureSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Static shape of every stage; raises KernelTooLarge / PoolTooLarge on a misfit."""
    trace: list[tuple[str, tuple[int, ...]]] = [("input", tuple(spec.input_shape))]
    h, w, _ = spec.input_shape
    for i, stage in enumerate(spec.conv_stages, start=1):
        h, w = F.conv_output_shape((h, w), stage.kernel, stage.stride, stage.padding)
        trace.append((f"conv_{i}", (h, w, stage.filters)))
    channels = spec.conv_stages[-1].filters if spec.conv_stages else spec.input_shape[2]

    if spec.avg_pool:
        features = 0
        for j, pool in enumerate(spec.pool_bank, start=1):
            ph, pw = F.pool_output_shape((h, w), pool)
            trace.append((f"ap_{j}", (ph, pw, channels)))
            features += ph * pw * channels
        trace.append(("concat", (features,)))
    else:
        features = h * w * channels
        trace.append(("flatten", (features,)))

    for k, stage in enumerate(spec.fc_stages, start=1):
        trace.append((f"fc_{k}", (stage.units,)))
    trace.append(("softmax", (spec.num_classes,)))
    return trace


def validate(spec: ArchitectureSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Check the framework rules and the shape trace; returns the trace."""
    if not spec.conv_stages:
        raise ValidationFailed("at least one conv stage is required")
    first = spec.conv_stages[0]
    if tuple(first.kernel) != FIRST_STAGE or tuple(first.stride) != FIRST_STAGE:
        raise ValidationFailed("first stage must be 2×1/2×1")
    if spec.input_shape[0] % 2 != 0 or min(spec.input_shape) < 1:
        raise ValidationFailed(f"input shape must be (2m, n, c), got {list(spec.input_shape)}")
    if spec.num_classes < 2:
        raise ValidationFailed("softmax needs at least 2 classes")
    if spec.avg_pool and not spec.pool_bank:
        raise ValidationFailed("pool bank must be non-empty")
    if not spec.avg_pool and spec.pool_bank:
        raise ValidationFailed("pool bank must be empty when average pooling is off")
    for i, stage in enumerate(spec.conv_stages, start=1):
        if stage.filters < 1 or min(stage.kernel) < 1 or min(stage.stride) < 1:
            raise ValidationFailed(f"conv_{i} needs positive kernel, stride and filters")
    for k, stage in enumerate(spec.fc_stages, start=1):
        if stage.units < 1:
            raise ValidationFailed(f"fc_{k} needs at least one unit")
        if not 0.0 <= stage.dropout < 1.0:
            raise ValidationFailed(f"fc_{k} dropout must be in [0, 1)")
    try:
        return shape_trace(spec)
    except ShapeMismatch as exc:
        raise ValidationFailed(f"shape check failed: {exc}") from exc


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------


def _checked_preset(spec: ArchitectureSpec) -> ArchitectureSpec:
    try:
        shape_trace(spec)
    except ShapeMismatch as exc:
        raise ShapeIncompatible(
            f"{spec.name} preset does not fit input {list(spec.input_shape)}: {exc}"
        ) from exc
    return spec


def signfi_preset(
    input_shape: tuple[int, int, int],
    num_classes: int,
    filters: int = DEFAULT_FILTERS,
    dropout: float = TABLE_DROPOUT,
) -> ArchitectureSpec:
    """Gesture network: four conv stages up to 10x10 and five pools up to 40x3."""
    stages = [ConvStage(FIRST_STAGE, FIRST_STAGE, filters, True, "valid")]
    stages += [ConvStage((k, k), (1, 1), filters) for k in (3, 5, 10)]
    return _checked_preset(
        ArchitectureSpec(
            conv_stages=tuple(stages),
            pool_bank=((3, 3), (5, 5), (10, 3), (20, 3), (40, 3)),
            fc_stages=(FcStage(1000, dropout),),
            num_classes=num_classes,
            input_shape=tuple(input_shape),
            name="signfi",
        )
    )


def activity_preset(
    input_shape: tuple[int, int, int],
    num_classes: int,
    filters: int = DEFAULT_FILTERS,
    dropout: float = TABLE_DROPOUT,
) -> ArchitectureSpec:
    """Activity network: 1xk kernels and 1xk pools only, so consecutive samples never mix."""
    stages = [ConvStage(FIRST_STAGE, FIRST_STAGE, filters, True, "valid")]
    stages += [ConvStage((1, k), (1, 1), filters) for k in (2, 3, 4, 8, 12, 16)]
    return _checked_preset(
        ArchitectureSpec(
            conv_stages=tuple(stages),
            pool_bank=((1, 2), (1, 3), (1, 4)),
            fc_stages=(FcStage(1000, dropout), FcStage(1000, dropout)),
            num_classes=num_classes,
            input_shape=tuple(input_shape),
            name="activity",
        )
    )


PRESETS = {"signfi": signfi_preset, "activity": activity_preset}


# ---------------------------------------------------------------------------
# build
# ---------------------------------------------------------------------------


def build(spec: ArchitectureSpec, seed: int) -> Network:
    trace = validate(spec)
    rng = substream(seed, Role.INIT)
    layers: list[Layer] = []
    channels = spec.input_shape[2]
    for i, stage in enumerate(spec.conv_stages, start=1):
        layers.append(
            Conv2D(f"conv_{i}", stage.kernel, stage.stride, channels, stage.filters, stage.padding, rng)
        )
        if stage.batch_norm:
            layers.append(BatchNorm2D(f"bn_{i}", stage.filters))
        layers.append(ReLU(f"relu_{i}"))
        channels = stage.filters

    layers.append(PoolBank("concat", list(spec.pool_bank)) if spec.avg_pool else Flatten("flatten"))
    features = dict(trace)["concat" if spec.avg_pool else "flatten"][0]

    for k, stage in enumerate(spec.fc_stages, start=1):
        layers.append(Dense(f"fc_{k}", features, stage.units, "relu", rng))
        if stage.dropout > 0.0:
            layers.append(Dropout(f"dropout_{k}", stage.dropout))
        features = stage.units
    layers.append(Dense("logits", features, spec.num_classes, "none", rng))

    net = Network(layers, spec.input_shape, spec.num_classes, dropout_rng=substream(seed, Role.DROPOUT))
    logger.debug("built %s network with %d layers", spec.name, len(layers))
    return net


# ---------------------------------------------------------------------------
# ablation knobs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConvDepth:
    k: int

    def __str__(self) -> str:
        return f"conv_depth={self.k}"


@dataclass(frozen=True)
class FcDepth:
    k: int

    def __str__(self) -> str:
        return f"fc_depth={self.k}"


@dataclass(frozen=True)
class BatchNormOff:
    def __str__(self) -> str:
        return "batch_norm=off"


@dataclass(frozen=True)
class AvgPoolOff:
    def __str__(self) -> str:
        return "avg_pool=off"


Knob = ConvDepth | FcDepth | BatchNormOff | AvgPoolOff


def parse_knob(text: str) -> Knob:
    key, sep, value = text.strip().partition("=")
    key, value = key.strip(), value.strip()
    if not sep:
        raise InvalidKnob(f"knob must look like key=value, got {text!r}")
    if key in ("conv_depth", "fc_depth"):
        try:
            depth = int(value)
        except ValueError as exc:
            raise InvalidKnob(f"{key} expects an integer, got {value!r}") from exc
        return ConvDepth(depth) if key == "conv_depth" else FcDepth(depth)
    if key == "batch_norm" and value == "off":
        return BatchNormOff()
    if key == "avg_pool" and value == "off":
        return AvgPoolOff()
    raise InvalidKnob(f"unknown knob {text!r}")


def ablate(spec: ArchitectureSpec, knob: Knob) -> ArchitectureSpec:
    """Change one layer category and keep everything else as in ``spec``."""
    match knob:
        case ConvDepth(k):
            if not 1 <= k <= spec.conv_depth:
                raise InvalidKnob(f"conv_depth must be in [1, {spec.conv_depth}], got {k}")
            return replace(spec, conv_stages=spec.conv_stages[:k])
        case FcDepth(k):
            if not 1 <= k <= len(spec.fc_stages):
                raise InvalidKnob(f"fc_depth must be in [1, {len(spec.fc_stages)}], got {k}")
            return replace(spec, fc_stages=spec.fc_stages[:k])
        case BatchNormOff():
            return replace(
                spec, conv_stages=tuple(replace(s, batch_norm=False) for s in spec.conv_stages)
            )
        case AvgPoolOff():
            return replace(spec, avg_pool=False, pool_bank=())
    raise InvalidKnob(f"unsupported knob {knob!r}")


# ---------------------------------------------------------------------------
# YAML form: one key per table row (conv_i, ap_j, fc_k)
# ---------------------------------------------------------------------------


def spec_to_dict(spec: ArchitectureSpec) -> dict[str, Any]:
    data: dict[str, Any] = {
        "name": spec.name,
        "input_shape": list(spec.input_shape),
        "num_classes": spec.num_classes,
        "avg_pool": spec.avg_pool,
    }
    for i, stage in enumerate(spec.conv_stages, start=1):
        data[f"conv_{i}"] = {
            "kernel": list(stage.kernel),
            "stride": list(stage.stride),
            "filters": stage.filters,
            "batch_norm": stage.batch_norm,
            "padding": stage.padding,
        }
    for j, pool in enumerate(spec.pool_bank, start=1):
        data[f"ap_{j}"] = list(pool)
    for k, stage in enumerate(spec.fc_stages, start=1):
        data[f"fc_{k}"] = {"units": stage.units, "dropout": stage.dropout}
    return data


def _numbered(data: dict[str, Any], prefix: str) -> list[Any]:
    keys = [key for key in data if key.startswith(prefix) and key[len(prefix):].isdigit()]
    indices = sorted(int(key[len(prefix):]) for key in keys)
    if indices != list(range(1, len(indices) + 1)):
        raise ConfigInvalid(f"{prefix}N keys must be numbered 1..N, got {sorted(keys)}")
    return [data[f"{prefix}{i}"] for i in indices]


def _pair(value: Any, what: str) -> tuple[int, int]:
    if not isinstance(value, (list, tuple)) or len(value) != 2:
        raise ConfigInvalid(f"{what} must be a pair, got {value!r}")
    return int(value[0]), int(value[1])


def spec_from_dict(data: dict[str, Any]) -> ArchitectureSpec:
    if not isinstance(data, dict):
        raise ConfigInvalid("architecture spec must be a mapping")
    try:
        conv_stages = tuple(
            ConvStage(
                kernel=_pair(row["kernel"], "kernel"),
                stride=_pair(row.get("stride", [1, 1]), "stride"),
                filters=int(row.get("filters", DEFAULT_FILTERS)),
                batch_norm=bool(row.get("batch_norm", True)),
                padding=row.get("padding", "same"),
            )
            for row in _numbered(data, "conv_")
        )
        pool_bank = tuple(_pair(row, "pool") for row in _numbered(data, "ap_"))
        fc_stages = tuple(
            FcStage(units=int(row["units"]), dropout=float(row.get("dropout", 0.0)))
            for row in _numbered(data, "fc_")
        )
        input_shape = tuple(int(v) for v in data["input_shape"])
        num_classes = int(data["num_classes"])
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ConfigInvalid):
            raise
        raise ConfigInvalid(f"bad architecture spec: {exc}") from exc
    if len(input_shape) != 3:
        raise ConfigInvalid(f"input_shape must have 3 entries, got {list(input_shape)}")
    if any(stage.padding not in ("same", "valid") for stage in conv_stages):
        raise ConfigInvalid("padding must be 'same' or 'valid'")
    return ArchitectureSpec(
        conv_stages=conv_stages,
        pool_bank=pool_bank,
        fc_stages=fc_stages,
        num_classes=num_classes,
        input_shape=input_shape,
        avg_pool=bool(data.get("avg_pool", bool(pool_bank))),
        name=str(data.get("name", "custom")),
    )


def dump_spec(spec: ArchitectureSpec, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        yaml.safe_dump(spec_to_dict(spec), sort_keys=False, allow_unicode=True),
        encoding="utf-8",
    )


def load_spec(path: Path) -> ArchitectureSpec:
    if not path.exists():
        raise ConfigInvalid(f"architecture spec not found: {path}")
    return spec_from_dict(yaml.safe_load(path.read_text(encoding="utf-8")))
