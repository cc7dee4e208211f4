"""Deterministic synthetic CSI with multipath classes and clock/RSS impairments.

Each class owns a multipath frequency response per antenna pair. Every
measurement of an instance sees that response scaled by an RSS factor, rotated
by a random linear phase (slope and offset from clock asynchrony), plus complex
Gaussian noise and, optionally, subband RFI bursts. All draws come from
``src.seeding`` substreams keyed by ids, never by draw order.
"""

import logging
from math import pi, sqrt
from typing import Any

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.csi_model import CsiDataset, CsiInstance, interleave, to_storage_precision
from src.errors import ConfigInvalid, InvariantViolation
from src.seeding import Role, substream

logger = logging.getLogger(__name__)

Range = tuple[float, float]


class RfiConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    subband_start: int = Field(default=0, ge=0)
    subband_width: int = Field(default=8, ge=1)
    burst_std: float = Field(default=1.0, ge=0.0)
    burst_prob: float = Field(default=0.5, ge=0.0, le=1.0)


class SynthConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    num_classes: int = Field(default=10, ge=1)
    instances_per_class: int = Field(default=250, ge=1)
    test_per_class: int = Field(default=50, ge=0, description="held out by split_train_test")
    m: int = Field(default=5, ge=1, description="measurements per instance")
    n: int = Field(default=30, ge=1, description="subcarriers")
    c: int = Field(default=1, ge=1, description="antenna pairs")
    paths: int = Field(default=4, ge=1)
    path_gain_range: Range = (0.2, 1.0)
    delay_spread_range: Range = Field(default=(0.0, 1.0), description="per-subcarrier phase rate")
    noise_std: float = Field(default=0.05, ge=0.0)
    phase_slope_range: Range = (-0.1, 0.1)
    phase_offset_range: Range = (-pi, pi)
    amp_scale_range: Range = (0.5, 2.0)
    rfi: RfiConfig | None = None
    storage_precision: bool = Field(default=True, description="round planes to f32 like CSIT")
    seed: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "SynthConfig":
        for name in (
            "path_gain_range",
            "delay_spread_range",
            "phase_slope_range",
            "phase_offset_range",
            "amp_scale_range",
        ):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} is not ordered: {lo} > {hi}")
        if self.amp_scale_range[0] <= 0.0:
            raise ValueError("amp_scale_range must be strictly positive")
        lo, hi = self.delay_spread_range
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"delay_spread_range must lie in [0, 1], got ({lo}, {hi})")
        if self.rfi is not None and self.rfi.subband_start >= self.n:
            raise ValueError(f"rfi subband starts at {self.rfi.subband_start}, past n={self.n}")
        if self.test_per_class >= self.instances_per_class and self.test_per_class > 0:
            raise ValueError("test_per_class must leave training instances")
        return self

    @classmethod
    def from_mapping(cls, data: dict[str, Any] | None) -> "SynthConfig":
        try:
            return cls.model_validate(data or {})
        except ValidationError as exc:
            raise ConfigInvalid(f"invalid synth config: {exc}") from exc

    def impairment_free(self) -> "SynthConfig":
        return self.model_copy(
            update={
                "noise_std": 0.0,
                "phase_slope_range": (0.0, 0.0),
                "phase_offset_range": (0.0, 0.0),
                "amp_scale_range": (1.0, 1.0),
                "rfi": None,
            }
        )


def class_response(class_id: int, cfg: SynthConfig) -> npt.NDArray[np.complex128]:
    """``[n, c]`` response: sum over paths of a_p * exp(-i 2 pi j tau_p), per antenna pair."""
    if not 0 <= class_id < cfg.num_classes:
        raise InvariantViolation(f"class {class_id} outside [0, {cfg.num_classes})")
    j = np.arange(cfg.n, dtype=np.float64)
    response = np.empty((cfg.n, cfg.c), dtype=np.complex128)
    for antenna in range(cfg.c):
        rng = substream(cfg.seed, Role.PATHS, class_id, antenna)
        gains = rng.uniform(*cfg.path_gain_range, size=cfg.paths)
        delays = rng.uniform(*cfg.delay_spread_range, size=cfg.paths)
        response[:, antenna] = np.exp(-2j * pi * np.outer(j, delays)) @ gains
    return response


def _measurement(
    cfg: SynthConfig, response: npt.NDArray[np.complex128], instance_id: int, i: int
) -> npt.NDArray[np.complex128]:
    j = np.arange(cfg.n, dtype=np.float64)[:, None]
    slope = substream(cfg.seed, Role.SLOPE, instance_id, i).uniform(*cfg.phase_slope_range)
    offset = substream(cfg.seed, Role.OFFSET, instance_id, i).uniform(*cfg.phase_offset_range)
    scale = substream(cfg.seed, Role.SCALE, instance_id, i).uniform(*cfg.amp_scale_range)
    value = scale * response * np.exp(1j * (slope * j + offset))

    if cfg.noise_std > 0.0:
        noise = substream(cfg.seed, Role.NOISE, instance_id, i).normal(
            0.0, cfg.noise_std / sqrt(2.0), size=(2, cfg.n, cfg.c)
        )
        value = value + noise[0] + 1j * noise[1]

    if cfg.rfi is not None:
        rng = substream(cfg.seed, Role.RFI, instance_id, i)
        if rng.random() < cfg.rfi.burst_prob:
            lo = cfg.rfi.subband_start
            hi = min(lo + cfg.rfi.subband_width, cfg.n)
            burst = rng.normal(0.0, cfg.rfi.burst_std / sqrt(2.0), size=(2, hi - lo, cfg.c))
            value[lo:hi] += burst[0] + 1j * burst[1]
    return value


def generate(cfg: SynthConfig) -> CsiDataset:
    """Instances are ordered by class, then by index within the class."""
    responses = [class_response(k, cfg) for k in range(cfg.num_classes)]
    instances = []
    for k in range(cfg.num_classes):
        for idx in range(cfg.instances_per_class):
            instance_id = k * cfg.instances_per_class + idx
            values = np.stack(
                [_measurement(cfg, responses[k], instance_id, i) for i in range(cfg.m)]
            )
            planes = interleave(values)
            if cfg.storage_precision:
                planes = to_storage_precision(planes)
            instances.append(CsiInstance(planes=planes, label=k))

    meta = {"source": "synthgen", "seed": str(cfg.seed), "rfi": "on" if cfg.rfi else "off"}
    logger.info(
        "generated %d instances (%d classes, m=%d n=%d c=%d, rfi=%s)",
        len(instances), cfg.num_classes, cfg.m, cfg.n, cfg.c, meta["rfi"],
    )
    return CsiDataset(
        instances=tuple(instances),
        label_names=tuple(f"class_{k}" for k in range(cfg.num_classes)),
        meta=meta,
    )


def split_train_test(ds: CsiDataset, test_per_class: int) -> tuple[CsiDataset, CsiDataset]:
    """Last ``test_per_class`` instances of every class go to the test set."""
    train_idx, test_idx = [], []
    labels = ds.labels
    for cls in range(ds.num_classes):
        members = np.flatnonzero(labels == cls)
        if test_per_class >= len(members) and len(members) > 0:
            raise InvariantViolation(
                f"class {cls} has {len(members)} instances, cannot hold out {test_per_class}"
            )
        cut = len(members) - test_per_class
        train_idx.extend(members[:cut])
        test_idx.extend(members[cut:])
    return ds.subset(train_idx), ds.subset(test_idx)


# ---------------------------------------------------------------------------
# nearest-centroid oracle
# ---------------------------------------------------------------------------


class OracleReport(BaseModel):
    classes: int
    instances: int
    clean_accuracy: float
    impaired_accuracy: float


def nearest_centroid_accuracy(ds: CsiDataset) -> float:
    """Resubstitution accuracy of a nearest-centroid rule on the raw planes."""
    x = ds.planes.reshape(len(ds), -1)
    labels = ds.labels
    classes = np.unique(labels)
    if len(classes) == 1:
        return 1.0
    centroids = np.stack([x[labels == cls].mean(axis=0) for cls in classes])
    dist = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    predicted = classes[np.argmin(dist, axis=1)]
    return float(np.mean(predicted == labels))


def oracle_sanity_check(cfg: SynthConfig) -> OracleReport:
    clean = nearest_centroid_accuracy(generate(cfg.impairment_free()))
    impaired = nearest_centroid_accuracy(generate(cfg))
    logger.info("nearest-centroid accuracy: clean %.4f, impaired %.4f", clean, impaired)
    return OracleReport(
        classes=cfg.num_classes,
        instances=cfg.num_classes * cfg.instances_per_class,
        clean_accuracy=clean,
        impaired_accuracy=impaired,
    )
