"""Classical CSI preprocessing: amplitude, normalisation, phase, unwrap, sanitise.

Subcarriers are an ordered index set ``j = 0..n-1``; physical spacing is not
modelled. Phase helpers take the subcarrier axis as the last axis unless told
otherwise, so they work on a single ``[n]`` vector as well as on ``[m, n, c]``
blocks (pass ``axis=1``).
"""

import logging
from dataclasses import dataclass
from enum import Enum
from math import pi

import numpy as np
import numpy.typing as npt
from pydantic import BaseModel, ConfigDict, Field

from src.csi_model import CsiInstance, interleave
from src.errors import DegenerateLength, LengthMismatch
from src.tensor import Tensor

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * pi


class Normalization(str, Enum):
    L2_PER_MEASUREMENT = "l2_per_measurement"
    MAX_PER_MEASUREMENT = "max_per_measurement"
    NONE = "none"


class Detrend(str, Enum):
    ENDPOINT = "endpoint"
    LEAST_SQUARES = "least_squares"


class PipelineConfig(BaseModel):
    model_config = ConfigDict(frozen=True, use_enum_values=False)

    unwrap_threshold: float = Field(default=pi, gt=0, description="unwrap threshold in radians")
    normalization: Normalization = Field(default=Normalization.L2_PER_MEASUREMENT)
    sanitize: bool = Field(default=True, description="remove phase slope and offset")
    detrend: Detrend = Field(default=Detrend.ENDPOINT)


@dataclass(frozen=True)
class PhaseField:
    """Phases in (-pi, pi] with a mask of positions where re == im == 0."""

    values: Tensor
    undefined: npt.NDArray[np.bool_]


@dataclass(frozen=True)
class ProbeReport:
    pre_dist: float
    post_dist: float
    straddled: bool


def amplitude(inst: CsiInstance) -> Tensor:
    """[m, n, c] magnitudes of the complex measurements."""
    return np.hypot(inst.planes[0::2], inst.planes[1::2])


def normalize_amplitude(
    amp: Tensor, mode: Normalization = Normalization.L2_PER_MEASUREMENT
) -> Tensor:
    """Normalise every subcarrier vector (fixed sample, fixed antenna).

    ``amp`` is ``[m, n, c]``; zero-norm vectors pass through unchanged.
    """
    mode = Normalization(mode)
    if mode is Normalization.NONE:
        return np.array(amp, dtype=np.float64)
    if mode is Normalization.L2_PER_MEASUREMENT:
        norm = np.sqrt(np.sum(amp * amp, axis=1, keepdims=True))
    else:
        norm = np.max(np.abs(amp), axis=1, keepdims=True)
    safe = np.where(norm > 0.0, norm, 1.0)
    return amp / safe


def phase(inst: CsiInstance) -> PhaseField:
    re = inst.planes[0::2]
    im = inst.planes[1::2]
    undefined = (re == 0.0) & (im == 0.0)
    # atan2 gives -pi for (-1, -0.0); fold it onto the (-pi, pi] branch.
    theta = np.arctan2(im, re)
    theta = np.where(theta <= -pi, pi, theta)
    theta = np.where(undefined, 0.0, theta)
    if undefined.any():
        logger.debug("phase undefined at %d positions", int(undefined.sum()))
    return PhaseField(values=theta, undefined=undefined)


def unwrap(p: Tensor, threshold: float = pi, axis: int = -1) -> Tensor:
    """Add/subtract 2*pi to every following subcarrier when a jump exceeds ``threshold``."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape[axis] < 2:
        return p.copy()
    d = np.diff(p, axis=axis)
    steps = np.where(d > threshold, -TWO_PI, np.where(d < -threshold, TWO_PI, 0.0))
    kappa = np.cumsum(steps, axis=axis)
    first = np.take(np.zeros_like(p), [0], axis=axis)
    return p + np.concatenate([first, kappa], axis=axis)


def sanitize(p: Tensor, detrend: Detrend = Detrend.ENDPOINT, axis: int = -1) -> Tensor:
    """Remove the linear slope and constant offset of an unwrapped phase vector."""
    p = np.moveaxis(np.asarray(p, dtype=np.float64), axis, -1)
    n = p.shape[-1]
    if n < 2:
        raise DegenerateLength(f"sanitize needs at least 2 subcarriers, got {n}")
    j = np.arange(n, dtype=np.float64)

    if Detrend(detrend) is Detrend.ENDPOINT:
        # slope is taken against the centred index so mean(p) is the offset
        slope = (p[..., -1:] - p[..., :1]) / (n - 1)
        offset = np.mean(p, axis=-1, keepdims=True)
        out = p - slope * (j - j.mean()) - offset
    else:
        jc = j - j.mean()
        slope = np.sum((p - p.mean(axis=-1, keepdims=True)) * jc, axis=-1, keepdims=True)
        slope = slope / np.sum(jc * jc)
        residual = p - slope * j
        out = residual - residual.mean(axis=-1, keepdims=True)
    return np.moveaxis(out, -1, axis)


def sanitized_complex(
    inst: CsiInstance, cfg: PipelineConfig | None = None
) -> tuple[CsiInstance, npt.NDArray[np.bool_]]:
    """Rebuild the planes from normalised amplitude and (optionally) sanitised phase.

    Returns the new instance and the phase-undefined mask ``[m, n, c]``.
    """
    cfg = cfg or PipelineConfig()
    amp = normalize_amplitude(amplitude(inst), cfg.normalization)
    theta = phase(inst)
    values = theta.values
    if cfg.sanitize:
        values = sanitize(unwrap(values, cfg.unwrap_threshold, axis=1), cfg.detrend, axis=1)
    rebuilt = interleave(amp * np.exp(1j * values))
    return inst.with_planes(rebuilt), theta.undefined


def _sides(d: Tensor, threshold: float) -> npt.NDArray[np.int8]:
    return np.where(d > threshold, 1, np.where(d < -threshold, -1, 0)).astype(np.int8)


def unwrap_instability_probe(pa: Tensor, pb: Tensor, threshold: float = pi) -> ProbeReport:
    """Measure how far two nearby phase vectors drift apart after unwrapping.

    Three mechanisms make unwrapping unstable: a jump straddling the threshold
    (detected here), a clock-asynchrony slope that pushes neighbouring jumps
    across it, and the rotation-direction ambiguity of a change near +/-pi,
    where the same physical change reads as either +x or x - 2*pi.
    """
    pa = np.asarray(pa, dtype=np.float64)
    pb = np.asarray(pb, dtype=np.float64)
    if pa.shape != pb.shape:
        raise LengthMismatch(f"phase vectors differ in length: {pa.shape} vs {pb.shape}")
    pre = float(np.max(np.abs(pa - pb))) if pa.size else 0.0
    post = float(np.max(np.abs(unwrap(pa, threshold) - unwrap(pb, threshold)))) if pa.size else 0.0
    straddled = bool(np.any(_sides(np.diff(pa), threshold) != _sides(np.diff(pb), threshold)))
    return ProbeReport(pre_dist=pre, post_dist=post, straddled=straddled)


def demo_phase_pair(
    n: int = 30, jump_a: float = 3.10, jump_b: float = 3.18
) -> tuple[Tensor, Tensor]:
    """Two raw phase vectors that agree up to 0.08 rad but straddle the threshold once."""
    if n < 4:
        raise DegenerateLength(f"demo pair needs at least 4 subcarriers, got {n}")
    steps = np.full(n - 1, 0.05)
    steps_a = steps.copy()
    steps_b = steps.copy()
    steps_a[n // 2 - 1] = jump_a
    steps_b[n // 2 - 1] = jump_b
    pa = -3.0 + np.concatenate([[0.0], np.cumsum(steps_a)])
    pb = -3.0 + np.concatenate([[0.0], np.cumsum(steps_b)])
    return pa, pb


def demo_unwrap_rows(pa: Tensor, pb: Tensor, threshold: float = pi) -> list[dict[str, float]]:
    ua = unwrap(pa, threshold)
    ub = unwrap(pb, threshold)
    return [
        {
            "subcarrier": j,
            "rawA": float(pa[j]),
            "rawB": float(pb[j]),
            "unwrappedA": float(ua[j]),
            "unwrappedB": float(ub[j]),
        }
        for j in range(len(pa))
    ]
