"""Forward/backward kernels for the layer set, batched NHWC in float64.

Forward kernels return ``(output, cache)``; the matching ``*_backward`` takes the
upstream gradient and that cache. Public forward signatures accept an unbatched
``[H, W, C]`` input and then return an unbatched output.
"""

from dataclasses import dataclass
from math import ceil
from typing import Literal

import numpy as np
import numpy.typing as npt

from src.errors import (
    BatchTooSmall,
    EmptyInput,
    KernelTooLarge,
    LabelOutOfRange,
    PoolTooLarge,
    ShapeMismatch,
)
from src.tensor import Tensor, matmul

Padding = Literal["same", "valid"]
Activation = Literal["relu", "none"]


# ---------------------------------------------------------------------------
# shape algebra
# ---------------------------------------------------------------------------


def _pad_amounts(size: int, k: int, s: int, padding: Padding) -> tuple[int, int, int]:
    """Return (pad_lo, pad_hi, out) along one axis."""
    if padding == "valid":
        if k > size:
            raise KernelTooLarge(f"kernel {k} larger than input {size}")
        return 0, 0, (size - k) // s + 1
    out = ceil(size / s)
    total = max((out - 1) * s + k - size, 0)
    return total // 2, total - total // 2, out


def conv_output_shape(
    hw: tuple[int, int],
    kernel: tuple[int, int],
    stride: tuple[int, int],
    padding: Padding,
) -> tuple[int, int]:
    _, _, oh = _pad_amounts(hw[0], kernel[0], stride[0], padding)
    _, _, ow = _pad_amounts(hw[1], kernel[1], stride[1], padding)
    return oh, ow


def pool_output_shape(hw: tuple[int, int], pool: tuple[int, int]) -> tuple[int, int]:
    if pool[0] > hw[0] or pool[1] > hw[1]:
        raise PoolTooLarge(f"pool {pool[0]}x{pool[1]} larger than input {hw[0]}x{hw[1]}")
    return hw[0] // pool[0], hw[1] // pool[1]


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ShapeMismatch(f"expected [N,H,W,C] or [H,W,C], got {list(x.shape)}")
    return x, False


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


@dataclass
class ConvCache:
    padded: Tensor
    pads: tuple[int, int, int, int]
    stride: tuple[int, int]
    out_hw: tuple[int, int]
    kernel: Tensor


def _tap(xp: Tensor, i: int, j: int, geometry: tuple[tuple[int, int], tuple[int, int]]) -> Tensor:
    """Input rows/cols that kernel tap (i, j) sees, one per output position."""
    (sh, sw), (oh, ow) = geometry
    return xp[:, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw, :]


def conv2d_forward(
    x: Tensor,
    kernel: Tensor,
    bias: Tensor,
    stride: tuple[int, int] = (1, 1),
    padding: Padding = "valid",
) -> tuple[Tensor, ConvCache]:
    """Cross-correlation of ``x`` with ``kernel [kh, kw, Cin, Cout]``.

    Accumulates one ``[N, H', W', Cin] x [Cin, Cout]`` product per kernel tap,
    so memory stays at the size of the input rather than of its im2col matrix.
    """
    xb, single = _batched(x)
    kh, kw, cin, cout = kernel.shape
    if xb.shape[3] != cin:
        raise ShapeMismatch(f"input has {xb.shape[3]} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise ShapeMismatch(f"bias shape {list(bias.shape)} != [{cout}]")
    sh, sw = stride
    top, bottom, oh = _pad_amounts(xb.shape[1], kh, sh, padding)
    left, right, ow = _pad_amounts(xb.shape[2], kw, sw, padding)

    xp = np.pad(xb, ((0, 0), (top, bottom), (left, right), (0, 0)))
    geometry = ((sh, sw), (oh, ow))
    out = np.zeros((xb.shape[0], oh, ow, cout), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out += np.tensordot(_tap(xp, i, j, geometry), kernel[i, j], axes=([3], [0]))
    out += bias

    cache = ConvCache(xp, (top, bottom, left, right), (sh, sw), (oh, ow), kernel)
    return (out[0] if single else out), cache


def conv2d_backward(dout: Tensor, cache: ConvCache) -> tuple[Tensor, Tensor, Tensor]:
    """Return (dx, dkernel, dbias); ``dout`` is batched."""
    kernel = cache.kernel
    kh, kw, _, _ = kernel.shape
    geometry = (cache.stride, cache.out_hw)
    sh, sw = cache.stride
    oh, ow = cache.out_hw

    dkernel = np.zeros_like(kernel)
    dxp = np.zeros_like(cache.padded)
    for i in range(kh):
        for j in range(kw):
            dkernel[i, j] = np.tensordot(
                _tap(cache.padded, i, j, geometry), dout, axes=([0, 1, 2], [0, 1, 2])
            )
            dxp[:, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw, :] += (
                np.tensordot(dout, kernel[i, j], axes=([3], [1]))
            )
    dbias = dout.sum(axis=(0, 1, 2))
    top, bottom, left, right = cache.pads
    dx = dxp[:, top : dxp.shape[1] - bottom, left : dxp.shape[2] - right, :]
    return dx, dkernel, dbias


# ---------------------------------------------------------------------------
# batch normalisation
# ---------------------------------------------------------------------------


@dataclass
class BatchNormCache:
    x_hat: Tensor
    inv_std: Tensor
    gamma: Tensor


@dataclass(frozen=True)
class BatchNormResult:
    output: Tensor
    running_mean: Tensor
    running_var: Tensor
    cache: BatchNormCache | None


def batch_norm_forward(
    batch: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    train: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> BatchNormResult:
    """Per-channel normalisation over the N*H*W positions of ``batch [N,H,W,C]``.

    Running statistics are returned, never updated in place.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 4:
        raise ShapeMismatch(f"batch norm expects [N,H,W,C], got {list(x.shape)}")
    if not train:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        y = gamma * (x - running_mean) * inv_std + beta
        return BatchNormResult(y, running_mean, running_var, None)

    if x.shape[0] < 2:
        raise BatchTooSmall(f"train-mode batch norm needs N >= 2, got {x.shape[0]}")
    mean = x.mean(axis=(0, 1, 2))
    var = x.var(axis=(0, 1, 2))
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x - mean) * inv_std
    y = gamma * x_hat + beta
    new_mean = (1.0 - momentum) * running_mean + momentum * mean
    new_var = (1.0 - momentum) * running_var + momentum * var
    return BatchNormResult(y, new_mean, new_var, BatchNormCache(x_hat, inv_std, gamma))


def batch_norm_backward(dout: Tensor, cache: BatchNormCache) -> tuple[Tensor, Tensor, Tensor]:
    """Return (dx, dgamma, dbeta) for a train-mode forward."""
    axes = (0, 1, 2)
    count = dout.shape[0] * dout.shape[1] * dout.shape[2]
    dbeta = dout.sum(axis=axes)
    dgamma = (dout * cache.x_hat).sum(axis=axes)
    dx_hat = dout * cache.gamma
    dx = (
        cache.inv_std
        / count
        * (count * dx_hat - dx_hat.sum(axis=axes) - cache.x_hat * (dx_hat * cache.x_hat).sum(axis=axes))
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# pooling, concatenation, activations
# ---------------------------------------------------------------------------


def avg_pool_forward(x: Tensor, pool: tuple[int, int]) -> Tensor:
    """Non-overlapping mean pooling; trailing rows/cols that do not fill a window are dropped."""
    xb, single = _batched(x)
    n, h, w, c = xb.shape
    ph, pw = pool
    oh, ow = pool_output_shape((h, w), pool)
    cropped = xb[:, : oh * ph, : ow * pw, :]
    out = cropped.reshape(n, oh, ph, ow, pw, c).mean(axis=(2, 4))
    return out[0] if single else out


def avg_pool_backward(dout: Tensor, input_shape: tuple[int, ...], pool: tuple[int, int]) -> Tensor:
    n, oh, ow, c = dout.shape
    ph, pw = pool
    dx = np.zeros(input_shape, dtype=np.float64)
    spread = np.repeat(np.repeat(dout, ph, axis=1), pw, axis=2) / (ph * pw)
    dx[:, : oh * ph, : ow * pw, :] = spread
    return dx


def concat_flatten(parts: list[Tensor]) -> Tensor:
    if not parts:
        raise EmptyInput("concat_flatten needs at least one part")
    return np.concatenate([np.asarray(p, dtype=np.float64).reshape(-1) for p in parts])


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0)


def dropout_forward(
    x: Tensor, drop_prob: float, train: bool, rng: np.random.Generator | None
) -> tuple[Tensor, Tensor | None]:
    """Inverted dropout; returns (output, scaled keep-mask or None)."""
    if not 0.0 <= drop_prob < 1.0:
        raise ValueError(f"drop probability must be in [0, 1), got {drop_prob}")
    x = np.asarray(x, dtype=np.float64)
    if not train or drop_prob == 0.0:
        return x, None
    if rng is None:
        raise ValueError("train-mode dropout needs a random generator")
    mask = (rng.random(x.shape) >= drop_prob) / (1.0 - drop_prob)
    return x * mask, mask


def dense_forward(
    x: Tensor, weight: Tensor, bias: Tensor, activation: Activation = "none"
) -> Tensor:
    xb = np.asarray(x, dtype=np.float64)
    single = xb.ndim == 1
    if single:
        xb = xb[None]
    if xb.shape[1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ShapeMismatch(
            f"dense: x {list(xb.shape)}, W {list(weight.shape)}, b {list(bias.shape)}"
        )
    z = matmul(xb, weight) + bias
    if activation == "relu":
        z = relu(z)
    return z[0] if single else z


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossResult:
    loss: float
    probs: Tensor
    dlogits: Tensor


def softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: int | npt.ArrayLike) -> LossResult:
    """Mean cross-entropy; ``dlogits`` is the gradient of that mean."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    if single:
        z = z[None]
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, k = z.shape
    if k < 2:
        raise ShapeMismatch(f"softmax needs at least 2 classes, got {k}")
    if y.shape != (n,):
        raise ShapeMismatch(f"{n} logit rows but {y.shape[0]} labels")
    if np.any(y < 0) or np.any(y >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")

    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    probs = np.exp(log_probs)
    loss = float(-log_probs[np.arange(n), y].mean())
    dlogits = probs.copy()
    dlogits[np.arange(n), y] -= 1.0
    dlogits /= n
    if single:
        return LossResult(loss, probs[0], dlogits[0])
    return LossResult(loss, probs, dlogits)
