"""Stateful layers with hand-written backward passes.

Layers only keep a backward cache for train-mode forwards, so infer-mode calls
on a frozen network are read-only and may run concurrently.
"""

from math import sqrt

import numpy as np

from src.errors import ShapeMismatch
from src.nn import functional as F
from src.tensor import Tensor


def glorot_uniform(
    rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int
) -> Tensor:
    limit = sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    def __init__(self, name: str) -> None:
        self.name = name
        self.params: dict[str, Tensor] = {}
        self.grads: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}

    def forward(self, x: Tensor, train: bool, rng: np.random.Generator | None = None) -> Tensor:
        raise NotImplementedError

    def backward(self, dout: Tensor) -> Tensor:
        raise NotImplementedError

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        return shape

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


class Conv2D(Layer):
    def __init__(
        self,
        name: str,
        kernel: tuple[int, int],
        stride: tuple[int, int],
        in_channels: int,
        filters: int,
        padding: F.Padding,
        rng: np.random.Generator,
    ) -> None:
        super().__init__(name)
        kh, kw = kernel
        self.stride = stride
        self.padding = padding
        self.params["kernel"] = glorot_uniform(
            rng, (kh, kw, in_channels, filters), kh * kw * in_channels, kh * kw * filters
        )
        self.params["bias"] = np.zeros(filters)
        self._cache: F.ConvCache | None = None

    def forward(self, x, train, rng=None):
        out, cache = F.conv2d_forward(
            x, self.params["kernel"], self.params["bias"], self.stride, self.padding
        )
        if train:
            self._cache = cache
        return out

    def backward(self, dout):
        dx, self.grads["kernel"], self.grads["bias"] = F.conv2d_backward(dout, self._cache)
        return dx

    def output_shape(self, shape):
        kh, kw, _, filters = self.params["kernel"].shape
        oh, ow = F.conv_output_shape(shape[:2], (kh, kw), self.stride, self.padding)
        return (oh, ow, filters)


class BatchNorm2D(Layer):
    def __init__(self, name: str, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> None:
        super().__init__(name)
        self.momentum = momentum
        self.eps = eps
        self.params["gamma"] = np.ones(channels)
        self.params["beta"] = np.zeros(channels)
        self.buffers["running_mean"] = np.zeros(channels)
        self.buffers["running_var"] = np.ones(channels)
        self._cache: F.BatchNormCache | None = None

    def forward(self, x, train, rng=None):
        result = F.batch_norm_forward(
            x,
            self.params["gamma"],
            self.params["beta"],
            self.buffers["running_mean"],
            self.buffers["running_var"],
            train,
            self.momentum,
            self.eps,
        )
        if train:
            self.buffers["running_mean"] = result.running_mean
            self.buffers["running_var"] = result.running_var
            self._cache = result.cache
        return result.output

    def backward(self, dout):
        dx, self.grads["gamma"], self.grads["beta"] = F.batch_norm_backward(dout, self._cache)
        return dx


class ReLU(Layer):
    def __init__(self, name: str) -> None:
        super().__init__(name)
        self._mask: Tensor | None = None

    def forward(self, x, train, rng=None):
        if train:
            self._mask = x > 0.0
        return F.relu(x)

    def backward(self, dout):
        return dout * self._mask


class PoolBank(Layer):
    """Parallel average pools over one input, flattened and concatenated per instance."""

    def __init__(self, name: str, pools: list[tuple[int, int]]) -> None:
        super().__init__(name)
        self.pools = list(pools)
        self._input_shape: tuple[int, ...] | None = None
        self._out_shapes: list[tuple[int, ...]] = []

    def forward(self, x, train, rng=None):
        outs = [F.avg_pool_forward(x, pool) for pool in self.pools]
        if train:
            self._input_shape = x.shape
            self._out_shapes = [o.shape for o in outs]
        n = x.shape[0]
        return np.concatenate([o.reshape(n, -1) for o in outs], axis=1)

    def backward(self, dout):
        dx = np.zeros(self._input_shape, dtype=np.float64)
        start = 0
        for pool, shape in zip(self.pools, self._out_shapes):
            size = int(np.prod(shape[1:]))
            part = dout[:, start : start + size].reshape(shape)
            dx += F.avg_pool_backward(part, self._input_shape, pool)
            start += size
        return dx

    def output_shape(self, shape):
        total = 0
        for pool in self.pools:
            oh, ow = F.pool_output_shape(shape[:2], pool)
            total += oh * ow * shape[2]
        return (total,)


class Flatten(Layer):
    def __init__(self, name: str) -> None:
        super().__init__(name)
        self._input_shape: tuple[int, ...] | None = None

    def forward(self, x, train, rng=None):
        if train:
            self._input_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._input_shape)

    def output_shape(self, shape):
        return (int(np.prod(shape)),)


class Dropout(Layer):
    def __init__(self, name: str, drop_prob: float) -> None:
        super().__init__(name)
        self.drop_prob = drop_prob
        self.enabled = True
        self._mask: Tensor | None = None

    def forward(self, x, train, rng=None):
        out, mask = F.dropout_forward(x, self.drop_prob, train and self.enabled, rng)
        if train:
            self._mask = mask
        return out

    def backward(self, dout):
        return dout if self._mask is None else dout * self._mask


class Dense(Layer):
    def __init__(
        self,
        name: str,
        in_features: int,
        units: int,
        activation: F.Activation,
        rng: np.random.Generator,
    ) -> None:
        super().__init__(name)
        self.activation = activation
        self.params["weight"] = glorot_uniform(rng, (in_features, units), in_features, units)
        self.params["bias"] = np.zeros(units)
        self._x: Tensor | None = None
        self._out: Tensor | None = None

    def forward(self, x, train, rng=None):
        if x.ndim != 2:
            raise ShapeMismatch(f"dense layer expects [N, d], got {list(x.shape)}")
        out = F.dense_forward(x, self.params["weight"], self.params["bias"], self.activation)
        if train:
            self._x, self._out = x, out
        return out

    def backward(self, dout):
        if self.activation == "relu":
            dout = dout * (self._out > 0.0)
        self.grads["weight"] = self._x.T @ dout
        self.grads["bias"] = dout.sum(axis=0)
        return dout @ self.params["weight"].T

    def output_shape(self, shape):
        return (self.params["weight"].shape[1],)
