import logging
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from src.errors import FrozenNetwork, ShapeMismatch
from src.nn import functional as F
from src.nn.layers import Dropout, Layer
from src.tensor import Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ForwardResult:
    loss: float
    gradients: dict[str, Tensor]


class Network:
    """Sequential stack of layers ending in logits; softmax lives in the loss."""

    def __init__(
        self,
        layers: list[Layer],
        input_shape: tuple[int, int, int],
        num_classes: int,
        dropout_rng: np.random.Generator | None = None,
    ) -> None:
        names = [layer.name for layer in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique: {names}")
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.num_classes = num_classes
        self.dropout_rng = dropout_rng
        self.frozen = False

    # -- state -------------------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        return {
            f"{layer.name}.{key}": value
            for layer in self.layers
            for key, value in layer.params.items()
        }

    def buffers(self) -> dict[str, Tensor]:
        return {
            f"{layer.name}.{key}": value
            for layer in self.layers
            for key, value in layer.buffers.items()
        }

    def state_dict(self) -> dict[str, Tensor]:
        state = {k: v.copy() for k, v in self.parameters().items()}
        state.update({k: v.copy() for k, v in self.buffers().items()})
        return state

    def load_state_dict(self, state: dict[str, Tensor]) -> None:
        self._ensure_mutable()
        expected = set(self.parameters()) | set(self.buffers())
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise ShapeMismatch(f"state mismatch: missing {missing}, unexpected {extra}")
        for layer in self.layers:
            for store in (layer.params, layer.buffers):
                for key, value in store.items():
                    incoming = np.asarray(state[f"{layer.name}.{key}"], dtype=np.float64)
                    if incoming.shape != value.shape:
                        raise ShapeMismatch(
                            f"{layer.name}.{key}: {list(incoming.shape)} != {list(value.shape)}"
                        )
                    store[key] = incoming.copy()

    def set_dropout(self, enabled: bool) -> None:
        for layer in self.layers:
            if isinstance(layer, Dropout):
                layer.enabled = enabled

    def freeze(self) -> "Network":
        """Make the network immutable; it can then be shared for concurrent inference."""
        for layer in self.layers:
            for store in (layer.params, layer.buffers):
                for value in store.values():
                    value.setflags(write=False)
        self.frozen = True
        return self

    def _ensure_mutable(self) -> None:
        if self.frozen:
            raise FrozenNetwork("network is frozen")

    # -- passes ------------------------------------------------------------

    def forward(self, x: Tensor, train: bool = False) -> Tensor:
        """Logits for a batch ``[N, 2m, n, c]`` (or a single ``[2m, n, c]`` instance)."""
        if train:
            self._ensure_mutable()
        xb = np.asarray(x, dtype=np.float64)
        single = xb.ndim == 3
        if single:
            xb = xb[None]
        if xb.shape[1:] != self.input_shape:
            raise ShapeMismatch(
                f"input {list(xb.shape[1:])} does not match network input {list(self.input_shape)}"
            )
        out = xb
        for layer in self.layers:
            out = layer.forward(out, train, self.dropout_rng)
        return out[0] if single else out

    def predict_proba(self, x: Tensor, batch_size: int = 256) -> Tensor:
        xb = np.asarray(x, dtype=np.float64)
        if xb.ndim == 3:
            return F.softmax(self.forward(xb, train=False))
        chunks = [
            F.softmax(self.forward(xb[i : i + batch_size], train=False))
            for i in range(0, len(xb), batch_size)
        ]
        return np.concatenate(chunks, axis=0)

    def predict(self, x: Tensor, batch_size: int = 256) -> npt.NDArray[np.int64]:
        return np.argmax(self.predict_proba(x, batch_size), axis=-1)

    def backward(self, x: Tensor, labels: npt.ArrayLike) -> ForwardResult:
        """Mean cross-entropy over the batch and its exact gradients."""
        self._ensure_mutable()
        logits = self.forward(x, train=True)
        result = F.softmax_cross_entropy(logits, labels)
        grad = result.dlogits
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        gradients = {
            f"{layer.name}.{key}": value
            for layer in self.layers
            for key, value in layer.grads.items()
        }
        return ForwardResult(loss=result.loss, gradients=gradients)

    def summary(self) -> list[tuple[str, tuple[int, ...]]]:
        shape: tuple[int, ...] = self.input_shape
        rows = []
        for layer in self.layers:
            shape = layer.output_shape(shape)
            rows.append((layer.name, shape))
        return rows
