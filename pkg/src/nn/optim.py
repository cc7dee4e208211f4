from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.errors import ShapeMismatch
from src.tensor import Tensor


class OptimizerConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: Literal["sgd", "adam"] = Field(default="adam")
    lr: float = Field(default=1e-3, ge=0.0, description="learning rate")
    beta1: float = Field(default=0.9, ge=0.0, lt=1.0)
    beta2: float = Field(default=0.999, ge=0.0, lt=1.0)
    eps: float = Field(default=1e-8, gt=0.0)

    def build(self) -> "Optimizer":
        if self.name == "sgd":
            return SGD(lr=self.lr)
        return Adam(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)


class Optimizer:
    def __init__(self) -> None:
        self.step_count = 0

    def step(self, params: dict[str, Tensor], grads: dict[str, Tensor]) -> dict[str, Tensor]:
        """Update ``params`` in place and return them."""
        for name, value in params.items():
            if name not in grads:
                raise ShapeMismatch(f"no gradient for parameter {name}")
            if grads[name].shape != value.shape:
                raise ShapeMismatch(
                    f"{name}: gradient {list(grads[name].shape)} != parameter {list(value.shape)}"
                )
        self.step_count += 1
        for name, value in params.items():
            value -= self._delta(name, grads[name])
        return params

    def _delta(self, name: str, grad: Tensor) -> Tensor:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, lr: float) -> None:
        super().__init__()
        self.lr = lr

    def _delta(self, name, grad):
        return self.lr * grad


class Adam(Optimizer):
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        super().__init__()
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, Tensor] = {}
        self.v: dict[str, Tensor] = {}

    def _delta(self, name, grad):
        m = self.m.get(name, np.zeros_like(grad))
        v = self.v.get(name, np.zeros_like(grad))
        m = self.beta1 * m + (1.0 - self.beta1) * grad
        v = self.beta2 * v + (1.0 - self.beta2) * grad * grad
        self.m[name], self.v[name] = m, v
        m_hat = m / (1.0 - self.beta1**self.step_count)
        v_hat = v / (1.0 - self.beta2**self.step_count)
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

