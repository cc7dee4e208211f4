"""Central finite-difference checks for every backward pass in the engine.

Each checker draws one random configuration, projects the layer output onto a
random tensor to obtain a scalar loss, and compares the analytic gradients
against central differences taken in float64.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

from src.errors import UsageError
from src.nn import functional as F
from src.nn.layers import BatchNorm2D, Conv2D, Dense, Dropout, PoolBank, ReLU
from src.nn.network import Network
from src.seeding import Role, substream
from src.tensor import Tensor

logger = logging.getLogger(__name__)

STEP = 1e-5
TOLERANCE = 1e-4


@dataclass(frozen=True)
class GradcheckResult:
    layer: str
    index: int
    max_error: float
    config: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def numeric_gradient(loss: Callable[[], float], x: Tensor, h: float = STEP) -> Tensor:
    """Central differences of ``loss()`` w.r.t. ``x``; ``x`` is perturbed in place and restored."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"], op_flags=[["readwrite"]])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        plus = loss()
        x[idx] = orig - h
        minus = loss()
        x[idx] = orig
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: Tensor, numeric: Tensor, floor: float = 1e-6) -> float:
    a = np.ravel(analytic)
    b = np.ravel(numeric)
    denom = max(float(np.linalg.norm(a)), float(np.linalg.norm(b)), floor)
    return float(np.linalg.norm(a - b)) / denom


def _max_error(pairs: list[tuple[Tensor, Tensor]]) -> float:
    return max(relative_error(a, b) for a, b in pairs)


def check_conv(rng: np.random.Generator) -> tuple[float, dict]:
    n = int(rng.integers(1, 3))
    h, w = (int(v) for v in rng.integers(3, 7, size=2))
    cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
    kh, kw = int(rng.integers(1, min(h, 4) + 1)), int(rng.integers(1, min(w, 4) + 1))
    stride = (int(rng.integers(1, 3)), int(rng.integers(1, 3)))
    padding = "same" if rng.random() < 0.5 else "valid"

    x = rng.normal(size=(n, h, w, cin))
    kernel = rng.normal(size=(kh, kw, cin, cout))
    bias = rng.normal(size=cout)
    out, cache = F.conv2d_forward(x, kernel, bias, stride, padding)
    proj = rng.normal(size=out.shape)
    dx, dkernel, dbias = F.conv2d_backward(proj, cache)

    def loss() -> float:
        return float(np.sum(F.conv2d_forward(x, kernel, bias, stride, padding)[0] * proj))

    err = _max_error(
        [
            (dx, numeric_gradient(loss, x)),
            (dkernel, numeric_gradient(loss, kernel)),
            (dbias, numeric_gradient(loss, bias)),
        ]
    )
    config = {"x": [n, h, w, cin], "kernel": [kh, kw, cin, cout], "stride": list(stride), "padding": padding}
    return err, config


def check_batch_norm(rng: np.random.Generator) -> tuple[float, dict]:
    shape = (int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    channels = shape[3]
    x = rng.normal(size=shape) * rng.uniform(0.5, 3.0)
    gamma = rng.normal(size=channels)
    beta = rng.normal(size=channels)
    rm, rv = np.zeros(channels), np.ones(channels)

    result = F.batch_norm_forward(x, gamma, beta, rm, rv, train=True)
    proj = rng.normal(size=shape)
    dx, dgamma, dbeta = F.batch_norm_backward(proj, result.cache)

    def loss() -> float:
        return float(np.sum(F.batch_norm_forward(x, gamma, beta, rm, rv, train=True).output * proj))

    err = _max_error(
        [
            (dx, numeric_gradient(loss, x)),
            (dgamma, numeric_gradient(loss, gamma)),
            (dbeta, numeric_gradient(loss, beta)),
        ]
    )
    return err, {"x": list(shape)}


def check_avg_pool(rng: np.random.Generator) -> tuple[float, dict]:
    n, h, w, c = int(rng.integers(1, 3)), int(rng.integers(2, 8)), int(rng.integers(2, 8)), int(rng.integers(1, 3))
    pool = (int(rng.integers(1, h + 1)), int(rng.integers(1, w + 1)))
    x = rng.normal(size=(n, h, w, c))
    out = F.avg_pool_forward(x, pool)
    proj = rng.normal(size=out.shape)
    dx = F.avg_pool_backward(proj, x.shape, pool)

    def loss() -> float:
        return float(np.sum(F.avg_pool_forward(x, pool) * proj))

    return relative_error(dx, numeric_gradient(loss, x)), {"x": [n, h, w, c], "pool": list(pool)}


def check_dense(rng: np.random.Generator) -> tuple[float, dict]:
    n, d, u = int(rng.integers(1, 5)), int(rng.integers(1, 8)), int(rng.integers(1, 6))
    activation = "relu" if rng.random() < 0.5 else "none"
    layer = Dense("dense", d, u, activation, rng)
    layer.params["bias"] = rng.normal(size=u)
    x = rng.normal(size=(n, d))
    out = layer.forward(x, train=True)
    proj = rng.normal(size=out.shape)
    dx = layer.backward(proj)

    def loss() -> float:
        return float(np.sum(layer.forward(x, train=False) * proj))

    err = _max_error(
        [
            (dx, numeric_gradient(loss, x)),
            (layer.grads["weight"], numeric_gradient(loss, layer.params["weight"])),
            (layer.grads["bias"], numeric_gradient(loss, layer.params["bias"])),
        ]
    )
    return err, {"x": [n, d], "units": u, "activation": activation}


def check_softmax_cross_entropy(rng: np.random.Generator) -> tuple[float, dict]:
    n, k = int(rng.integers(1, 6)), int(rng.integers(2, 8))
    logits = rng.normal(size=(n, k)) * 3.0
    labels = rng.integers(0, k, size=n)
    dlogits = F.softmax_cross_entropy(logits, labels).dlogits

    def loss() -> float:
        return F.softmax_cross_entropy(logits, labels).loss

    return relative_error(dlogits, numeric_gradient(loss, logits)), {"logits": [n, k]}


def toy_network(rng: np.random.Generator, input_shape=(4, 6, 2), num_classes: int = 2) -> Network:
    """Small network touching every layer type: conv, batch norm, pool bank, dense, dropout."""
    filters = 2
    layers = [
        Conv2D("conv_1", (2, 1), (2, 1), input_shape[2], filters, "valid", rng),
        BatchNorm2D("bn_1", filters),
        ReLU("relu_1"),
        Conv2D("conv_2", (3, 3), (1, 1), filters, filters, "same", rng),
        BatchNorm2D("bn_2", filters),
        ReLU("relu_2"),
        PoolBank("pool", [(1, 2), (2, 3)]),
    ]
    features = layers[-1].output_shape((input_shape[0] // 2, input_shape[1], filters))[0]
    layers += [
        Dense("fc_1", features, 6, "relu", rng),
        Dropout("dropout_1", 0.5),
        Dense("logits", 6, num_classes, "none", rng),
    ]
    return Network(layers, input_shape, num_classes, dropout_rng=rng)


def check_network(
    net: Network, x: Tensor, labels: np.ndarray, h: float = STEP
) -> dict[str, float]:
    """Per-parameter relative error of ``net.backward`` with dropout disabled."""
    net.set_dropout(False)
    analytic = {name: grad.copy() for name, grad in net.backward(x, labels).gradients.items()}

    def loss() -> float:
        return F.softmax_cross_entropy(net.forward(x, train=True), labels).loss

    errors = {}
    for name, param in net.parameters().items():
        errors[name] = relative_error(analytic[name], numeric_gradient(loss, param, h))
    return errors


def _check_toy_network(rng: np.random.Generator) -> tuple[float, dict]:
    net = toy_network(rng)
    batch = int(rng.integers(2, 5))
    x = rng.normal(size=(batch, *net.input_shape))
    labels = rng.integers(0, net.num_classes, size=batch)
    errors = check_network(net, x, labels)
    worst = max(errors, key=errors.get)
    return errors[worst], {"batch": batch, "worst_parameter": worst}


CHECKS: dict[str, Callable[[np.random.Generator], tuple[float, dict]]] = {
    "conv2d": check_conv,
    "batch_norm": check_batch_norm,
    "avg_pool": check_avg_pool,
    "dense": check_dense,
    "softmax_cross_entropy": check_softmax_cross_entropy,
    "network": _check_toy_network,
}


def run_gradcheck(configs: int = 20, seed: int = 0, layers: list[str] | None = None) -> list[GradcheckResult]:
    selected = layers or list(CHECKS)
    unknown = [name for name in selected if name not in CHECKS]
    if unknown:
        raise UsageError(f"unknown layer checks: {unknown}")
    results = []
    for kind, name in enumerate(CHECKS):
        if name not in selected:
            continue
        for index in range(configs):
            rng = substream(seed, Role.GRADCHECK, kind, index)
            err, config = CHECKS[name](rng)
            results.append(GradcheckResult(layer=name, index=index, max_error=err, config=config))
        worst = max(r.max_error for r in results if r.layer == name)
        logger.info("gradcheck %s: %d configs, worst relative error %.3e", name, configs, worst)
    return results


def summarize(results: list[GradcheckResult]) -> list[dict]:
    rows = []
    for name in dict.fromkeys(r.layer for r in results):
        mine = [r for r in results if r.layer == name]
        rows.append(
            {
                "layer": name,
                "configs": len(mine),
                "max_error": max(r.max_error for r in mine),
                "passed": all(r.passed for r in mine),
            }
        )
    return rows
