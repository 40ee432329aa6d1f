"""MLP classifier parameters, SGD with momentum, weight averaging and checkpoints."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, DomainError, Tensor


@dataclass
class ModelParams:
    """Ordered (weight, bias) pairs; weights are shaped (out_dim, in_dim)."""

    input_dim: int
    hidden_dims: list[int]
    num_classes: int
    layers: list[tuple[np.ndarray, np.ndarray]]

    def __post_init__(self):
        if self.num_classes < 2:
            raise DomainError(f"need at least 2 classes, got {self.num_classes}")
        dims = [self.input_dim, *self.hidden_dims, self.num_classes]
        if len(self.layers) != len(dims) - 1:
            raise ContractError(f"expected {len(dims) - 1} layers, got {len(self.layers)}")
        for i, (w, b) in enumerate(self.layers):
            if w.shape != (dims[i + 1], dims[i]) or b.shape != (dims[i + 1],):
                raise ContractError(
                    f"layer {i} shaped {w.shape}+{b.shape}, expected {(dims[i + 1], dims[i])}+{(dims[i + 1],)}"
                )

    @property
    def dims(self) -> tuple[int, list[int], int]:
        return self.input_dim, list(self.hidden_dims), self.num_classes

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer]

    def with_arrays(self, arrays: list[np.ndarray]) -> "ModelParams":
        it = iter(arrays)
        layers = [(next(it), next(it)) for _ in self.layers]
        return ModelParams(self.input_dim, list(self.hidden_dims), self.num_classes, layers)

    def copy(self) -> "ModelParams":
        return self.with_arrays([a.copy() for a in self.arrays()])

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()

    def equals(self, other: "ModelParams") -> bool:
        return self.dims == other.dims and all(
            np.array_equal(a, b) for a, b in zip(self.arrays(), other.arrays())
        )


def init(input_dim: int, hidden_dims, num_classes: int, seed: int) -> ModelParams:
    """He-normal weights (std sqrt(2/fan_in)), zero biases."""
    if num_classes < 2:
        raise DomainError(f"need at least 2 classes, got {num_classes}")
    dims = [int(input_dim), *map(int, hidden_dims), int(num_classes)]
    if any(d < 1 for d in dims):
        raise DomainError(f"layer widths must be positive: {dims}")
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        layers.append((w, np.zeros(fan_out)))
    return ModelParams(dims[0], dims[1:-1], dims[-1], layers)


def forward(layers: list[tuple[Tensor, Tensor]], x: Tensor) -> Tensor:
    h = x
    for i, (w, b) in enumerate(layers):
        h = dc.add(dc.matmul(h, dc.transpose(w)), b)
        if i < len(layers) - 1:
            h = dc.relu(h)
    return h


def as_tensors(params: ModelParams, requires_grad: bool = False) -> list[tuple[Tensor, Tensor]]:
    return [(Tensor(w, requires_grad), Tensor(b, requires_grad)) for w, b in params.layers]


def logits(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Plain forward pass without recording."""
    h = np.asarray(x, dtype=np.float64)
    for i, (w, b) in enumerate(params.layers):
        h = h @ w.T.copy() + b
        if i < len(params.layers) - 1:
            h = np.where(h > 0, h, 0.0)
    return h


def predict(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return logits(params, x).argmax(axis=1)


def loss_and_grads(params: ModelParams, x: np.ndarray, y: np.ndarray) -> tuple[float, list[np.ndarray], np.ndarray]:
    """Mean cross-entropy, parameter gradients (flat array order), and logits."""
    with dc.Tape() as tape:
        layers = as_tensors(params, requires_grad=True)
        out = forward(layers, Tensor(x))
        loss = dc.mean(dc.softmax_cross_entropy(out, y))
        tape.backward(loss)
    grads = [t.grad for layer in layers for t in layer]
    return loss.item(), grads, out.values


def check_gradients(params: ModelParams, x: np.ndarray, y: np.ndarray, h: float = 1e-5, tol: float = 1e-4) -> dc.CheckReport:
    """Finite-difference check over every parameter and input coordinate."""
    names = [f"{kind}{i}" for i in range(len(params.layers)) for kind in ("w", "b")]
    arrays = dict(zip(names, params.arrays()))
    arrays["x"] = np.asarray(x, dtype=np.float64)

    def fn(t):
        layers = [(t[f"w{i}"], t[f"b{i}"]) for i in range(len(params.layers))]
        return dc.mean(dc.softmax_cross_entropy(forward(layers, t["x"]), y))

    return dc.finite_difference_check(fn, arrays, h=h, tol=tol)


# -- optimisation --------------------------------------------------------------


@dataclass
class SgdConfig:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_schedule: list[tuple[float, float]] = field(default_factory=lambda: [(0.5, 10.0), (0.75, 10.0)])

    def __post_init__(self):
        if self.learning_rate < 0:
            raise DomainError("learning_rate must be non-negative")
        if not 0 <= self.momentum < 1:
            raise DomainError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise DomainError("weight_decay must be non-negative")
        fracs = [f for f, _ in self.lr_schedule]
        if any(not 0 < f <= 1 for f in fracs) or any(a >= b for a, b in zip(fracs, fracs[1:])):
            raise DomainError(f"lr_schedule fractions must increase strictly within (0, 1]: {fracs}")

    def lr_at(self, epoch: int, total_epochs: int) -> float:
        lr = self.learning_rate
        for frac, divisor in self.lr_schedule:
            if epoch >= frac * total_epochs:
                lr /= divisor
        return lr


@dataclass
class SgdState:
    velocity: list[np.ndarray] | None = None


def sgd_step(params: ModelParams, grads: list[np.ndarray], state: SgdState, config: SgdConfig, lr: float | None = None) -> ModelParams:
    """One SGD update: v <- m*v + (g + wd*theta); theta <- theta - lr*v."""
    lr = config.learning_rate if lr is None else lr
    arrays = params.arrays()
    if len(grads) != len(arrays):
        raise ContractError(f"expected {len(arrays)} gradient buffers, got {len(grads)}")
    for i, (p, g) in enumerate(zip(arrays, grads)):
        if g.shape != p.shape:
            raise ContractError(f"gradient {i} shaped {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise dc.NonFiniteError(f"gradient buffer {i}")
    if state.velocity is None:
        state.velocity = [np.zeros_like(p) for p in arrays]
    new = []
    for i, (p, g) in enumerate(zip(arrays, grads)):
        d = g + config.weight_decay * p if config.weight_decay else g
        v = config.momentum * state.velocity[i] + d if config.momentum else d
        state.velocity[i] = v
        new.append(p - lr * v)
    return params.with_arrays(new)


def average_update(avg: ModelParams, current: ModelParams, decay: float) -> ModelParams:
    """Exponential moving average: decay*avg + (1-decay)*current."""
    if not 0 <= decay < 1:
        raise DomainError(f"decay must lie in [0, 1), got {decay}")
    if avg.dims != current.dims:
        raise ContractError(f"cannot average models with dims {avg.dims} and {current.dims}")
    return avg.with_arrays([decay * a + (1.0 - decay) * c for a, c in zip(avg.arrays(), current.arrays())])


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, params: ModelParams, seed: int, epoch: int, extra: dict | None = None) -> None:
    meta = {
        "input_dim": params.input_dim,
        "hidden_dims": list(params.hidden_dims),
        "num_classes": params.num_classes,
        "seed": int(seed),
        "epoch": int(epoch),
        "extra": extra or {},
    }
    buffers = {f"p{i}": a for i, a in enumerate(params.arrays())}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **buffers)


def load_checkpoint(path) -> tuple[ModelParams, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        n = len(meta["hidden_dims"]) + 1
        arrays = [data[f"p{i}"].copy() for i in range(2 * n)]
    it = iter(arrays)
    layers = [(next(it), next(it)) for _ in range(n)]
    params = ModelParams(meta["input_dim"], meta["hidden_dims"], meta["num_classes"], layers)
    return params, meta
