"""L-infinity FGSM and PGD attacks (untargeted and targeted) on MLP classifiers.

Targeted PGD *descends* on the cross-entropy of the target label, i.e. it
searches for ``argmin_{|delta| <= eps} CE(f(x + delta), y_target)``. Passing
``eq4_literal=True`` flips the step to ascent for comparison runs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .model import ModelParams, as_tensors, forward


class AttackError(RuntimeError):
    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(f"{message} (batch {batch_index})" if batch_index is not None else message)
        self.batch_index = batch_index


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 8 / 255
    step_size: float = 2 / 255
    num_steps: int = 10
    random_start: bool = True
    clamp_range: tuple[float, float] = (0.0, 1.0)
    eq4_literal: bool = False

    def __post_init__(self):
        lo, hi = self.clamp_range
        if hi <= lo:
            raise ValueError(f"clamp_range must satisfy lo < hi, got {self.clamp_range}")
        if self.epsilon < 0 or self.epsilon > hi - lo:
            raise ValueError(f"epsilon must lie in [0, {hi - lo}], got {self.epsilon}")
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.num_steps < 1:
            raise ValueError("num_steps must be at least 1")

    @classmethod
    def fgsm(cls, epsilon: float, clamp_range=(0.0, 1.0)) -> "AttackConfig":
        return cls(epsilon=epsilon, step_size=max(epsilon, 1e-12), num_steps=1, random_start=False, clamp_range=clamp_range)

    def describe(self) -> str:
        return f"PGD-{self.num_steps}(eps={self.epsilon:.6g}, step={self.step_size:.6g}, random_start={self.random_start})"


@dataclass
class AdvBatch:
    x: np.ndarray
    x_adv: np.ndarray
    labels: np.ndarray
    targets: np.ndarray | None = None


def project_linf(candidate, center, epsilon, clamp_range=(0.0, 1.0)) -> np.ndarray:
    """clamp(center + clip(candidate - center, -eps, eps), lo, hi).

    ``epsilon`` is a scalar or a per-sample vector broadcast over rows.
    """
    candidate = np.asarray(candidate, dtype=np.float64)
    center = np.asarray(center, dtype=np.float64)
    if candidate.shape != center.shape:
        raise ValueError(f"candidate {candidate.shape} and center {center.shape} differ")
    eps = np.broadcast_to(_eps_column(epsilon, center), center.shape)
    lo, hi = clamp_range
    out = np.clip(center + np.clip(candidate - center, -eps, eps), lo, hi)
    # center + delta can land one ulp outside the ball; step back toward the center
    over = np.abs(out - center) > eps
    while over.any():
        out[over] = np.nextafter(out[over], center[over])
        over = np.abs(out - center) > eps
    # feasible candidates pass through untouched, which makes the map idempotent
    inside = (np.abs(candidate - center) <= eps) & (candidate >= lo) & (candidate <= hi)
    return np.where(inside, candidate, out)


def _eps_column(epsilon, x: np.ndarray):
    eps = np.asarray(epsilon, dtype=np.float64)
    if eps.ndim == 0:
        return eps
    if x.ndim < 2 or eps.shape != (x.shape[0],):
        raise ValueError(f"per-sample epsilon shaped {eps.shape} does not match batch {x.shape}")
    return eps.reshape(-1, *([1] * (x.ndim - 1)))


def input_gradient(params: ModelParams, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Gradient of the batch-mean cross-entropy with respect to the inputs."""
    with dc.Tape() as tape:
        xt = dc.Tensor(x, requires_grad=True)
        loss = dc.mean(dc.softmax_cross_entropy(forward(as_tensors(params), xt), labels))
        tape.backward(loss)
    return xt.grad


def _safe_gradient(params, x, labels, batch_index):
    try:
        g = input_gradient(params, x, labels)
    except dc.NonFiniteError as exc:
        raise AttackError(str(exc), batch_index) from exc
    return g


def _check_inputs(x, config: AttackConfig):
    x = np.asarray(x, dtype=np.float64)
    lo, hi = config.clamp_range
    if x.size and (x.min() < lo or x.max() > hi):
        raise ValueError(f"inputs must lie within clamp_range {config.clamp_range}")
    return x


def fgsm(params: ModelParams, x, y, config: AttackConfig, epsilon=None, batch_index: int | None = None) -> AdvBatch:
    """Single signed-gradient ascent step of size eps (no random start)."""
    x = _check_inputs(x, config)
    y = np.asarray(y)
    eps = config.epsilon if epsilon is None else epsilon
    g = _safe_gradient(params, x, y, batch_index)
    x_adv = project_linf(x + _eps_column(eps, x) * np.sign(g), x, eps, config.clamp_range)
    return AdvBatch(x, x_adv, y)


def _pgd(params, x, labels, config, sign, epsilon, rng, batch_index):
    eps = config.epsilon if epsilon is None else epsilon
    if config.random_start:
        if rng is None:
            raise ValueError("random_start requires an rng")
        eps_col = _eps_column(eps, x)
        x_t = project_linf(x + rng.uniform(-1.0, 1.0, size=x.shape) * eps_col, x, eps, config.clamp_range)
    else:
        x_t = x.copy()
    for _ in range(config.num_steps):
        g = _safe_gradient(params, x_t, labels, batch_index)
        x_t = project_linf(x_t + sign * config.step_size * np.sign(g), x, eps, config.clamp_range)
    return x_t


def pgd_untargeted(params: ModelParams, x, y, config: AttackConfig, rng: np.random.Generator | None = None,
                   epsilon=None, batch_index: int | None = None) -> AdvBatch:
    """Iterated signed-gradient ascent on CE(f(x'), y), projected after every step."""
    x = _check_inputs(x, config)
    y = np.asarray(y)
    return AdvBatch(x, _pgd(params, x, y, config, 1.0, epsilon, rng, batch_index), y)


def pgd_targeted(params: ModelParams, x, y_target, config: AttackConfig, rng: np.random.Generator | None = None,
                 epsilon=None, labels=None, batch_index: int | None = None) -> AdvBatch:
    """Iterated signed-gradient descent on CE(f(x'), y_target)."""
    x = _check_inputs(x, config)
    y_target = np.asarray(y_target)
    sign = 1.0 if config.eq4_literal else -1.0
    x_adv = _pgd(params, x, y_target, config, sign, epsilon, rng, batch_index)
    return AdvBatch(x, x_adv, np.asarray(labels) if labels is not None else y_target, y_target)
