"""Target-class priors and ground-truth-excluding target sampling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SamplerError(ValueError):
    pass


CFPS_PRIOR = "cfps"
UNIFORM = "uniform"


@dataclass(frozen=True)
class TargetDistribution:
    probs: np.ndarray
    kind: str
    source_stats: np.ndarray | None = None

    @property
    def num_classes(self) -> int:
        return int(self.probs.size)


def build_prior(cfps_vector, kind: str = CFPS_PRIOR) -> TargetDistribution:
    """Normalise false-positive scores into sampling weights (uniform if all zero)."""
    v = np.asarray(cfps_vector, dtype=np.float64).ravel()
    if v.size < 2:
        raise SamplerError("a target prior needs at least two classes")
    if np.any(v < 0) or not np.all(np.isfinite(v)):
        raise SamplerError(f"prior weights must be finite and non-negative: {v}")
    k = v.size
    if kind == UNIFORM or v.sum() == 0:
        probs = np.full(k, 1.0 / k)
    elif kind == CFPS_PRIOR:
        probs = v / v.sum()
    else:
        raise SamplerError(f"unknown prior kind {kind!r}")
    return TargetDistribution(probs, kind, v.copy())


def uniform_prior(num_classes: int) -> TargetDistribution:
    return build_prior(np.ones(num_classes), UNIFORM)


def _validate(labels, dist: TargetDistribution) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    k = dist.num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise SamplerError(f"labels must lie in [0, {k})")
    rest = 1.0 - dist.probs[labels]
    others = dist.probs.sum() - dist.probs[labels]
    bad = np.flatnonzero((others <= 0) | (rest <= 0))
    if bad.size:
        raise SamplerError(f"class {int(labels[bad[0]])} carries all prior mass; no valid target exists")
    return labels


def sample_targets(labels, dist: TargetDistribution, rng: np.random.Generator) -> np.ndarray:
    """Draw y_t[i] from the prior with index labels[i] zeroed and renormalised."""
    labels = _validate(labels, dist)
    n, k = labels.size, dist.num_classes
    weights = np.broadcast_to(dist.probs, (n, k)).copy()
    weights[np.arange(n), labels] = 0.0
    cum = np.cumsum(weights, axis=1)
    u = rng.random(n) * cum[:, -1]
    # index = #{j : cum_j <= u}; zero-weight columns can never be selected
    return (cum <= u[:, None]).sum(axis=1).astype(np.int64)


def sample_targets_rejection(labels, dist: TargetDistribution, rng: np.random.Generator) -> np.ndarray:
    """Draw from the full prior, redrawing every collision with the label."""
    labels = _validate(labels, dist)
    targets = rng.choice(dist.num_classes, size=labels.size, p=dist.probs)
    clash = np.flatnonzero(targets == labels)
    while clash.size:
        targets[clash] = rng.choice(dist.num_classes, size=clash.size, p=dist.probs)
        clash = clash[targets[clash] == labels[clash]]
    return targets
