"""FAIR-TAT training loop and the untargeted adversarial-training baseline.

Per minibatch: draw target classes from the false-positive-score prior
(ground-truth excluded), run targeted PGD with a per-class margin keyed by the
sample's true class, and take an SGD step on the loss at the perturbed inputs.
At each epoch end the per-class robust training accuracy r_k, false-positive
scores and margins eps_k = (lambda1 + r_k) * eps are refreshed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import diffcore as dc
from . import metrics as mt
from . import model as md
from . import sampler as sp
from .attacks import AttackConfig, AttackError, pgd_targeted, pgd_untargeted
from .data import Dataset, DataError

FAIR_TAT = "fair_tat"
UNTARGETED_AT = "untargeted_at"

# spawn keys for independent random streams
_SPLIT, _SHUFFLE, _TARGETS, _ATTACK, _GATE = 1, 2, 3, 4, 5


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, keys...); streams never share draws."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in keys)))


class TrainingError(RuntimeError):
    def __init__(self, message: str, record: dict | None = None):
        super().__init__(message)
        self.record = record


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 128
    hidden_dims: tuple[int, ...] = (64,)
    sgd: md.SgdConfig = field(default_factory=md.SgdConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    lambda1: float = 0.5
    calibrate_epsilon: bool = True
    mode: str = FAIR_TAT
    prior_kind: str = sp.CFPS_PRIOR
    prior_refresh: str = "epoch"
    sampler_method: str = "renormalize"
    cfps_source: str = "clean"
    eps_key: str = "label"
    loss_kind: str = "cross_entropy"
    trades_beta: float = 2.0
    averaging: str = "none"
    ema_decay: float = 0.999
    avg_start_epoch: int | None = None
    fairness_threshold: float = 0.2
    valid_fraction: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.lambda1 <= 0:
            raise ValueError("lambda1 must be positive")
        if not 0 <= self.fairness_threshold <= 1:
            raise ValueError("fairness_threshold must lie in [0, 1]")
        if not 0 < self.valid_fraction < 0.5:
            raise ValueError("valid_fraction must lie in (0, 0.5)")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")
        choices = {
            "mode": (FAIR_TAT, UNTARGETED_AT),
            "prior_kind": (sp.CFPS_PRIOR, sp.UNIFORM),
            "prior_refresh": ("epoch", "batch"),
            "sampler_method": ("renormalize", "rejection"),
            "cfps_source": ("adversarial", "clean"),
            "eps_key": ("label", "target"),
            "loss_kind": ("cross_entropy", "trades"),
            "averaging": ("none", "ema", "fawa"),
        }
        for name, allowed in choices.items():
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")

    @property
    def start_epoch(self) -> int:
        return self.epochs // 2 if self.avg_start_epoch is None else self.avg_start_epoch


@dataclass
class ClassStats:
    robust_acc: np.ndarray
    cfps: np.ndarray | None
    eps_k: np.ndarray

    @classmethod
    def cold(cls, num_classes: int, epsilon: float) -> "ClassStats":
        return cls(np.full(num_classes, math.nan), None, np.full(num_classes, float(epsilon)))


# -- small pure pieces ---------------------------------------------------------------


def split(ds: Dataset, valid_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split; each class sends ceil(fraction * n_k) samples to validation."""
    rng = stream(seed, _SPLIT)
    train_idx, valid_idx = [], []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size < 2:
            raise DataError(f"class {c} has {idx.size} samples; at least 2 are needed to split")
        n_valid = min(math.ceil(valid_fraction * idx.size - 1e-9), idx.size - 1)
        perm = rng.permutation(idx)
        valid_idx.append(perm[:n_valid])
        train_idx.append(perm[n_valid:])
    return (ds.subset(np.sort(np.concatenate(train_idx)), "train"),
            ds.subset(np.sort(np.concatenate(valid_idx)), "valid"))


def update_epsilons(robust_acc, epsilon: float, lambda1: float) -> np.ndarray:
    """eps_k = (lambda1 + r_k) * eps."""
    r = np.asarray(robust_acc, dtype=np.float64)
    return (lambda1 + r) * epsilon


def fawa_gate(per_class_robust, overall_robust: float, threshold: float) -> bool:
    """Accept when worst-class robust accuracy >= threshold * overall.

    A zero threshold accepts everything; otherwise a worst class at zero is
    always rejected.
    """
    if threshold == 0:
        return True
    worst = float(np.nanmin(np.asarray(per_class_robust, dtype=np.float64)))
    return worst > 0 and worst >= threshold * overall_robust


def evaluate_gate(params: md.ModelParams, valid: Dataset, attack: AttackConfig, threshold: float,
                  rng: np.random.Generator) -> dict:
    def atk(p, xb, yb, b):
        return pgd_untargeted(p, xb, yb, attack, rng=rng, batch_index=b).x_adv

    overall, log = mt.robust_accuracy(params, atk, valid.features, valid.labels, valid.num_classes)
    per_class = mt.class_recall_vector(log)
    return {
        "accepted": fawa_gate(per_class, overall, threshold),
        "worst": float(np.nanmin(per_class)),
        "overall": overall,
    }


class WeightAverager:
    """EMA of parameters, optionally gated per epoch on validation fairness (FAWA).

    Folding happens after every SGD step from ``start_epoch`` on. For FAWA the
    gate is evaluated on the checkpoint at the start of each epoch and decides
    whether that epoch's steps are folded in.
    """

    def __init__(self, kind: str, decay: float, start_epoch: int, threshold: float = 0.0):
        self.kind = kind
        self.decay = decay
        self.start_epoch = start_epoch
        self.threshold = threshold
        self.avg: md.ModelParams | None = None
        self.gate_open = kind == "ema"
        self.folds = 0

    def begin_epoch(self, epoch: int, params, valid: Dataset | None, attack: AttackConfig, seed: int) -> dict | None:
        if self.kind != "fawa" or epoch < self.start_epoch:
            return None
        if self.threshold == 0:
            self.gate_open = True
            return {"accepted": True, "worst": None, "overall": None}
        event = evaluate_gate(params, valid, attack, self.threshold, stream(seed, _GATE, epoch))
        self.gate_open = event["accepted"]
        return event

    def fold(self, epoch: int, params: md.ModelParams) -> None:
        if self.kind == "none" or epoch < self.start_epoch or not self.gate_open:
            return
        self.avg = params.copy() if self.avg is None else md.average_update(self.avg, params, self.decay)
        self.folds += 1

    def result(self, final: md.ModelParams) -> md.ModelParams:
        return final.copy() if self.avg is None else self.avg


def fold_checkpoint_stream(stream_items, decay: float, threshold: float):
    """Gate-and-fold a scripted stream of (params, per_class_robust, overall).

    Returns (average or None, list of decisions).
    """
    avg, decisions = None, []
    for params, per_class, overall in stream_items:
        ok = fawa_gate(per_class, overall, threshold)
        decisions.append(ok)
        if ok:
            avg = params.copy() if avg is None else md.average_update(avg, params, decay)
    return avg, decisions


# -- training --------------------------------------------------------------------------


def _batch_loss_and_grads(params, x_adv, x, y, config: TrainConfig):
    with dc.Tape() as tape:
        layers = md.as_tensors(params, requires_grad=True)
        adv_logits = md.forward(layers, dc.Tensor(x_adv))
        if config.loss_kind == "trades":
            clean_logits = md.forward(layers, dc.Tensor(x))
            loss = dc.add(
                dc.mean(dc.softmax_cross_entropy(clean_logits, y)),
                dc.scale(dc.mean(dc.kl_divergence(adv_logits, clean_logits)), config.trades_beta),
            )
        else:
            loss = dc.mean(dc.softmax_cross_entropy(adv_logits, y))
        tape.backward(loss)
    return loss.item(), [t.grad for layer in layers for t in layer], adv_logits.values


def _draw_targets(y, prior, config, rng):
    """Prior draw; samples whose own class holds all prior mass fall back to uniform."""
    draw = sp.sample_targets_rejection if config.sampler_method == "rejection" else sp.sample_targets
    stuck = prior.probs.sum() - prior.probs[y] <= 0
    if not stuck.any():
        return draw(y, prior, rng), 0
    targets = np.empty_like(y)
    targets[~stuck] = draw(y[~stuck], prior, rng)
    targets[stuck] = draw(y[stuck], sp.uniform_prior(prior.num_classes), rng)
    return targets, int(stuck.sum())


def _adversarial_batch(params, x, y, prior, stats, config, target_fn, t_rng, atk_rng, b):
    """Perturbed inputs for one minibatch; returns (x_adv, targets or None, fallback count)."""
    eps = config.attack.epsilon
    if config.mode != FAIR_TAT:
        sample_eps = stats.eps_k[y] if config.calibrate_epsilon else eps
        return pgd_untargeted(params, x, y, config.attack, rng=atk_rng, epsilon=sample_eps, batch_index=b).x_adv, None, 0
    n_fallback = 0
    if target_fn is not None:
        y_t = target_fn(y, prior, t_rng)
    else:
        y_t, n_fallback = _draw_targets(y, prior, config, t_rng)
    key = y if config.eps_key == "label" else y_t
    sample_eps = stats.eps_k[key] if config.calibrate_epsilon else eps
    x_adv = pgd_targeted(params, x, y_t, config.attack, rng=atk_rng, epsilon=sample_eps, labels=y, batch_index=b).x_adv
    return x_adv, y_t, n_fallback


def epoch_prior(stats: ClassStats, config: TrainConfig, num_classes: int) -> sp.TargetDistribution:
    if config.prior_kind == sp.UNIFORM or stats.cfps is None:
        return sp.uniform_prior(num_classes)
    return sp.build_prior(stats.cfps, sp.CFPS_PRIOR)


def train_epoch(params: md.ModelParams, sgd_state: md.SgdState, train: Dataset, stats: ClassStats,
                config: TrainConfig, epoch: int, averager: WeightAverager | None = None,
                target_fn: Callable | None = None) -> tuple[md.ModelParams, ClassStats, dict]:
    """One pass over ``train``; returns new params, refreshed stats and the epoch record.

    ``target_fn(y, prior, rng)`` replaces the prior-based target draw (ablations).
    """
    k = train.num_classes
    eps = config.attack.epsilon
    lr = config.sgd.lr_at(epoch, config.epochs)
    prior = epoch_prior(stats, config, k)
    prior_used = prior.probs.tolist()
    perm = stream(config.seed, _SHUFFLE, epoch).permutation(len(train))
    preds_adv, preds_clean, labels_seen, losses = [], [], [], []
    fallbacks = 0

    for b, start in enumerate(range(0, len(train), config.batch_size)):
        idx = perm[start:start + config.batch_size]
        x, y = train.features[idx], train.labels[idx]
        atk_rng = stream(config.seed, _ATTACK, epoch, b)
        try:
            x_adv, y_t, n_fallback = _adversarial_batch(params, x, y, prior, stats, config, target_fn,
                                                        stream(config.seed, _TARGETS, epoch, b), atk_rng, b)
        except AttackError as exc:
            raise TrainingError(f"attack failed in epoch {epoch}, batch {b}: {exc}",
                                {"epoch": epoch, "batch": b, "error": str(exc)}) from exc
        fallbacks += n_fallback
        if config.cfps_source == "clean":
            preds_clean.append(md.predict(params, x))
        try:
            loss, grads, adv_logits = _batch_loss_and_grads(params, x_adv, x, y, config)
        except dc.NonFiniteError as exc:
            raise TrainingError(f"non-finite loss in epoch {epoch}, batch {b}: {exc}",
                                {"epoch": epoch, "batch": b, "error": str(exc)}) from exc
        preds_adv.append(adv_logits.argmax(axis=1))
        labels_seen.append(y)
        losses.append(loss)
        params = md.sgd_step(params, grads, sgd_state, config.sgd, lr=lr)
        if averager is not None:
            averager.fold(epoch, params)
        if config.prior_refresh == "batch" and config.prior_kind == sp.CFPS_PRIOR:
            src = preds_clean if config.cfps_source == "clean" else preds_adv
            running = mt.PredLog(np.concatenate(src), np.concatenate(labels_seen), k)
            prior = sp.build_prior(mt.cfps_vector(running), sp.CFPS_PRIOR)

    labels_all = np.concatenate(labels_seen) if labels_seen else np.zeros(0, np.int64)
    adv_log = mt.PredLog(np.concatenate(preds_adv) if preds_adv else labels_all, labels_all, k)
    cfps_log = mt.PredLog(np.concatenate(preds_clean), labels_all, k) if config.cfps_source == "clean" else adv_log
    r_k = np.nan_to_num(mt.class_recall_vector(adv_log), nan=0.0)
    new_stats = ClassStats(r_k, mt.cfps_vector(cfps_log), update_epsilons(r_k, eps, config.lambda1))

    clean_log = mt.PredLog(md.predict(params, train.features), train.labels, k)
    clean_recall = mt.class_recall_vector(clean_log)
    record = {
        "epoch": epoch,
        "lr": lr,
        "loss_mean": float(np.mean(losses)) if losses else math.nan,
        "clean_acc": mt.clean_accuracy(clean_log),
        "clean_recall": clean_recall.tolist(),
        "robust_acc": mt.clean_accuracy(adv_log),
        "robust_recall": r_k.tolist(),
        "worst_robust_recall": float(r_k.min()),
        "cfps": new_stats.cfps.tolist(),
        "eps_used": stats.eps_k.tolist(),
        "eps_k": new_stats.eps_k.tolist(),
        "prior": prior_used,
        "prior_kind": prior.kind,
        "uniform_target_fallbacks": fallbacks,
    }
    return params, new_stats, record


@dataclass
class TrainResult:
    final: md.ModelParams
    averaged: md.ModelParams
    history: list[dict]
    train: Dataset
    valid: Dataset
    config: TrainConfig

    def history_json(self) -> list[dict]:
        return self.history


def format_progress(rec: dict) -> str:
    return (f"epoch {rec['epoch']:3d}  clean {rec['clean_acc']:.4f}  robust {rec['robust_acc']:.4f}  "
            f"worst-robust {rec['worst_robust_recall']:.4f}  eps_k [{min(rec['eps_k']):.5f}, {max(rec['eps_k']):.5f}]")


def fair_tat_train(config: TrainConfig, dataset: Dataset, progress: Callable[[str], None] | None = None,
                   target_fn: Callable | None = None) -> TrainResult:
    """Split, initialise, then run ``config.epochs`` epochs with optional weight averaging."""
    train, valid = split(dataset, config.valid_fraction, config.seed)
    params = md.init(dataset.dim, config.hidden_dims, dataset.num_classes, config.seed)
    state = md.SgdState()
    stats = ClassStats.cold(dataset.num_classes, config.attack.epsilon)
    averager = WeightAverager(config.averaging, config.ema_decay, config.start_epoch, config.fairness_threshold)
    gate_attack = AttackConfig(**{**asdict(config.attack), "random_start": False})
    history = []
    for epoch in range(config.epochs):
        event = averager.begin_epoch(epoch, params, valid, gate_attack, config.seed)
        params, stats, record = train_epoch(params, state, train, stats, config, epoch, averager, target_fn)
        record["averaging"] = {"kind": config.averaging, "active": averager.kind != "none" and epoch >= averager.start_epoch,
                               "gate": event, "folds": averager.folds}
        history.append(record)
        if progress is not None:
            progress(format_progress(record))
    return TrainResult(params, averager.result(params), history, train, valid, config)
