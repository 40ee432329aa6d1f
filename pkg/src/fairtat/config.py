"""Line-oriented experiment config: ``section.key = value``, ``#`` comments.

Every key has a typed default; the resolved mapping (defaults filled in) is
echoed into each report so runs can be reproduced from the report alone.
"""

from __future__ import annotations

from fractions import Fraction

from .attacks import AttackConfig
from .data import CORRUPTIONS
from .model import SgdConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, key: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if key is not None:
            where.append(f"field {key!r}")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.line = line
        self.key = key


def _number(text: str) -> float:
    text = text.strip()
    if "/" in text:
        return float(Fraction(text))
    return float(text)


def _int(text: str) -> int:
    v = _number(text)
    if v != int(v):
        raise ValueError(f"{text!r} is not an integer")
    return int(v)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


def _list(conv):
    def parse(text: str):
        items = [t for t in (s.strip() for s in text.split(",")) if t]
        return [conv(t) for t in items]
    return parse


def _schedule(text: str):
    out = []
    for item in _list(str)(text):
        frac, div = item.split(":")
        out.append([_number(frac), _number(div)])
    return out


def _str(text: str) -> str:
    return text.strip()


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "run.seeds": (_list(_int), [0]),
    "run.mode": (_str, "fair_tat"),
    "dataset.kind": (_str, "three_class"),
    "dataset.n_per_class": (_int, 200),
    "dataset.test_n_per_class": (_int, 200),
    "dataset.separation_hard": (_number, 1.5),
    "dataset.separation_easy": (_number, 4.5),
    "dataset.noise_std": (_number, 1.0),
    "dataset.num_classes": (_int, 10),
    "dataset.dim": (_int, 32),
    "dataset.center_spread": (_number, 1.0),
    "dataset.path": (_str, ""),
    "dataset.subset_per_class": (_int, 200),
    "dataset.test_subset_per_class": (_int, 100),
    "dataset.seed": (_int, -1),
    "dataset.test_seed_offset": (_int, 1000),
    "train.epochs": (_int, 10),
    "train.batch_size": (_int, 64),
    "train.hidden_dims": (_list(_int), [64]),
    "train.lr": (_number, 0.1),
    "train.momentum": (_number, 0.9),
    "train.weight_decay": (_number, 5e-4),
    "train.lr_schedule": (_schedule, [[0.5, 10.0], [0.75, 10.0]]),
    "train.lambda1": (_number, 0.5),
    "train.calibrate_epsilon": (_bool, True),
    "train.prior_kind": (_str, "cfps"),
    "train.prior_refresh": (_str, "epoch"),
    "train.sampler_method": (_str, "renormalize"),
    "train.cfps_source": (_str, "clean"),
    "train.eps_key": (_str, "label"),
    "train.loss": (_str, "cross_entropy"),
    "train.trades_beta": (_number, 2.0),
    "train.averaging": (_str, "none"),
    "train.ema_decay": (_number, 0.999),
    "train.avg_start_epoch": (_int, -1),
    "train.fairness_threshold": (_number, 0.2),
    "train.valid_fraction": (_number, 0.02),
    "attack.epsilon": (_number, 8 / 255),
    "attack.step_size": (_number, 2 / 255),
    "attack.num_steps": (_int, 10),
    "attack.random_start": (_bool, True),
    "attack.eq4_literal": (_bool, False),
    "eval.epsilons": (_list(_number), [8 / 255]),
    "eval.num_steps": (_int, 10),
    "eval.step_ratio": (_number, 0.25),
    "eval.fgsm": (_bool, True),
    "eval.corruptions": (_list(_str), []),
    "eval.severities": (_list(_int), [1, 2, 3, 4, 5]),
    "eval.corruption_seed": (_int, 0),
    "output.dir": (_str, "fairtat_out"),
    "output.figures": (_bool, True),
}


def parse_text(text: str) -> dict:
    """Parse config text into a resolved mapping; raises ConfigError with line info."""
    values = {k: v for k, (_, v) in SCHEMA.items()}
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError("expected 'section.key = value'", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError("unknown key", lineno, key)
        if key in seen:
            raise ConfigError("duplicate key", lineno, key)
        seen.add(key)
        try:
            values[key] = SCHEMA[key][0](value)
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad value {value!r}: {exc}", lineno, key) from None
    validate(values)
    return values


def apply_overrides(values: dict, overrides: dict) -> dict:
    out = dict(values)
    for key, value in overrides.items():
        if value is None:
            continue
        if key not in SCHEMA:
            raise ConfigError("unknown key", key=key)
        out[key] = SCHEMA[key][0](value) if isinstance(value, str) else value
    validate(out)
    return out


def validate(values: dict) -> None:
    if not values["run.seeds"]:
        raise ConfigError("at least one seed is required", key="run.seeds")
    if not values["eval.epsilons"]:
        raise ConfigError("evaluation epsilons must be listed explicitly", key="eval.epsilons")
    if values["dataset.kind"] not in ("three_class", "blobs", "cifar10", "cifar_like"):
        raise ConfigError(f"unknown dataset kind {values['dataset.kind']!r}", key="dataset.kind")
    if values["dataset.kind"] == "cifar10" and not values["dataset.path"]:
        raise ConfigError("cifar10 needs dataset.path", key="dataset.path")
    for kind in values["eval.corruptions"]:
        if kind not in CORRUPTIONS:
            raise ConfigError(f"unsupported corruption {kind!r}", key="eval.corruptions")
    for s in values["eval.severities"]:
        if not 1 <= s <= 5:
            raise ConfigError(f"severity {s} outside 1..5", key="eval.severities")
    try:
        train_config(values, values["run.seeds"][0])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def train_config(values: dict, seed: int) -> TrainConfig:
    attack = AttackConfig(
        epsilon=values["attack.epsilon"],
        step_size=values["attack.step_size"],
        num_steps=values["attack.num_steps"],
        random_start=values["attack.random_start"],
        eq4_literal=values["attack.eq4_literal"],
    )
    sgd = SgdConfig(values["train.lr"], values["train.momentum"], values["train.weight_decay"],
                    [tuple(x) for x in values["train.lr_schedule"]])
    start = values["train.avg_start_epoch"]
    return TrainConfig(
        epochs=values["train.epochs"],
        batch_size=values["train.batch_size"],
        hidden_dims=tuple(values["train.hidden_dims"]),
        sgd=sgd,
        attack=attack,
        lambda1=values["train.lambda1"],
        calibrate_epsilon=values["train.calibrate_epsilon"],
        mode=values["run.mode"],
        prior_kind=values["train.prior_kind"],
        prior_refresh=values["train.prior_refresh"],
        sampler_method=values["train.sampler_method"],
        cfps_source=values["train.cfps_source"],
        eps_key=values["train.eps_key"],
        loss_kind=values["train.loss"],
        trades_beta=values["train.trades_beta"],
        averaging=values["train.averaging"],
        ema_decay=values["train.ema_decay"],
        avg_start_epoch=None if start < 0 else start,
        fairness_threshold=values["train.fairness_threshold"],
        valid_fraction=values["train.valid_fraction"],
        seed=seed,
    )


def eval_attacks(values: dict) -> list[tuple[str, AttackConfig]]:
    """Evaluation attacks at the uniform base margins listed in eval.epsilons."""
    out = []
    for eps in values["eval.epsilons"]:
        step = eps * values["eval.step_ratio"] if eps > 0 else 1e-12
        out.append((f"pgd@{eps:.6g}", AttackConfig(epsilon=eps, step_size=step, num_steps=values["eval.num_steps"],
                                                  random_start=False)))
        if values["eval.fgsm"]:
            out.append((f"fgsm@{eps:.6g}", AttackConfig.fgsm(eps)))
    return out


def render(values: dict) -> str:
    """Resolved config as text that parses back to the same mapping."""
    lines = []
    for key in SCHEMA:
        v = values[key]
        if isinstance(v, list):
            if v and isinstance(v[0], list):
                text = ", ".join(f"{a!r}:{b!r}" for a, b in v)
            else:
                text = ", ".join(repr(x) if not isinstance(x, str) else x for x in v)
        elif isinstance(v, bool):
            text = "true" if v else "false"
        else:
            text = repr(v) if not isinstance(v, str) else v
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
