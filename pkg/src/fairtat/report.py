"""Experiment execution, evaluation tables, report files and report verification."""

from __future__ import annotations

import csv
import io
import json
import math
import time
from pathlib import Path
from typing import Callable

import numpy as np

from . import config as cf
from . import data as dt
from . import metrics as mt
from . import model as md
from .attacks import AttackConfig, fgsm, pgd_untargeted
from .trainer import fair_tat_train

REPORT_VERSION = 1


def build_datasets(values: dict, seed: int) -> tuple[dt.Dataset, dt.Dataset]:
    """Training and held-out evaluation sets for one run seed."""
    data_seed = seed if values["dataset.seed"] < 0 else values["dataset.seed"]
    test_seed = data_seed + values["dataset.test_seed_offset"]
    kind = values["dataset.kind"]
    if kind == "three_class":
        args = (values["dataset.separation_hard"], values["dataset.separation_easy"], values["dataset.noise_std"])
        return (dt.make_three_class(values["dataset.n_per_class"], *args, seed=data_seed),
                dt.make_three_class(values["dataset.test_n_per_class"], *args, seed=test_seed))
    if kind == "blobs":
        args = (values["dataset.num_classes"],)
        kw = dict(dim=values["dataset.dim"], center_spread=values["dataset.center_spread"],
                  noise_std=values["dataset.noise_std"], center_seed=data_seed)
        return (dt.make_blobs(*args, values["dataset.n_per_class"], seed=data_seed, **kw),
                dt.make_blobs(*args, values["dataset.test_n_per_class"], seed=test_seed, **kw))
    if kind == "cifar_like":
        return (dt.make_cifar_like(values["dataset.subset_per_class"], seed=data_seed),
                dt.make_cifar_like(values["dataset.test_subset_per_class"], seed=test_seed))
    path = values["dataset.path"]
    train = dt.load_cifar10(path, values["dataset.subset_per_class"], "train", seed=data_seed)
    test = dt.load_cifar10(path, values["dataset.test_subset_per_class"], "test", seed=data_seed)
    return train, test


def _finite(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def _vec(a) -> list:
    return [_finite(float(x)) for x in np.asarray(a, dtype=np.float64)]


def condition_block(name: str, log: mt.PredLog, attack: AttackConfig | None = None) -> dict:
    recall = mt.class_recall_vector(log)
    cacc = mt.class_accuracy_vector(log)
    block = {
        "condition": name,
        "overall": mt.clean_accuracy(log),
        "recall": _vec(recall),
        "c_acc": _vec(cacc),
        "worst_recall": mt.worst_class_summary(recall).as_dict(),
        "worst_c_acc": mt.worst_class_summary(cacc).as_dict(),
        "cfps": _vec(mt.cfps_vector(log)),
    }
    if attack is not None:
        block["attack"] = attack.describe()
    return block


def _attack_fn(name: str, cfg: AttackConfig) -> Callable:
    if name.startswith("fgsm"):
        return lambda p, x, y, b: fgsm(p, x, y, cfg, batch_index=b).x_adv
    return lambda p, x, y, b: pgd_untargeted(p, x, y, cfg, batch_index=b).x_adv


def evaluate_model(params: md.ModelParams, test: dt.Dataset, values: dict) -> tuple[dict, dict[str, mt.PredLog]]:
    """Clean, attacked and corrupted evaluation of one model; returns (tables, logs)."""
    logs = {"clean": mt.PredLog(md.predict(params, test.features), test.labels, test.num_classes)}
    out = {"clean": condition_block("clean", logs["clean"]), "attacks": [], "corruptions": []}
    for name, cfg in cf.eval_attacks(values):
        _, log = mt.robust_accuracy(params, _attack_fn(name, cfg), test.features, test.labels, test.num_classes)
        logs[name] = log
        out["attacks"].append(condition_block(name, log, cfg))
    for kind in values["eval.corruptions"]:
        for sev in values["eval.severities"]:
            cd = dt.corrupt(test, dt.CorruptionSpec(kind, sev), seed=values["eval.corruption_seed"])
            log = mt.PredLog(md.predict(params, cd.features), cd.labels, cd.num_classes)
            recall = mt.class_recall_vector(log)
            worst = mt.worst_class_summary(recall)
            out["corruptions"].append({
                "kind": kind, "severity": sev, "parameter": dt.SEVERITY_TABLE[kind][sev],
                "overall": mt.clean_accuracy(log), "recall": _vec(recall),
                "c_acc": _vec(mt.class_accuracy_vector(log)), "cfps": _vec(mt.cfps_vector(log)),
                "min_class_acc": worst.value, "argmin": worst.cls,
            })
    return out, logs


def report_cfps_bars(log: mt.PredLog) -> str:
    """``class,cfps`` rows sorted by class id."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "cfps"])
    for c, v in enumerate(mt.cfps_vector(log)):
        w.writerow([c, repr(float(v))])
    return buf.getvalue()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return _jsonable(obj.item())
    return obj


def _dump(obj) -> str:
    return json.dumps(_jsonable(obj), indent=2, sort_keys=True, allow_nan=False)


class ExperimentFailed(RuntimeError):
    """Raised after a partial report (with a failure record) has been written."""

    def __init__(self, message: str, report_path: Path):
        super().__init__(message)
        self.report_path = report_path


def run_experiment(values: dict, out_dir, progress: Callable[[str], None] | None = print,
                   figures: bool | None = None) -> dict:
    """Train every seed, evaluate final and averaged models, write all outputs."""
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    timings = {}
    runs = []
    logs_by_run = {}
    failure = None
    for seed in values["run.seeds"]:
        try:
            run, logs, timing = _run_seed(values, seed, out, progress)
        except Exception as exc:  # recorded, then re-raised after the partial report is on disk
            failure = {"seed": seed, "error": type(exc).__name__, "message": str(exc),
                       "record": getattr(exc, "record", None)}
            break
        runs.append(run)
        logs_by_run.update(logs)
        timings[f"seed{seed}"] = timing

    report = {
        "version": REPORT_VERSION,
        "config": values,
        "config_text": cf.render(values),
        "notes": {
            "robust_accuracy": "attack-specific: accuracy under the named attack at the uniform base epsilon",
            "worst_class": "minimum over classes; worst_decile_mean averages the worst ceil(K/10) classes",
            "training_attack": cf.train_config(values, values["run.seeds"][0]).attack.describe(),
        },
        "runs": runs,
    }
    if failure is not None:
        report["failure"] = failure
    # wall-clock numbers live in their own file so report.json is reproducible byte for byte
    report["timings_file"] = "timings.json"
    (out / "timings.json").write_text(_dump(timings))
    (out / "report.json").write_text(_dump(report))
    if failure is not None:
        raise ExperimentFailed(f"seed {failure['seed']}: {failure['error']}: {failure['message']}", out / "report.json")
    for seed_run in runs:
        (out / f"history_seed{seed_run['seed']}.json").write_text(_dump(seed_run["history"]))
    write_tables(report, logs_by_run, out)
    if figures if figures is not None else values["output.figures"]:
        from .plotting import render_figures

        render_figures(report, out / "figures")
    return json.loads(_dump(report))


def _run_seed(values: dict, seed: int, out: Path, progress) -> tuple[dict, dict, dict]:
    t0 = time.perf_counter()
    train_ds, test_ds = build_datasets(values, seed)
    tcfg = cf.train_config(values, seed)
    if progress:
        progress(f"seed {seed}: {tcfg.mode}, {len(train_ds)} training samples, {tcfg.epochs} epochs")
    result = fair_tat_train(tcfg, train_ds, progress=progress)
    t1 = time.perf_counter()
    run = {"seed": seed, "mode": tcfg.mode, "history": result.history,
           "split": {"n_train": len(result.train), "n_valid": len(result.valid), "n_test": len(test_ds)},
           "models": {}, "checkpoints": {}}
    logs = {}
    for name, params in (("final", result.final), ("averaged", result.averaged)):
        rel = f"checkpoints/seed{seed}_{name}.npz"
        md.save_checkpoint(out / rel, params, seed, tcfg.epochs, {"model": name, "mode": tcfg.mode})
        run["checkpoints"][name] = rel
        tables, seed_logs = evaluate_model(params, test_ds, values)
        run["models"][name] = tables
        logs[(seed, name)] = seed_logs
    return run, logs, {"train_s": t1 - t0, "eval_s": time.perf_counter() - t1}


def write_tables(report: dict, logs_by_run: dict, out: Path) -> None:
    rows = [["seed", "model", "condition", "class", "recall", "c_acc", "cfps"]]
    corr = [["seed", "model", "kind", "severity", "parameter", "overall", "min_class_acc", "argmin"]]
    for run in report["runs"]:
        for name, tables in run["models"].items():
            for block in [tables["clean"], *tables["attacks"]]:
                for c, (r, a, f) in enumerate(zip(block["recall"], block["c_acc"], block["cfps"])):
                    rows.append([run["seed"], name, block["condition"], c, r, a, f])
            for entry in tables["corruptions"]:
                cond = f"{entry['kind']}@{entry['severity']}"
                for c, (r, a, f) in enumerate(zip(entry["recall"], entry["c_acc"], entry["cfps"])):
                    rows.append([run["seed"], name, cond, c, r, a, f])
                corr.append([run["seed"], name, entry["kind"], entry["severity"], entry["parameter"],
                             entry["overall"], entry["min_class_acc"], entry["argmin"]])
    _write_csv(out / "per_class.csv", rows)
    _write_csv(out / "corruption.csv", corr)
    _write_csv(out / "corruption_summary.csv", corruption_summary(report))
    first = report["runs"][0]
    (out / "cfps.csv").write_text(report_cfps_bars(logs_by_run[(first["seed"], "final")]["clean"]))
    cdir = out / "cfps"
    cdir.mkdir(exist_ok=True)
    for (seed, name), logs in logs_by_run.items():
        for cond, log in logs.items():
            (cdir / f"seed{seed}_{name}_{cond.replace('@', '_')}.csv").write_text(report_cfps_bars(log))


def corruption_summary(report: dict) -> list[list]:
    """Rows: corruption kind; columns: model; cells: min-class accuracy averaged over severities and seeds."""
    models = ["final", "averaged"]
    acc: dict[tuple[str, str], list[float]] = {}
    kinds: list[str] = []
    for run in report["runs"]:
        for name in models:
            for e in run["models"][name]["corruptions"]:
                if e["kind"] not in kinds:
                    kinds.append(e["kind"])
                acc.setdefault((e["kind"], name), []).append(e["min_class_acc"])
    rows = [["corruption", *models]]
    for kind in kinds:
        rows.append([kind, *(float(np.mean(acc[(kind, m)])) for m in models)])
    return rows


def _write_csv(path: Path, rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for r in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in r])


# -- verification ------------------------------------------------------------------------


def _compare(a, b, path: str, tol: float, problems: list[str]) -> int:
    """Recursive numeric comparison; returns the number of numbers checked."""
    if isinstance(a, dict) and isinstance(b, dict):
        if set(a) != set(b):
            problems.append(f"{path}: keys differ {sorted(set(a) ^ set(b))}")
            return 0
        return sum(_compare(a[k], b[k], f"{path}.{k}", tol, problems) for k in a)
    if isinstance(a, list) and isinstance(b, list):
        if len(a) != len(b):
            problems.append(f"{path}: lengths {len(a)} != {len(b)}")
            return 0
        return sum(_compare(x, y, f"{path}[{i}]", tol, problems) for i, (x, y) in enumerate(zip(a, b)))
    if isinstance(a, bool) or isinstance(b, bool) or a is None or b is None or isinstance(a, str):
        if a != b:
            problems.append(f"{path}: {a!r} != {b!r}")
        return 0
    if isinstance(a, (int, float)) and isinstance(b, (int, float)):
        if abs(a - b) > tol:
            problems.append(f"{path}: {a!r} != {b!r}")
        return 1
    if a != b:
        problems.append(f"{path}: {a!r} != {b!r}")
    return 0


def verify_report(report_path, retrain: bool = True, tol: float = 1e-9) -> tuple[int, list[str]]:
    """Recompute every evaluation number from the checkpoints (and optionally retrain).

    Returns (count of numbers checked, list of mismatches).
    """
    report_path = Path(report_path)
    if report_path.is_dir():
        report_path = report_path / "report.json"
    base = report_path.parent
    report = json.loads(report_path.read_text())
    values = cf.parse_text(report["config_text"])
    problems: list[str] = []
    checked = _compare(json.loads(_dump(values)), report["config"], "config", 0.0, problems)
    for run in report["runs"]:
        seed = run["seed"]
        train_ds, test_ds = build_datasets(values, seed)
        models = {}
        for name, rel in run["checkpoints"].items():
            params, meta = md.load_checkpoint(base / rel)
            models[name] = params
            tables, _ = evaluate_model(params, test_ds, values)
            checked += _compare(json.loads(_dump(tables)), run["models"][name], f"seed{seed}.{name}", tol, problems)
        if retrain:
            result = fair_tat_train(cf.train_config(values, seed), train_ds)
            checked += _compare(json.loads(_dump(result.history)), run["history"], f"seed{seed}.history", tol, problems)
            for name, params in (("final", result.final), ("averaged", result.averaged)):
                if not params.equals(models[name]):
                    problems.append(f"seed{seed}.{name}: retrained parameters differ from checkpoint")
    return checked, problems
