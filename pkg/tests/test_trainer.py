import math

import numpy as np
import pytest

from fairtat import model as md
from fairtat import sampler as sp
from fairtat import trainer as tr
from fairtat.attacks import AttackConfig
from fairtat.data import DataError, Dataset, make_blobs, make_three_class
from oracles import hand_gate

EPS = 0.05


def small_config(**kw):
    base = dict(epochs=3, batch_size=32, hidden_dims=(16,), attack=AttackConfig(epsilon=EPS, step_size=EPS / 4, num_steps=3),
                valid_fraction=0.1, seed=0)
    base.update(kw)
    return tr.TrainConfig(**base)


@pytest.fixture(scope="module")
def ds():
    return make_three_class(40, 1.5, 4.5, seed=0)


def test_split_counts_disjoint_and_deterministic():
    big = make_blobs(2, 1000, 3, seed=0)
    train, valid = tr.split(big, 0.02, seed=1)
    assert valid.class_counts().tolist() == [20, 20]
    assert len(train) + len(valid) == 2000
    rows = {tuple(r) for r in train.features} & {tuple(r) for r in valid.features}
    assert not rows
    again = tr.split(big, 0.02, seed=1)[1]
    assert np.array_equal(again.features, valid.features)


def test_split_rejects_tiny_class():
    ds = Dataset(np.full((3, 2), 0.5), np.array([0, 0, 1]), 2)
    with pytest.raises(DataError, match="class 1"):
        tr.split(ds, 0.1, seed=0)


def test_update_epsilons_examples():
    eps = 8 / 255
    np.testing.assert_allclose(tr.update_epsilons([0.0, 1.0, 0.5], eps, 0.5), [0.5 * eps, 1.5 * eps, eps])


def test_fawa_gate_examples():
    assert tr.fawa_gate([0.0, 0.9], 0.5, 0.0)
    assert not tr.fawa_gate([0.0, 0.9], 0.5, 0.2)
    assert tr.fawa_gate([0.3, 0.9], 0.6, 0.5)
    assert not tr.fawa_gate([0.29, 0.9], 0.6, 0.5)


@pytest.mark.parametrize("seed", range(5))
def test_fawa_gate_matches_hand_rule(seed):
    rng = np.random.default_rng(seed)
    for _ in range(200):
        per = np.round(rng.uniform(size=rng.integers(2, 6)), 2) * rng.integers(0, 2)
        overall = float(np.mean(per))
        th = float(rng.choice([0.0, 0.1, 0.2, 0.5, 1.0]))
        assert tr.fawa_gate(per, overall, th) == hand_gate(per, overall, th)


def test_zero_epochs_returns_initial_model(ds):
    res = tr.fair_tat_train(small_config(epochs=0), ds)
    assert res.history == []
    assert res.final.equals(md.init(2, (16,), 3, seed=0))
    assert res.averaged.equals(res.final)


def test_same_seed_same_history(ds):
    a = tr.fair_tat_train(small_config(), ds)
    b = tr.fair_tat_train(small_config(), ds)
    assert a.history == b.history and a.final.equals(b.final)
    c = tr.fair_tat_train(small_config(seed=1), ds)
    assert not c.final.equals(a.final)


def test_history_records_and_epsilon_bounds(ds):
    res = tr.fair_tat_train(small_config(epochs=4), ds)
    assert len(res.history) == 4
    for rec in res.history:
        r = np.array(rec["robust_recall"])
        eps_k = np.array(rec["eps_k"])
        assert np.all(eps_k >= 0.5 * EPS) and np.all(eps_k <= 1.5 * EPS)
        assert np.array_equal(eps_k, (0.5 + r) * EPS)
        assert math.isclose(sum(rec["prior"]), 1.0, abs_tol=1e-12)
    assert res.history[0]["prior_kind"] == sp.UNIFORM
    assert res.history[1]["prior_kind"] == sp.CFPS_PRIOR
    assert res.history[1]["eps_used"] == res.history[0]["eps_k"]


def test_averaging_none_returns_final(ds):
    res = tr.fair_tat_train(small_config(), ds)
    assert res.averaged.equals(res.final) and res.averaged is not res.final


def test_zero_lr_keeps_parameters_but_refreshes_stats(ds):
    cfg = small_config(batch_size=len(ds), sgd=md.SgdConfig(learning_rate=0.0))
    train, _ = tr.split(ds, cfg.valid_fraction, cfg.seed)
    p0 = md.init(2, (16,), 3, seed=0)
    stats = tr.ClassStats.cold(3, EPS)
    p1, new, rec = tr.train_epoch(p0, md.SgdState(), train, stats, cfg, 0)
    assert p1.equals(p0)
    assert new.cfps is not None and not np.isnan(new.robust_acc).any()
    assert not np.array_equal(new.eps_k, stats.eps_k)


def test_clean_training_on_separable_blobs():
    ds = make_blobs(2, 200, 2, center_spread=3.0, noise_std=0.3, seed=0)
    cfg = small_config(epochs=10, mode="untargeted_at", attack=AttackConfig(epsilon=0.0, step_size=0.01, num_steps=1))
    res = tr.fair_tat_train(cfg, ds)
    acc = np.mean(md.predict(res.final, ds.features) == ds.labels)
    assert acc > 0.99


@pytest.mark.parametrize("kw", [
    {"loss_kind": "trades"},
    {"eps_key": "target"},
    {"sampler_method": "rejection"},
    {"prior_refresh": "batch"},
    {"cfps_source": "adversarial"},
    {"prior_kind": "uniform"},
    {"calibrate_epsilon": False},
    {"averaging": "ema", "ema_decay": 0.9},
])
def test_variants_run_and_respect_bounds(ds, kw):
    res = tr.fair_tat_train(small_config(**kw), ds)
    assert len(res.history) == 3
    for rec in res.history:
        assert all(0.5 * EPS <= e <= 1.5 * EPS for e in rec["eps_k"])


def test_ema_differs_from_final_and_fawa_logs_gate(ds):
    ema = tr.fair_tat_train(small_config(epochs=4, averaging="ema", ema_decay=0.9), ds)
    assert not ema.averaged.equals(ema.final)
    fawa = tr.fair_tat_train(small_config(epochs=4, averaging="fawa", fairness_threshold=0.2), ds)
    gates = [r["averaging"]["gate"] for r in fawa.history]
    assert gates[:2] == [None, None] and all(g is not None for g in gates[2:])


def test_fawa_threshold_zero_equals_ema(ds):
    ema = tr.fair_tat_train(small_config(epochs=4, averaging="ema", ema_decay=0.8), ds)
    fawa = tr.fair_tat_train(small_config(epochs=4, averaging="fawa", ema_decay=0.8, fairness_threshold=0.0), ds)
    assert ema.averaged.equals(fawa.averaged)


def test_degenerate_prior_falls_back_to_uniform():
    y = np.array([0, 1, 2, 0])
    prior = sp.build_prior([1.0, 0.0, 0.0])
    t, n = tr._draw_targets(y, prior, small_config(), np.random.default_rng(0))
    assert n == 2 and not np.any(t == y)
    assert t[1] == 0 and t[2] == 0


def test_non_finite_loss_aborts_with_record(ds):
    train, _ = tr.split(ds, 0.1, 0)
    huge = md.init(2, (16,), 3, seed=0)
    huge = huge.with_arrays([a * 1e306 for a in huge.arrays()])
    with pytest.raises(tr.TrainingError) as info, np.errstate(all="ignore"):
        tr.train_epoch(huge, md.SgdState(), train, tr.ClassStats.cold(3, EPS),
                       small_config(mode="untargeted_at", attack=AttackConfig(epsilon=0.0, step_size=0.01, num_steps=1)),
                       0)
    assert info.value.record["epoch"] == 0


def test_config_validation():
    with pytest.raises(ValueError):
        tr.TrainConfig(mode="bogus")
    with pytest.raises(ValueError):
        tr.TrainConfig(fairness_threshold=1.5)


def test_streams_are_independent():
    a = tr.stream(0, 3, 1, 2).random(5)
    b = tr.stream(0, 4, 1, 2).random(5)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, tr.stream(0, 3, 1, 2).random(5))
