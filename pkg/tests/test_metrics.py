import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairtat import metrics as mt
from fairtat import model as md
from fairtat.attacks import AttackConfig, pgd_untargeted
from oracles import brute_metrics, brute_worst

HAND = mt.PredLog([0, 1, 1, 0], [0, 0, 1, 1], 2)


def test_accuracy_examples():
    assert mt.clean_accuracy(mt.PredLog([1, 2], [1, 2], 3)) == 1.0
    assert mt.clean_accuracy(HAND) == 0.5


def test_class_accuracy_hand_confusion():
    assert mt.class_accuracy(HAND, 0) == 0.5
    perfect = mt.PredLog(np.arange(10), np.arange(10), 10)
    assert all(mt.class_accuracy(perfect, c) == 1.0 for c in range(10))


def test_constant_predictor_class_accuracy():
    labels = np.repeat(np.arange(10), 7)
    log = mt.PredLog(np.zeros_like(labels), labels, 10)
    assert mt.class_accuracy(log, 0) == pytest.approx(0.1)
    assert all(mt.class_accuracy(log, c) == pytest.approx(0.9) for c in range(1, 10))


def test_cfps_examples():
    np.testing.assert_array_equal(mt.cfps_vector(HAND), [0.5, 0.5])
    np.testing.assert_allclose(mt.cfps_vector(mt.PredLog([0, 1, 2], [0, 1, 2], 3)), [1 / 3] * 3)
    log = mt.PredLog([2, 2, 2, 2], [0, 1, 0, 1], 3)
    np.testing.assert_array_equal(mt.cfps_vector(log), [0, 0, 1])
    assert [mt.cfps(log, c) for c in range(3)] == [0, 0, 1]


def test_worst_class_examples():
    w = mt.worst_class_summary([0.9, 0.5, 0.7])
    assert (w.value, w.cls) == (0.5, 1)
    assert mt.worst_class_summary([0.8] * 4).decile_mean == 0.8
    assert mt.worst_class_summary([0.9] * 90 + [0.1] * 10).decile_mean == pytest.approx(0.1)
    with pytest.raises(mt.MetricError):
        mt.worst_class_summary([])


def test_empty_log_is_an_error():
    empty = mt.PredLog.empty(3)
    for fn in (mt.clean_accuracy, mt.cfps_vector):
        with pytest.raises(mt.MetricError):
            fn(empty)


def test_recall_absent_class_is_nan():
    log = mt.PredLog([0, 1], [0, 1], 3)
    assert math.isnan(mt.class_recall(log, 2))
    assert mt.worst_class_summary(mt.class_recall_vector(log)).value == 1.0


def test_csv_round_trip():
    log = mt.PredLog([0, 2, 1], [0, 1, 1], 3)
    back = mt.PredLog.from_csv(log.to_csv(), 3)
    assert np.array_equal(back.preds, log.preds) and np.array_equal(back.labels, log.labels)


def test_random_labels_untrained_model_near_chance():
    rng = np.random.default_rng(0)
    p = md.init(20, [16], 10, seed=0)
    x = rng.uniform(size=(10_000, 20))
    y = rng.integers(0, 10, 10_000)
    assert abs(mt.clean_accuracy(mt.PredLog(md.predict(p, x), y, 10)) - 0.1) < 0.02


logs = st.integers(2, 8).flatmap(lambda k: st.tuples(
    st.just(k),
    st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1)), min_size=1, max_size=60),
))


@settings(max_examples=200, deadline=None)
@given(logs)
def test_against_brute_force(case):
    k, pairs = case
    preds, labels = zip(*pairs)
    log = mt.PredLog(preds, labels, k)
    c_acc, recall, fps = brute_metrics(preds, labels, k)
    np.testing.assert_allclose(mt.class_accuracy_vector(log), c_acc, atol=1e-12)
    np.testing.assert_allclose(mt.class_recall_vector(log), recall, atol=1e-12, equal_nan=True)
    np.testing.assert_allclose(mt.cfps_vector(log), fps, atol=1e-12)
    if any(p != y for p, y in pairs):
        assert abs(mt.cfps_vector(log).sum() - 1) <= 1e-12
    # frequency-weighted recall equals overall accuracy
    freq = np.bincount(labels, minlength=k) / len(labels)
    assert np.nansum(freq * mt.class_recall_vector(log)) == pytest.approx(mt.clean_accuracy(log), abs=1e-12)
    w = mt.worst_class_summary(recall)
    assert (w.value, w.cls, w.decile_mean) == pytest.approx(brute_worst(recall))


@settings(max_examples=100, deadline=None)
@given(logs, st.randoms(use_true_random=False))
def test_class_accuracy_invariant_under_relabeling_others(case, rnd):
    k, pairs = case
    c = 0
    others = list(range(1, k))
    shuffled = others[:]
    rnd.shuffle(shuffled)
    perm = {0: 0, **dict(zip(others, shuffled))}
    a = mt.PredLog(*zip(*pairs), k)
    b = mt.PredLog([perm[p] for p, _ in pairs], [perm[y] for _, y in pairs], k)
    assert mt.class_accuracy(a, c) == mt.class_accuracy(b, c)


def _attack(eps):
    cfg = AttackConfig(epsilon=eps, step_size=max(eps / 4, 1e-12), num_steps=10, random_start=False)
    return lambda p, x, y, b: pgd_untargeted(p, x, y, cfg).x_adv


def test_zero_margin_robust_equals_clean():
    rng = np.random.default_rng(1)
    p = md.init(4, [8], 3, seed=1)
    x, y = rng.uniform(size=(50, 4)), rng.integers(0, 3, 50)
    acc, log = mt.robust_accuracy(p, _attack(0.0), x, y, 3)
    assert acc == mt.clean_accuracy(mt.PredLog(md.predict(p, x), y, 3))


def test_constant_model_robust_accuracy():
    p = md.ModelParams(3, [], 3, [(np.zeros((3, 3)), np.array([1.0, 0.0, 0.0]))])
    rng = np.random.default_rng(2)
    y = rng.integers(0, 3, 40)
    acc, _ = mt.robust_accuracy(p, _attack(0.1), rng.uniform(size=(40, 3)), y, 3)
    assert acc == np.mean(y == 0)


def test_separable_margin_exceeding_eps_gives_full_robustness():
    # logits differ by 10*(x0 - 0.5); points sit at distance >= 0.2 from the boundary along x0
    w = np.array([[5.0, 0.0], [-5.0, 0.0]])
    p = md.ModelParams(2, [], 2, [(w, np.array([-2.5, 2.5]))])
    rng = np.random.default_rng(3)
    x0 = np.concatenate([rng.uniform(0.7, 1.0, 30), rng.uniform(0.0, 0.3, 30)])
    x = np.column_stack([x0, rng.uniform(size=60)])
    y = np.array([0] * 30 + [1] * 30)
    acc, _ = mt.robust_accuracy(p, _attack(0.1), x, y, 2)
    assert acc == 1.0


def test_robust_accuracy_non_increasing_in_margin():
    from fairtat.data import make_three_class
    from fairtat.trainer import TrainConfig, fair_tat_train

    for seed in range(5):
        ds = make_three_class(60, 1.5, 4.5, seed=seed)
        res = fair_tat_train(TrainConfig(epochs=8, batch_size=32, seed=seed, mode="untargeted_at",
                                         attack=AttackConfig(epsilon=0.05, step_size=0.0125)), ds)
        accs = [mt.robust_accuracy(res.final, _attack(e), ds.features, ds.labels, 3)[0]
                for e in (0, 2 / 255, 4 / 255, 8 / 255)]
        assert all(b <= a for a, b in zip(accs, accs[1:])), accs
