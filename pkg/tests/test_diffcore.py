import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairtat import diffcore as dc
from oracles import softmax


def test_relu_forward_and_zero_subgradient():
    x = dc.Tensor([-1.0, 0.0, 2.0], requires_grad=True)
    w = dc.Tensor([1.0, 1.0, 1.0])
    with dc.Tape() as tape:
        y = dc.relu(x)
        loss = dc.dot(y, w)
        tape.backward(loss)
    np.testing.assert_array_equal(y.values, [0.0, 0.0, 2.0])
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])


def test_uniform_cross_entropy_is_log_k():
    ce = dc.softmax_cross_entropy(dc.Tensor(np.zeros((1, 3))), [1])
    assert ce.values[0] == pytest.approx(math.log(3), abs=1e-15)


def test_matmul_identity():
    v = np.array([[0.3], [-1.2], [7.0]])
    out = dc.matmul(dc.Tensor(np.eye(3)), dc.Tensor(v))
    np.testing.assert_array_equal(out.values, v)


def test_cross_entropy_gradient_closed_form():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 4))
    y = np.array([0, 3, 1, 1, 2])
    logits = dc.Tensor(z, requires_grad=True)
    with dc.Tape() as tape:
        per = dc.softmax_cross_entropy(logits, y)
        tape.backward(dc.mean(per))
    expected = softmax(z)
    expected[np.arange(5), y] -= 1
    np.testing.assert_allclose(logits.grad, expected / 5, atol=1e-15)
    np.testing.assert_allclose(logits.grad.sum(axis=1), 0.0, atol=1e-10)


def test_linear_dot_gradient():
    w = dc.Tensor([2.0, 3.0])
    x = dc.Tensor([0.7, -0.1], requires_grad=True)
    with dc.Tape() as tape:
        tape.backward(dc.dot(w, x))
    np.testing.assert_array_equal(x.grad, [2.0, 3.0])


def test_shape_mismatch_names_dimensions():
    with pytest.raises(dc.ShapeError, match="3"):
        dc.matmul(dc.Tensor(np.ones((2, 3))), dc.Tensor(np.ones((4, 2))))


def test_label_out_of_range():
    with pytest.raises(dc.DomainError):
        dc.softmax_cross_entropy(dc.Tensor(np.zeros((2, 3))), [0, 3])


def test_backward_needs_scalar():
    x = dc.Tensor(np.ones(3), requires_grad=True)
    with dc.Tape() as tape:
        y = dc.relu(x)
        with pytest.raises(dc.ContractError):
            tape.backward(y)


def test_double_backward_needs_reset():
    x = dc.Tensor([1.0, 2.0], requires_grad=True)
    with dc.Tape() as tape:
        loss = dc.dot(x, dc.Tensor([1.0, 1.0]))
        tape.backward(loss)
        with pytest.raises(dc.ContractError):
            tape.backward(loss)
        tape.zero_grad()
        tape.backward(loss)
    np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def test_backward_without_tape():
    with pytest.raises(dc.ContractError):
        dc.backward(dc.Tensor(1.0))


def test_non_finite_forward_is_reported():
    with pytest.raises(dc.NonFiniteError), np.errstate(over="ignore"):
        dc.scale(dc.Tensor([1e308, 1.0]), 10.0)


def test_kl_divergence_zero_on_equal_logits_and_matches_formula():
    rng = np.random.default_rng(3)
    p, q = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    assert np.allclose(dc.kl_divergence(dc.Tensor(p), dc.Tensor(p)).values, 0.0, atol=1e-15)
    sp, sq = softmax(p), softmax(q)
    expected = (sp * (np.log(sp) - np.log(sq))).sum(axis=1)
    np.testing.assert_allclose(dc.kl_divergence(dc.Tensor(p), dc.Tensor(q)).values, expected, atol=1e-14)


def _mlp_loss(t):
    h = dc.relu(dc.add(dc.matmul(t["x"], dc.transpose(t["w1"])), t["b1"]))
    z = dc.add(dc.matmul(h, dc.transpose(t["w2"])), t["b2"])
    return dc.mean(dc.softmax_cross_entropy(z, [0, 2, 1, 1]))


def test_fd_check_two_layer_mlp():
    rng = np.random.default_rng(1)
    arrays = {"x": rng.uniform(size=(4, 8)), "w1": rng.normal(size=(6, 8)), "b1": rng.normal(size=6) * 0.1,
              "w2": rng.normal(size=(3, 6)), "b2": np.zeros(3)}
    report = dc.finite_difference_check(_mlp_loss, arrays)
    assert report.passed, report
    assert report.n_compared > 0


def test_fd_check_linear_model_is_near_exact():
    rng = np.random.default_rng(2)
    arrays = {"x": rng.uniform(size=7), "w": rng.normal(size=7)}

    def fn(t):
        return dc.dot(t["w"], t["x"])

    report = dc.finite_difference_check(fn, arrays)
    assert report.max_rel_error < 1e-8
    assert not report.non_comparable


def test_fd_check_flags_kink_as_non_comparable():
    def fn(t):
        return dc.dot(dc.relu(t["x"]), dc.Tensor([1.0, 1.0]))

    report = dc.finite_difference_check(fn, {"x": np.array([0.0, 1.0])})
    assert report.passed
    assert ("x", (0,)) in report.non_comparable
    assert report.n_compared == 1


def test_fd_check_rejects_non_finite_input_with_coordinate():
    with pytest.raises(dc.NonFiniteError, match=r"\(1, 0\)"):
        dc.finite_difference_check(lambda t: dc.mean(dc.Tensor([0.0])), {"x": np.array([[0.0], [np.nan]])})


def test_forward_is_deterministic():
    rng = np.random.default_rng(5)
    arrays = {"x": rng.uniform(size=(4, 8)), "w1": rng.normal(size=(6, 8)), "b1": rng.normal(size=6),
              "w2": rng.normal(size=(3, 6)), "b2": rng.normal(size=3)}
    a = _mlp_loss({k: dc.Tensor(v) for k, v in arrays.items()}).values
    b = _mlp_loss({k: dc.Tensor(v) for k, v in arrays.items()}).values
    assert a.tobytes() == b.tobytes()


@settings(max_examples=40, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 10_000))
def test_backward_is_linear_in_the_loss(a, b, seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(3, 4))
    y1, y2 = rng.integers(0, 4, 3), rng.integers(0, 4, 3)

    def grad_of(fn):
        t = dc.Tensor(z, requires_grad=True)
        with dc.Tape() as tape:
            tape.backward(fn(t))
        return t.grad

    g1 = grad_of(lambda t: dc.mean(dc.softmax_cross_entropy(t, y1)))
    g2 = grad_of(lambda t: dc.mean(dc.softmax_cross_entropy(t, y2)))
    g = grad_of(lambda t: dc.add(dc.scale(dc.mean(dc.softmax_cross_entropy(t, y1)), a),
                                 dc.scale(dc.mean(dc.softmax_cross_entropy(t, y2)), b)))
    np.testing.assert_allclose(g, a * g1 + b * g2, atol=1e-10)


def test_ops_without_grad_are_not_recorded():
    with dc.Tape() as tape:
        dc.relu(dc.Tensor([1.0, -1.0]))
    assert tape.entries == []
