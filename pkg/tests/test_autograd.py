import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gesture_kd import autograd as ag
from gesture_kd.autograd import NonFiniteError, Tensor

# frozen from a 30-digit mpmath evaluation of x * tanh(ln(1 + e^x))
MISH_1 = 0.865098388267310346
MISH_MINUS_20 = -4.12230724062876140e-08
SOFTMAX_10 = (0.731058578630004879, 0.268941421369995121)

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def leaf(x):
    return Tensor(x, requires_grad=True)


def test_sum_gradient_is_all_ones():
    x = leaf(np.arange(6.0).reshape(2, 3))
    ag.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_product_rule():
    x, y = leaf(2.0), leaf(3.0)
    ag.backward(x * y)
    assert x.grad == 3.0 and y.grad == 2.0


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError, match="scalar"):
        ag.backward(leaf(np.ones(3)) * 2.0)


def test_fan_out_accumulates():
    x = leaf(1.5)
    ag.backward(x * x + x)
    assert x.grad == pytest.approx(2 * 1.5 + 1)


def test_grad_leaves_dot_grad_untouched():
    x = leaf(np.ones(3))
    x.grad = np.full(3, 7.0)
    (g,) = ag.grad((x * x).sum(), [x])
    np.testing.assert_array_equal(g, 2 * np.ones(3))
    np.testing.assert_array_equal(x.grad, np.full(3, 7.0))


def test_unused_input_gets_zero_gradient():
    x, y = leaf(np.ones(2)), leaf(np.ones(2))
    gx, gy = ag.grad(x.sum(), [x, y])
    np.testing.assert_array_equal(gy, 0.0)


def test_no_grad_records_nothing():
    x = leaf(np.ones(2))
    with ag.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()
    assert ag.grad_enabled()


def test_no_grad_is_thread_local():
    seen = []
    with ag.no_grad():
        t = threading.Thread(target=lambda: seen.append(ag.grad_enabled()))
        t.start()
        t.join()
    assert seen == [True]


def test_non_finite_forward_raises():
    with pytest.raises(NonFiniteError):
        ag.log(Tensor([-1.0]))
    with pytest.raises(NonFiniteError):
        ag.exp(Tensor([1000.0]))


def test_numpy_array_on_the_left_dispatches_to_tensor():
    out = np.ones(3) - leaf(np.arange(3.0))
    assert isinstance(out, Tensor)
    np.testing.assert_array_equal(out.data, [1.0, 0.0, -1.0])


def test_topological_order_parents_first():
    x = leaf(1.0)
    a = x * 2.0
    b = a + x
    c = b * a
    order = ag._topological_order(c)
    position = {id(n): k for k, n in enumerate(order)}
    for node in order:
        for p in node._parents:
            if p.requires_grad:
                assert position[id(p)] < position[id(node)]


def test_backward_is_bit_identical_across_runs(rng):
    w = rng.normal(size=(5, 4))
    x = rng.normal(size=(3, 5))

    def run():
        p = leaf(w.copy())
        loss = ag.mish(ag.matmul(Tensor(x), p)).sum()
        ag.backward(loss)
        return p.grad

    assert np.array_equal(run(), run())


# --- mish ---------------------------------------------------------------

def test_mish_reference_values():
    assert ag.mish(Tensor(0.0)).item() == 0.0
    assert ag.mish(Tensor(1.0)).item() == pytest.approx(MISH_1, abs=1e-15)
    m20 = ag.mish(Tensor(-20.0)).item()
    assert abs(m20) < 1e-7
    assert m20 == pytest.approx(MISH_MINUS_20, rel=1e-9)


def test_mish_matches_its_definition(rng):
    x = rng.normal(scale=5, size=200)
    ref = np.array([v * math.tanh(math.log1p(math.exp(v))) for v in x])
    np.testing.assert_allclose(ag.mish(Tensor(x)).data, ref, rtol=1e-13, atol=1e-15)


def test_mish_limits():
    assert ag.mish(Tensor(30.0)).item() / 30.0 > 0.999999
    assert abs(ag.mish(Tensor(-700.0)).item()) < 1e-250
    assert ag.mish(Tensor(1e5)).item() == 1e5


def test_mish_gradient_at_one_matches_central_difference():
    x = leaf(1.0)
    ag.backward(ag.mish(x))
    h = 1e-5
    numeric = (ag.mish(Tensor(1.0 + h)).item() - ag.mish(Tensor(1.0 - h)).item()) / (2 * h)
    assert abs(x.grad - numeric) < 1e-6


# --- softmax / cumax ----------------------------------------------------

def test_softmax_examples():
    np.testing.assert_array_equal(ag.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    np.testing.assert_allclose(ag.softmax(Tensor([1.0, 0.0])).data, SOFTMAX_10, rtol=0, atol=1e-15)


@given(hnp.arrays(np.float64, st.integers(1, 8), elements=finite), finite)
def test_softmax_shift_invariance_and_normalisation(x, c):
    s = ag.softmax(Tensor(x)).data
    np.testing.assert_allclose(ag.softmax(Tensor(x + c)).data, s, rtol=1e-12, atol=1e-15)
    assert abs(s.sum() - 1.0) <= 1e-12
    assert ((s >= 0) & (s <= 1)).all()


def test_softmax_is_stable_for_huge_logits():
    s = ag.softmax(Tensor([1000.0, 0.0, -1000.0])).data
    np.testing.assert_allclose(s, [1.0, 0.0, 0.0], atol=1e-300)


def test_log_softmax_matches_log_of_softmax(rng):
    x = rng.normal(size=(4, 7))
    np.testing.assert_allclose(ag.log_softmax(Tensor(x)).data, np.log(ag.softmax(Tensor(x)).data), atol=1e-14)


def test_cumax_examples():
    np.testing.assert_allclose(ag.cumax(Tensor(np.zeros(4))).data, [0.25, 0.5, 0.75, 1.0], atol=1e-15)
    x = np.zeros(6)
    x[2] = 30.0
    out = ag.cumax(Tensor(x)).data
    assert (out[:2] < 1e-12).all() and (out[2:] > 1 - 1e-12).all()


@given(hnp.arrays(np.float64, st.integers(1, 10), elements=finite))
def test_cumax_monotone_in_unit_interval_ending_at_one(x):
    out = ag.cumax(Tensor(x)).data
    assert (np.diff(out) >= 0).all()
    assert (out >= 0).all() and (out <= 1 + 1e-12).all()
    assert abs(out[-1] - 1.0) <= 1e-12


def test_invariant_checks_fire_when_enabled():
    ag.check(True, "never")
    with pytest.raises(ag.InvariantError):
        ag.check(False, "boom")
    ag.set_invariant_checks(False)
    ag.check(False, "silent when disabled")


# --- normalisation ------------------------------------------------------

def test_layer_norm_examples():
    out = ag.layer_norm(Tensor([1.0, 3.0]), Tensor([1.0, 1.0]), Tensor([0.0, 0.0]), eps=0.0)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-15)
    const = ag.layer_norm(Tensor(np.full((2, 5), 3.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(const.data, 0.0)


def test_layer_norm_standardises_each_position(rng):
    out = ag.layer_norm(Tensor(rng.normal(3, 2, size=(4, 9))), Tensor(np.ones(9)), Tensor(np.zeros(9)), eps=0.0)
    np.testing.assert_allclose(out.data.mean(-1), 0.0, atol=1e-14)
    np.testing.assert_allclose(out.data.var(-1), 1.0, atol=1e-12)


def test_layer_norm_shape_mismatch():
    with pytest.raises(ValueError):
        ag.layer_norm(Tensor(np.ones((2, 3))), Tensor(np.ones(4)), Tensor(np.zeros(4)))


def test_batch_norm_train_hand_example():
    rm, rv = np.zeros(1), np.ones(1)
    out = ag.batch_norm(Tensor([[0.0], [2.0]]), Tensor([1.0]), Tensor([0.0]), rm, rv, True, eps=0.0)
    np.testing.assert_allclose(out.data, [[-1.0], [1.0]])
    # momentum 0.1, unbiased variance 2
    np.testing.assert_allclose(rm, [0.1])
    np.testing.assert_allclose(rv, [0.9 + 0.1 * 2.0])


def test_batch_norm_eval_uses_running_stats():
    rm, rv = np.array([1.0]), np.array([4.0])
    out = ag.batch_norm(Tensor([[3.0]]), Tensor([2.0]), Tensor([0.5]), rm, rv, False, eps=0.0)
    assert out.item() == pytest.approx(2.0 * (3.0 - 1.0) / 2.0 + 0.5)
    np.testing.assert_array_equal(rm, [1.0])


# --- primitive semantics ------------------------------------------------

def test_matmul_identity(rng):
    a = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(ag.matmul(Tensor(np.eye(4)), Tensor(a)).data, a)


def test_dropout_identity_cases(rng):
    x = Tensor(rng.normal(size=(3, 4)))
    assert ag.dropout(x, 0.0, True, rng) is x
    assert ag.dropout(x, 0.5, False, rng) is x
    with pytest.raises(ValueError):
        ag.dropout(x, 1.0, True, rng)
    with pytest.raises(ValueError):
        ag.dropout(x, -0.1, True, rng)


def test_dropout_is_inverted_and_unbiased():
    x = Tensor(np.ones(200_000))
    out = ag.dropout(x, 0.5, True, np.random.default_rng(0)).data
    assert set(np.unique(out)) == {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.01


def test_slice_concat_repeat_semantics(rng):
    a = rng.normal(size=(3, 5))
    np.testing.assert_array_equal(ag.slice_(Tensor(a), 1, 4).data, a[:, 1:4])
    np.testing.assert_array_equal(ag.concat([Tensor(a), Tensor(a)], axis=0).data, np.concatenate([a, a]))
    np.testing.assert_array_equal(ag.repeat(Tensor(a), 2).data, np.repeat(a, 2, axis=-1))


def test_getitem_with_repeated_fancy_index_accumulates():
    x = leaf(np.arange(4.0))
    ag.backward(x[np.array([0, 0, 2])].sum())
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0, 0.0])


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([(3, 4), (1, 4), (4,), (3, 1)]), st.integers(0, 2**31))
def test_broadcast_gradients_unbroadcast_to_input_shape(shape_b, seed):
    r = np.random.default_rng(seed)
    a, b = leaf(r.normal(size=(3, 4))), leaf(r.normal(size=shape_b))
    ag.backward((a * b + b).sum())
    assert b.grad.shape == b.shape
    expected = np.broadcast_to(a.data + 1.0, (3, 4))
    while expected.ndim > b.ndim:
        expected = expected.sum(0)
    for axis, dim in enumerate(b.shape):
        if dim == 1:
            expected = expected.sum(axis, keepdims=True)
    np.testing.assert_allclose(b.grad, expected, rtol=1e-12)
