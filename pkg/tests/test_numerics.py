import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from srlift import numerics as nx
from srlift.numerics import ShapeError, Tensor, finite_diff_check


def leaf(a):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def test_matmul_identity_and_hand_values():
    v = np.array([1.5, -2.0, 3.25])
    assert np.array_equal(nx.matmul(Tensor(np.eye(3)), Tensor(v)).data, v)
    out = nx.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([1.0, 1.0]))
    assert out.data.tolist() == [3.0, 7.0]


def test_leaky_relu_values():
    out = nx.leaky_relu(Tensor([-1.0, 2.0]))
    assert out.data[0] == pytest.approx(-0.01, abs=1e-15)
    assert out.data[1] == 2.0


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeError, match=r"\(3,\).*\(4,\)"):
        nx.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_mixed_precision_is_rejected():
    a = Tensor(np.ones(3, dtype=np.float32))
    b = Tensor(np.ones(3, dtype=np.float64))
    with pytest.raises(TypeError, match="mixed precision"):
        nx.add(a, b)


def test_batch_norm_single_sample_training_is_an_error():
    x = Tensor(np.ones((1, 4)))
    with pytest.raises(ValueError, match="at least 2"):
        nx.batch_norm(x, leaf(np.ones(4)), leaf(np.zeros(4)), np.zeros(4), np.ones(4), training=True)


def test_backward_constant_and_square():
    x = leaf([3.0])
    y = nx.reduce_sum(nx.mul(Tensor([2.0]), Tensor([5.0])))
    # x is not in the graph, so its gradient stays zero
    y.backward()
    assert x.grad.tolist() == [0.0]
    x = leaf([3.0])
    nx.reduce_sum(nx.mul(x, x)).backward()
    assert x.grad.tolist() == [6.0]


def test_backward_requires_scalar():
    x = leaf(np.ones(3))
    with pytest.raises(ShapeError):
        nx.mul(x, 2.0).backward()


def test_l1_through_fc_leaky_matches_finite_differences(rng):
    x = Tensor(rng.normal(size=(6, 5)))
    w = leaf(rng.normal(size=(4, 5)))
    b = leaf(rng.normal(size=4))
    target = rng.normal(size=(6, 4))

    def f(_):
        pred = nx.leaky_relu(nx.linear(x, w, b))
        return nx.reduce_mean(nx.absolute(nx.sub(pred, Tensor(target))))

    assert finite_diff_check(f, w) < 1e-6
    assert finite_diff_check(f, b) < 1e-6


def test_finite_diff_on_linear_and_quadratic(rng):
    a = rng.normal(size=7)
    x = leaf(rng.normal(size=7))
    assert finite_diff_check(lambda t: nx.reduce_sum(nx.mul(t, Tensor(a))), x) < 1e-9
    x = leaf(rng.normal(size=7))
    assert finite_diff_check(lambda t: nx.reduce_sum(nx.mul(t, t)), x) < 1e-8


def test_finite_diff_flags_wrong_backward_rule(rng):
    def doubled_square(t):
        return nx.make_op(t.data ** 2, (t,), lambda g: (g * 4.0 * t.data,), "bad_square")

    x = leaf(rng.uniform(0.5, 2.0, size=5))
    err = finite_diff_check(lambda t: nx.reduce_sum(doubled_square(t)), x)
    assert err == pytest.approx(1.0 / 3.0, abs=1e-6)


def test_finite_diff_names_non_finite_coordinate():
    x = leaf([1.0, 0.0])

    def f(t):
        return nx.reduce_sum(nx.make_op(np.where(t.data == 1e-5, np.inf, t.data), (t,), lambda g: (g,), "trap"))

    with pytest.raises(FloatingPointError, match=r"\(1,\)"):
        finite_diff_check(f, x)


@pytest.mark.parametrize("name", ["add", "sub", "mul", "matmul", "absolute", "leaky_relu", "concat",
                                  "take", "getitem", "reshape", "reduce_sum", "reduce_mean",
                                  "broadcast_to", "linear", "temporal_conv", "batch_norm", "batch_norm_eval"])
def test_every_op_passes_gradient_check(name, rng):
    worst = 0.0
    for _ in range(10):
        x = leaf(rng.normal(size=(4, 6)) + 0.1)
        other = Tensor(rng.normal(size=(4, 6)))
        fns = {
            "add": lambda t: nx.add(t, other),
            "sub": lambda t: nx.sub(other, t),
            "mul": lambda t: nx.mul(t, t),
            "matmul": lambda t: nx.matmul(t, Tensor(rng_w)),
            "absolute": nx.absolute,
            "leaky_relu": nx.leaky_relu,
            "concat": lambda t: nx.concat([t, nx.mul(t, 2.0)], axis=0),
            "take": lambda t: nx.take(t, [5, 0, 2], axis=-1),
            "getitem": lambda t: t[1:3, ::2],
            "reshape": lambda t: nx.reshape(t, (3, 8)),
            "reduce_sum": lambda t: nx.reduce_sum(t, axis=0, keepdims=True),
            "reduce_mean": lambda t: nx.reduce_mean(t, axis=1),
            "broadcast_to": lambda t: nx.broadcast_to(t[0:1], (5, 6)),
            "linear": lambda t: nx.linear(t, Tensor(rng_w.T), Tensor(np.arange(3.0))),
            "temporal_conv": lambda t: nx.temporal_conv(nx.reshape(t, (2, 4, 3)), Tensor(conv_w),
                                                        None, kernel=2, dilation=2),
            "batch_norm": lambda t: nx.batch_norm(t, Tensor(np.linspace(0.5, 2, 6)), Tensor(np.ones(6)),
                                                  np.zeros(6), np.ones(6), training=True),
            "batch_norm_eval": lambda t: nx.batch_norm(t, Tensor(np.linspace(0.5, 2, 6)), Tensor(np.ones(6)),
                                                       np.full(6, 0.3), np.full(6, 2.0), training=False),
        }
        rng_w = rng.normal(size=(6, 3))
        conv_w = rng.normal(size=(5, 6))
        weights = Tensor(rng.normal(size=fns[name](Tensor(x.data)).shape))
        worst = max(worst, finite_diff_check(lambda t: nx.reduce_sum(nx.mul(fns[name](t), weights)), x))
    assert worst < 1e-4


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e3, 1e3)))
def test_concat_then_slice_is_identity(a):
    t = Tensor(a)
    cat = nx.concat([t, Tensor(a * 2.0)], axis=1)
    assert np.array_equal(cat[:, :5].data, a)


def test_batch_norm_eval_neutral_is_identity(rng):
    x = rng.normal(size=(5, 3))
    out = nx.batch_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)), np.zeros(3), np.ones(3),
                        training=False, eps=0.0)
    assert np.array_equal(out.data, x)


def test_batch_norm_running_statistics_update(rng):
    x = rng.normal(2.0, 3.0, size=(50, 4))
    rm, rv = np.zeros(4), np.ones(4)
    nx.batch_norm(Tensor(x), Tensor(np.ones(4)), Tensor(np.zeros(4)), rm, rv, training=True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0, ddof=1), rtol=1e-12)


def test_forward_is_deterministic(rng):
    x = rng.normal(size=(64, 32))
    w = rng.normal(size=(16, 32))
    a = nx.leaky_relu(nx.linear(Tensor(x), Tensor(w))).data
    b = nx.leaky_relu(nx.linear(Tensor(x), Tensor(w))).data
    assert a.tobytes() == b.tobytes()


def test_unreached_leaf_keeps_zero_gradient(rng):
    used, unused = leaf(rng.normal(size=3)), leaf(rng.normal(size=3))
    nx.reduce_sum(nx.mul(used, used)).backward()
    assert np.all(unused.grad == 0)
