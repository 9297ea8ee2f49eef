import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reat import ndgrad as nd


def test_record_identity_relu_softmax():
    r = nd.Record(lambda x: x + 0.0, ["x"])
    assert r.forward(x=[1.0, 2.0]).data.tolist() == [1.0, 2.0]
    r = nd.Record(lambda x: nd.relu(x), ["x"])
    assert r.forward(x=[-1.0, 3.0]).data.tolist() == [0.0, 3.0]
    assert nd.softmax(nd.constant([0.0, 0.0])).data.tolist() == [0.5, 0.5]


def test_record_backward_simple():
    r = nd.Record(lambda x: x * 3.0, ["x"])
    r.forward(x=1.5)
    assert r.backward(1.0)["x"] == pytest.approx(3.0)
    r = nd.Record(lambda x: x * x, ["x"])
    r.forward(x=2.0)
    assert r.backward(1.0)["x"] == pytest.approx(4.0)


def test_record_constant_input_has_no_gradient():
    r = nd.Record(lambda x, c: (x * c).sum(), ["x"])
    r.forward(x=np.ones(3), c=np.arange(3.0))
    grads = r.backward()
    assert set(grads) == {"x"}
    np.testing.assert_array_equal(grads["x"], np.arange(3.0))


def test_record_errors():
    r = nd.Record(lambda x: x * 2.0, ["x"])
    with pytest.raises(RuntimeError):
        r.backward()
    r.forward(x=np.ones(3))
    with pytest.raises(nd.ShapeError):
        r.backward(np.ones(2))
    # one backward per forward
    r.forward(x=np.ones(3))
    r.backward(np.ones(3))
    with pytest.raises(RuntimeError):
        r.backward(np.ones(3))
    with pytest.raises(KeyError):
        r.forward(y=1.0)


def test_shape_mismatch_and_nonfinite():
    with pytest.raises(nd.ShapeError):
        nd.matmul(nd.constant(np.ones((2, 3))), nd.constant(np.ones((2, 3))))
    with pytest.raises(nd.NonFiniteError) as info:
        nd.log(nd.constant([0.0, 1.0]))
    assert info.value.op == "log"


def test_finite_diff_check_contract(rng):
    assert nd.finite_diff_check(lambda x: x.sum(), rng.standard_normal(5)) < 1e-9
    with pytest.raises(nd.ShapeError):
        nd.finite_diff_check(lambda x: x * 2.0, np.ones(3))
    with pytest.raises(ValueError):
        nd.finite_diff_check(lambda x: x.sum(), np.ones(3), h=0.0)


def test_two_layer_mlp_matches_finite_differences(rng):
    w1 = rng.standard_normal((4, 6))
    w2 = rng.standard_normal((6, 3))
    x = rng.standard_normal((5, 4))
    y = np.array([0, 1, 2, 1, 0])

    def loss_wrt(i):
        def fn(p):
            a = p if i == 0 else nd.constant(w1)
            b = p if i == 1 else nd.constant(w2)
            z = nd.tanh(nd.constant(x) @ a) @ b
            return -nd.take_labels(nd.log_softmax(z, axis=1), y).mean()

        return fn

    assert nd.finite_diff_check(loss_wrt(0), w1) < 1e-4
    assert nd.finite_diff_check(loss_wrt(1), w2) < 1e-4


@pytest.mark.parametrize(
    "fn",
    [
        lambda t: (nd.exp(t) * t).sum(),
        lambda t: (t / (nd.sqrt(t * t + 1.0))).sum(),
        lambda t: nd.logsumexp(t.reshape(2, 3), axis=1).sum(),
        lambda t: (nd.softmax(t.reshape(3, 2), axis=1) ** 2.0).sum(),
        lambda t: nd.getitem(t.reshape(2, 3), (slice(None), 1)).sum() * 2.0,
        lambda t: nd.max_other(t.reshape(2, 3), np.array([0, 2])).sum(),
        lambda t: nd.concat_rows([t.reshape(2, 3), t.reshape(2, 3) * 2.0]).T.sum(axis=0).sum(),
    ],
)
def test_primitive_gradients(fn, rng):
    assert nd.finite_diff_check(fn, rng.standard_normal(6) + 0.1) < 1e-6


def test_conv_and_pool_gradients(rng):
    x = rng.random((2, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    assert nd.finite_diff_check(lambda t: (nd.avg_pool2(nd.conv2d(t, w, b, padding=1)) ** 2.0).sum(), x) < 1e-6
    assert nd.finite_diff_check(lambda t: nd.conv2d(x, t, b, padding=1).sum(), w) < 1e-6


def test_conv_matches_direct_loops(rng):
    x = rng.random((1, 2, 5, 5))
    w = rng.standard_normal((2, 2, 3, 3))
    out = nd.conv2d(nd.constant(x), nd.constant(w), None, padding=0).data
    ref = np.zeros((1, 2, 3, 3))
    for o in range(2):
        for i in range(3):
            for j in range(3):
                ref[0, o, i, j] = np.sum(x[0, :, i : i + 3, j : j + 3] * w[o])
    np.testing.assert_allclose(out, ref, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_gradient_of_sum_is_sum_of_gradients(n, seed):
    x = np.random.default_rng(seed).standard_normal(n)
    f = lambda t: (nd.exp(t) * 0.5).sum()  # noqa: E731
    g = lambda t: (t * t).sum()  # noqa: E731
    both = nd.grad(lambda t: f(t) + g(t))(x)
    np.testing.assert_allclose(both, nd.grad(f)(x) + nd.grad(g)(x), atol=1e-12, rtol=0)


def test_repeated_backward_is_bitwise_deterministic(rng):
    x = rng.standard_normal((4, 3))
    fn = lambda t: nd.logsumexp(t @ nd.constant(x.T), axis=1).sum()  # noqa: E731
    a = nd.grad(fn)(x)
    b = nd.grad(fn)(x)
    assert a.tobytes() == b.tobytes()


def test_logsumexp_is_overflow_safe():
    z = nd.constant([[1000.0, 0.0], [-1000.0, -1000.0]])
    out = nd.log_softmax(z, axis=1).data
    assert np.all(np.isfinite(out))
    assert out[0, 0] == pytest.approx(0.0)
    assert out[1, 0] == pytest.approx(np.log(0.5))


def test_tensors_are_immutable():
    t = nd.tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0
