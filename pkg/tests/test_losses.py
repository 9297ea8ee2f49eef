import math

import numpy as np
import pytest

from oracles import ce, softmax, tail_brute_force
from reat import ndgrad as nd
from reat import losses as L


def test_cross_entropy_examples():
    assert L.cross_entropy([[0.0, 0.0]], [1]).item() == pytest.approx(math.log(2))
    assert L.cross_entropy([[1e3, 0.0]], [0]).item() == pytest.approx(0.0, abs=1e-12)
    assert L.cross_entropy([[1.0, 3.0]], [0]).item() == pytest.approx(2.1269, abs=1e-4)
    assert L.cross_entropy([[1.0, 3.0]], [0]).item() == pytest.approx(ce([1.0, 3.0], 0), abs=1e-14)


def test_balanced_softmax():
    z = np.random.default_rng(0).standard_normal((5, 3))
    y = np.array([0, 1, 2, 1, 0])
    assert L.balanced_softmax(z, y, [7, 7, 7]).item() == L.cross_entropy(z, y).item()
    assert L.balanced_softmax([[0.0, 0.0]], [1], [3, 1]).item() == pytest.approx(math.log(4))
    shifted = L.balanced_softmax(z + 5.0, y, [10, 4, 1]).item()
    assert shifted == pytest.approx(L.balanced_softmax(z, y, [10, 4, 1]).item(), abs=1e-12)
    # direct count-weighted softmax
    sizes = [10, 4, 1]
    ref = np.mean([-math.log(sizes[t] * math.exp(r[t]) / sum(n * math.exp(v) for n, v in zip(sizes, r))) for r, t in zip(z, y)])
    assert L.balanced_softmax(z, y, sizes).item() == pytest.approx(ref, abs=1e-12)


def test_focal_effective_number_ldam():
    z = np.random.default_rng(1).standard_normal((6, 4))
    y = np.array([0, 1, 2, 3, 0, 1])
    assert L.focal_loss(z, y, 0.0).item() == pytest.approx(L.cross_entropy(z, y).item(), abs=1e-15)
    with pytest.raises(ValueError):
        L.focal_loss(z, y, -1.0)
    ref = np.mean([-(1 - softmax(r)[t]) ** 2 * math.log(softmax(r)[t]) for r, t in zip(z, y)])
    assert L.focal_loss(z, y).item() == pytest.approx(ref, abs=1e-12)
    np.testing.assert_allclose(L.class_balanced_weights([5, 5, 5, 5]), 1.0, atol=1e-12)
    assert L.effective_number_loss(z, y, [5, 5, 5, 5]).item() == pytest.approx(L.cross_entropy(z, y).item(), abs=1e-12)
    w = L.class_balanced_weights([100, 10, 5, 1])
    assert w.sum() == pytest.approx(4.0)
    assert np.all(np.diff(w) > 0)
    np.testing.assert_allclose(L.ldam_margins([16, 1]), [0.25, 0.5])
    with pytest.raises(ValueError):
        L.ldam_loss(z, y, [4, 3, 2, 1], scale=0)
    m = L.ldam_margins([4, 3, 2, 1])
    ref = np.mean([ce([v - (m[t] if k == t else 0.0) for k, v in enumerate(r)], t) for r, t in zip(z, y)])
    assert L.ldam_loss(z, y, [4, 3, 2, 1]).item() == pytest.approx(ref, abs=1e-12)


def test_lt_loss_dispatch():
    z = np.zeros((2, 3))
    for kind in L.LT_KINDS:
        assert np.isfinite(L.lt_loss(kind, z, [0, 2], [5, 3, 1]).item())
    with pytest.raises(ValueError):
        L.lt_loss("mse", z, [0, 2], [5, 3, 1])


def test_rbl_loss():
    z = np.random.default_rng(2).standard_normal((4, 3))
    y = np.array([0, 2, 1, 2])
    assert L.rbl_loss(z, y, np.ones(3)).item() == L.cross_entropy(z, y).item()
    w = np.array([0.5, 1.0, 2.0])
    per = L.per_sample_ce(z, y).data
    assert L.rbl_loss(z, y, w).item() == pytest.approx(np.mean(per * w[y]), abs=1e-15)
    one = np.array([[0.3, -0.2]])
    c = L.cross_entropy(one, [1]).item()
    assert L.rbl_loss(one, [1], [1.4, 0.6]).item() == pytest.approx(0.6 * c)
    assert L.rbl_loss(z, y, w, weight_index=[0, 0, 0, 0]).item() == pytest.approx(0.5 * np.mean(per))


def test_tail_worked_example():
    pf = np.array([[0.5, 0.5], [0.9, 0.1]])
    omega = {0: 1.1180, 1: 2.2361}
    om = np.array([1.1180, 2.2361])
    # sample 0 belongs to tail class 1, sample 1 to head class 0
    labels = np.array([1, 0])
    kl = 0.9 * math.log(0.9 / 0.5) + 0.1 * math.log(0.1 / 0.5)
    assert kl == pytest.approx(0.36806, abs=1e-5)
    brute = tail_brute_force(pf.tolist(), labels.tolist(), omega, {1})
    assert brute == pytest.approx(-0.61726, abs=1e-4)
    assert L.tail_regularizer(pf, labels, om, {1}).item() == pytest.approx(brute, abs=1e-12)
    total = 1.0 + L.tail_regularizer(pf, labels, om, {1}).item()
    assert total == pytest.approx(0.38274, abs=1e-4)


def test_tail_zero_branches():
    pf = np.array([[0.2, 0.8], [0.6, 0.4]])
    assert L.tail_regularizer(pf, [0, 0], [1.0, 2.0], {1}).item() == 0.0
    same = np.array([[0.3, 0.7], [0.3, 0.7]])
    assert L.tail_regularizer(same, [1, 1], [1.0, 2.0], {1}).item() == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        L.tail_regularizer(np.array([[0.0, 1.0]]), [1], [1.0, 2.0], {1})


def test_tail_sign_convention():
    # dTAIL/dKLD is positive for same-class pairs and negative across classes
    p_i = np.array([0.5, 0.5])
    far = np.array([0.9, 0.1])
    near = np.array([0.6, 0.4])
    om = np.array([1.0, 1.0])
    same_far = L.tail_regularizer(np.stack([p_i, far]), [1, 1], om, {1}).item()
    same_near = L.tail_regularizer(np.stack([p_i, near]), [1, 1], om, {1}).item()
    assert same_far > same_near > 0
    cross_far = L.tail_regularizer(np.stack([p_i, far]), [1, 0], om, {1}).item()
    cross_near = L.tail_regularizer(np.stack([p_i, near]), [1, 0], om, {1}).item()
    assert cross_far < cross_near < 0


def test_tail_permutation_invariance():
    rng = np.random.default_rng(3)
    pf = rng.dirichlet(np.ones(5), size=9)
    y = rng.integers(0, 4, size=9)
    om = rng.random(4) + 1
    perm = rng.permutation(9)
    a = L.tail_regularizer(pf, y, om, {2, 3}).item()
    b = L.tail_regularizer(pf[perm], y[perm], om, {2, 3}).item()
    assert a == pytest.approx(b, abs=1e-13)


def test_tail_log_features_path_matches():
    rng = np.random.default_rng(4)
    f = rng.standard_normal((6, 4))
    logp = nd.log_softmax(nd.constant(f), axis=1)
    y = np.array([0, 1, 2, 2, 1, 0])
    om = np.array([1.0, 1.5, 3.0])
    a = L.tail_regularizer(nd.exp(logp), y, om, {2}).item()
    b = L.tail_regularizer(nd.exp(logp), y, om, {2}, log_prob_features=logp).item()
    assert a == pytest.approx(b, abs=1e-14)


def test_total_loss():
    rng = np.random.default_rng(5)
    z = rng.standard_normal((4, 3))
    pf = rng.dirichlet(np.ones(4), size=4)
    y = np.array([0, 1, 2, 2])
    sizes = [10, 5, 1]
    om = np.array([1.0, 2.0, 3.0])
    base = L.lt_loss("bsl", z, y, sizes).item()
    assert L.total_loss("bsl", z, pf, y, sizes, om, {2}, lam=0.0).item() == base
    assert L.total_loss("bsl", z, pf, [0, 1, 1, 0], sizes, om, {2}, lam=5.0).item() == L.lt_loss("bsl", z, [0, 1, 1, 0], sizes).item()
    tail = L.tail_regularizer(pf, y, om, {2}).item()
    assert L.total_loss("bsl", z, pf, y, sizes, om, {2}, lam=0.5).item() == pytest.approx(base + 0.5 * tail, abs=1e-14)
    with pytest.raises(ValueError):
        L.total_loss("bsl", z, pf, y, sizes, om, {2}, lam=-1.0)
