import numpy as np
import pytest

from reat import ndgrad as nd
from reat.models import (
    CheckpointError,
    ModelError,
    ModelSpec,
    cosine_logits,
    init_model,
    load_checkpoint,
    quantize,
    read_checkpoint_header,
    save_checkpoint,
)


def test_init_deterministic_and_param_count():
    spec = ModelSpec((4,), 3, widths=(8,), feature_dim=8, feature_activation="relu")
    a, b = init_model(spec), init_model(spec)
    assert all(a.params[k].tobytes() == b.params[k].tobytes() for k in a.params)
    # hidden 4->8, feature 8->8, head 8->3
    assert a.num_parameters() == 4 * 8 + 8 + 8 * 8 + 8 + 8 * 3 + 3
    # input 4 straight into an 8-wide feature layer, then the 3-way head
    assert init_model(ModelSpec((4,), 3, widths=(), feature_dim=8)).num_parameters() == 67


def test_cosine_head_has_directions_only():
    m = init_model(ModelSpec((4,), 3, head="cosine"))
    assert m.params["head.directions"].shape == (3, 32)
    assert "head.b" not in m.params and "head.w" not in m.params


def test_spec_validation():
    with pytest.raises(ModelError):
        ModelSpec((4,), 3, feature_dim=1)
    with pytest.raises(ModelError):
        ModelSpec((4,), 3, head="cosine", tau=0)
    with pytest.raises(ModelError):
        ModelSpec((4,), 3, widths=(0,))
    with pytest.raises(ModelError):
        init_model(ModelSpec((1, 4, 4), 3, arch="cnn", widths=(4, 4, 4)))


def test_linear_head_on_zero_features_returns_bias():
    m = init_model(ModelSpec((3,), 2, feature_activation="relu"))
    m.params["feature.w"][:] = 0
    m.params["head.b"][:] = [0.3, -0.7]
    out = m.forward(np.full((2, 3), 0.5))
    np.testing.assert_allclose(out.logits.data, [[0.3, -0.7]] * 2)
    np.testing.assert_allclose(out.prob_features.data, 1 / 32)


def test_cosine_logits():
    w = np.array([[1.0, 0.0], [0.0, 2.0]])
    z = cosine_logits(np.array([[3.0, 0.0]]), w, 1.0).data
    np.testing.assert_allclose(z, [[1.0, 0.0]], atol=1e-15)
    f = np.random.default_rng(0).standard_normal((4, 2))
    np.testing.assert_allclose(cosine_logits(f, w, 10.0).data, 10 * cosine_logits(f, w, 1.0).data, rtol=1e-14)
    np.testing.assert_allclose(cosine_logits(10 * f, w, 1.0).data, cosine_logits(f, w, 1.0).data, rtol=1e-14)
    assert np.all(np.abs(cosine_logits(f, w, 3.0).data) <= 3.0 + 1e-12)
    with pytest.raises(ModelError):
        cosine_logits(np.zeros((1, 2)), w, 1.0)
    with pytest.raises(ModelError):
        cosine_logits(f, np.zeros((2, 2)), 1.0)


def test_forward_shape_error_and_prob_features():
    m = init_model(ModelSpec((5,), 3))
    with pytest.raises(ModelError):
        m.forward(np.zeros((2, 4)))
    pf = m.forward(np.random.default_rng(0).random((6, 5))).prob_features.data
    assert np.all(pf > 0)
    np.testing.assert_allclose(pf.sum(axis=1), 1.0, atol=1e-9)


def test_cnn_forward_and_gradient():
    m = init_model(ModelSpec((1, 8, 8), 3, arch="cnn", widths=(2, 3), feature_dim=4))
    x = np.random.default_rng(0).random((2, 1, 8, 8))
    out = m.forward(x)
    assert out.logits.shape == (2, 3)
    err = nd.finite_diff_check(lambda t: m.forward(t).logits.sum(), x)
    assert err < 1e-6


def test_checkpoint_round_trip(tmp_path):
    m = init_model(ModelSpec((5,), 3, head="cosine", tau=4.0, init_seed=7))
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path, epoch=12, rng_digest="abc")
    loaded, header = load_checkpoint(path)
    assert header["epoch"] == "12" and header["rng"] == "abc"
    assert loaded.spec == m.spec
    q = quantize(m)
    assert all(loaded.params[k].tobytes() == q.params[k].tobytes() for k in m.params)
    x = np.random.default_rng(0).random((4, 5))
    assert loaded.forward(x).logits.data.tobytes() == q.forward(x).logits.data.tobytes()
    np.testing.assert_allclose(loaded.forward(x).logits.data, m.forward(x).logits.data, rtol=1e-5)
    assert read_checkpoint_header(path)["epoch"] == "12"
    assert (tmp_path / "m.ckpt").read_bytes().split(b"\n")[0].startswith(b"reat-checkpoint version=1")


def test_checkpoint_errors(tmp_path):
    m = init_model(ModelSpec((2,), 2, widths=(3,), feature_dim=2))
    path = tmp_path / "m.ckpt"
    save_checkpoint(m, path)
    raw = path.read_bytes()
    expected = 4 * m.num_parameters()
    (tmp_path / "short.ckpt").write_bytes(raw[:-4])
    with pytest.raises(CheckpointError, match=f"expected {expected} blob bytes, found {expected - 4}"):
        load_checkpoint(tmp_path / "short.ckpt")
    (tmp_path / "v2.ckpt").write_bytes(raw.replace(b"version=1", b"version=2", 1))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(tmp_path / "v2.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"hello\n")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk.ckpt")
