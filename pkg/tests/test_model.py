import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmelab import autodiff as ad
from mmelab import model as M
from mmelab.autodiff import Tensor
from mmelab.errors import ConfigError, DimensionError

from oracles import assert_gradients_close, central_difference


def cosine_head(W, T=0.05):
    return M.CosineClassifierParams(Tensor(np.asarray(W, dtype=np.float64), requires_grad=True), T)


def test_zero_network_gives_zero_features():
    m = M.init_model(0, 3, 4)
    for w in m.feature.weights:
        w.data[:] = 0.0
    f = M.extract_features(m.feature, Tensor(np.random.default_rng(0).standard_normal((5, 3))))
    np.testing.assert_array_equal(f.data, np.zeros((5, 16)))


def test_identity_single_layer():
    p = M.FeatureExtractorParams([Tensor(np.eye(3))], [Tensor(np.zeros(3))])
    x = np.array([[1.0, -2.0, 3.0]])
    np.testing.assert_array_equal(M.extract_features(p, Tensor(x)).data, x)


def test_feature_gradient_first_layer():
    m = M.init_model(1, 2, 3, hidden=(8,), feat_dim=4)
    x = np.random.default_rng(1).standard_normal((6, 2))
    W0 = m.feature.weights[0]
    ad.backward(ad.reduce_sum(M.extract_features(m.feature, Tensor(x))))

    def f(arr):
        saved = W0.data
        W0.data = arr
        try:
            return float(M.extract_features(m.feature, Tensor(x)).data.sum())
        finally:
            W0.data = saved

    assert_gradients_close(W0.grad, central_difference(f, W0.data.copy()), 1e-5)


def test_input_dimension_checked():
    m = M.init_model(0, 3, 4)
    with pytest.raises(DimensionError):
        M.extract_features(m.feature, Tensor(np.ones((2, 2))))


def test_orthogonal_prototypes_logit():
    W = np.zeros((4, 3))
    W[:, 0] = [2.0, 0, 0, 0]
    W[:, 1] = [0, 1.0, 0, 0]
    W[:, 2] = [0, 0, 3.0, 0]
    f = Tensor(W[:, [0]].T * 7.0)
    logits = M.cosine_logits(cosine_head(W), f).data[0]
    np.testing.assert_allclose(logits, [2.0 / 0.05, 0.0, 0.0], rtol=1e-14, atol=1e-12)


def test_temperature_logit_is_twenty():
    W = np.array([[1.0, 0.0], [0.0, 1.0]])
    logits = M.cosine_logits(cosine_head(W), Tensor([[1.0, 0.0]])).data[0]
    assert logits[0] == pytest.approx(20.0, abs=1e-12)


def test_cosine_scale_invariance_doubling():
    rng = np.random.default_rng(2)
    c = cosine_head(rng.standard_normal((5, 4)))
    f = rng.standard_normal((7, 5))
    np.testing.assert_allclose(M.cosine_logits(c, Tensor(2 * f)).data, M.cosine_logits(c, Tensor(f)).data, rtol=0, atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.floats(1e-3, 1e3), st.integers(0, 2**31))
def test_cosine_scale_invariance_property(alpha, seed):
    rng = np.random.default_rng(seed)
    c = cosine_head(rng.standard_normal((5, 4)))
    f = rng.standard_normal((6, 5))
    a = ad.softmax(M.cosine_logits(c, Tensor(alpha * f))).data
    b = ad.softmax(M.cosine_logits(c, Tensor(f))).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


def test_linear_head_is_not_scale_invariant():
    rng = np.random.default_rng(3)
    c = M.LinearClassifierParams(Tensor(rng.standard_normal((5, 4))), Tensor(np.zeros(4)))
    f = rng.standard_normal((6, 5))
    diff = np.abs(M.linear_logits(c, Tensor(10 * f)).data - M.linear_logits(c, Tensor(f)).data).max()
    assert diff > 1e-3


def test_zero_weights_give_uniform_rows():
    m = M.init_model(0, 2, 4)
    m.head.W.data[:] = 0.0
    p = M.predict_proba(m, Tensor(np.random.default_rng(0).standard_normal((5, 2)))).data
    np.testing.assert_allclose(p, 0.25, rtol=0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["cosine", "linear"]))
def test_probabilities_are_distributions(seed, head):
    m = M.init_model(seed % 1000, 2, 4, hidden=(8,), feat_dim=4, head_kind=head)
    x = np.random.default_rng(seed).standard_normal((10, 2)) * 5
    p = M.predict_proba(m, Tensor(x)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_argmax_is_nearest_prototype_by_cosine():
    m = M.init_model(4, 2, 4)
    x = np.random.default_rng(4).standard_normal((20, 2)) * 3
    f = M.extract_features(m.feature, Tensor(x)).data
    W = m.head.W.data
    expected = []
    for row in f:
        cos = [row @ W[:, k] / np.linalg.norm(row) for k in range(W.shape[1])]
        expected.append(int(np.argmax(cos)))
    np.testing.assert_array_equal(M.predict(m, x), expected)


def test_prototype_alignment_increases_probability():
    W = np.eye(3)
    c = cosine_head(W)
    lo = ad.softmax(M.cosine_logits(c, Tensor([[0.2, 1.0, 1.0]]))).data[0, 0]
    hi = ad.softmax(M.cosine_logits(c, Tensor([[0.5, 1.0, 1.0]]))).data[0, 0]
    assert hi > lo


def test_predict_ties_go_to_lowest_index():
    m = M.init_model(0, 2, 3)
    m.head.W.data[:] = 0.0
    assert M.predict(m, np.ones((4, 2))).tolist() == [0, 0, 0, 0]


def test_init_is_deterministic():
    a, b = M.init_model(5, 2, 4), M.init_model(5, 2, 4)
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    c = M.init_model(6, 2, 4)
    assert any(not np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), c.parameters()))


def test_glorot_variance():
    w = M.glorot_uniform(np.random.default_rng(0), 256, 256)
    a = np.sqrt(6.0 / 512)
    assert abs(w.var() - a * a / 3) <= 0.2 * a * a / 3
    assert np.abs(w).max() <= a


def test_init_invariants():
    m = M.init_model(0, 2, 4)
    assert all(np.isfinite(p.data).all() for p in m.parameters())
    assert (np.linalg.norm(m.head.W.data, axis=0) > 0).all()


def test_invalid_configs():
    with pytest.raises(ConfigError):
        M.init_model(0, 2, 4, feat_dim=1)
    with pytest.raises(ConfigError):
        M.init_model(0, 2, 1)
    with pytest.raises(ConfigError):
        M.init_model(0, 2, 4, T=0.0)
    with pytest.raises(ConfigError):
        M.init_model(0, 2, 4, head_kind="mlp")


def test_normalized_weights_option():
    W = np.array([[3.0, 0.0], [0.0, 0.5]])
    c = M.CosineClassifierParams(Tensor(W), 0.05, normalize_weights=True)
    np.testing.assert_allclose(M.cosine_logits(c, Tensor([[1.0, 1.0]])).data, [[20 / np.sqrt(2)] * 2], rtol=1e-14)


@pytest.mark.parametrize("head", ["cosine", "linear"])
def test_checkpoint_round_trip(tmp_path, head):
    m = M.init_model(9, 3, 5, head_kind=head)
    path = tmp_path / "m.json"
    M.save_checkpoint(m, path)
    r = M.load_checkpoint(path)
    assert r.head_kind == head and r.dims == m.dims and r.seed == 9
    for p, q in zip(m.parameters(), r.parameters()):
        np.testing.assert_array_equal(p.data, q.data)
    x = np.random.default_rng(0).standard_normal((4, 3))
    np.testing.assert_array_equal(M.predict_proba(m, Tensor(x)).data, M.predict_proba(r, Tensor(x)).data)


def test_snapshot_is_independent():
    m = M.init_model(0, 2, 4)
    s = M.snapshot(m)
    m.head.W.data += 1.0
    assert not np.array_equal(s.head.W.data, m.head.W.data)


def test_embed_normalizes_for_cosine_only():
    x = np.random.default_rng(0).standard_normal((5, 2))
    e = M.embed(M.init_model(0, 2, 4), x)
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, rtol=1e-12)
    lin = M.init_model(0, 2, 4, head_kind="linear")
    np.testing.assert_array_equal(M.embed(lin, x), M.extract_features(lin.feature, Tensor(x)).data)
