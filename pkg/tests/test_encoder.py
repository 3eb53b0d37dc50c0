import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hug import autodiff as ad
from hug.encoder import (LOGVAR_MAX, LOGVAR_MIN, ModelConfig, compose, encode_batch, encode_query, encode_target,
                         estimate_uncertainty, fuse_query_uncertainty, head_params, init_encoder)
from hug.gaussian import pairwise_holistic_distance
from hug.modes import FULL, MODES
from hug.trainer import random_check_model

CFG = ModelConfig(n_components=4, dim=6, hidden=5, d_txt=8, d_img=7)


@pytest.fixture
def params():
    return init_encoder(CFG, np.random.default_rng(0))


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def straight_line_compose(p, text=None, image=None):
    """Loop-level re-implementation of the composer, independent of the tape ops."""
    x_lq = p["composer.x_lq"]
    K, D = x_lq.shape
    tokens = []
    if text is not None:
        tokens.append(text @ p["composer.proj_txt"])
    if image is not None:
        tokens.append(image @ p["composer.proj_img"])
    out = np.zeros((K, D))
    for k in range(K):
        q = x_lq[k] @ p["composer.wq"]
        scores = np.array([q @ (t @ p["composer.wk"]) for t in tokens]) / np.sqrt(D)
        w = np.exp(scores - scores.max())
        w /= w.sum()
        h = x_lq[k] + sum(wi * (t @ p["composer.wv"]) for wi, t in zip(w, tokens))
        ff = np.tanh(h @ p["composer.ff_w1"] + p["composer.ff_b1"]) @ p["composer.ff_w2"] + p["composer.ff_b2"]
        out[k] = h + ff
    return out


def test_compose_matches_straight_line(params, rng):
    # rescale so the attention is far from uniform
    p = dict(params, **{"composer.wq": 5 * params["composer.wq"], "composer.x_lq": rng.standard_normal((4, 6))})
    x_t, x_r = rng.standard_normal(8), rng.standard_normal(7)
    for args in ((x_t, x_r), (None, x_r), (x_t, None)):
        np.testing.assert_allclose(compose(p, *args).data, straight_line_compose(p, *args), rtol=1e-12, atol=1e-13)


def test_compose_query_differs_from_target(params, rng):
    x_t, x_r = rng.standard_normal(8), rng.standard_normal(7)
    assert not np.allclose(compose(params, x_t, x_r).data, compose(params, None, x_r).data)
    with pytest.raises(ValueError):
        compose(params, None, None)


def test_compose_batch_matches_single(params, rng):
    X_t, X_r = rng.standard_normal((3, 8)), rng.standard_normal((3, 7))
    batch = compose(params, X_t, X_r).data
    for i in range(3):
        np.testing.assert_allclose(batch[i], compose(params, X_t[i], X_r[i]).data, rtol=1e-13, atol=1e-14)


def test_uncertainty_clamp_and_constant_head(params, rng):
    head = head_params(params, "v")
    big = {k: 1e3 * v for k, v in head.items()}
    var = estimate_uncertainty(big, 10 * rng.standard_normal((4, 6))).data
    assert np.all(var >= np.exp(LOGVAR_MIN)) and np.all(var <= np.exp(LOGVAR_MAX))
    zero = {k: np.zeros_like(v) for k, v in head.items()}
    zero["b2"] = np.linspace(-1, 1, 6)
    var = estimate_uncertainty(zero, rng.standard_normal((4, 6))).data
    np.testing.assert_allclose(var, np.broadcast_to(np.exp(zero["b2"]), (4, 6)), rtol=1e-15)


def test_head_gradient(params, rng):
    head = head_params(params, "t")
    means = rng.standard_normal((4, 6))
    proj = rng.standard_normal((4, 6))

    def f(tape, P):
        return ad.sum_(ad.mul(estimate_uncertainty(P, means), proj))

    assert ad.grad_check(f, head, 1e-5) < 1e-6


def test_fusion_examples():
    v = np.full((2, 3), 0.7)
    var_q, w = fuse_query_uncertainty(v, v, v)
    assert np.all(w.data == 1 / 3)
    np.testing.assert_allclose(var_q.data, v, rtol=1e-15)
    tiny = np.full((1, 1), 1e-300)
    var_q, w = fuse_query_uncertainty(tiny, tiny, np.full((1, 1), np.log(2.0)))
    np.testing.assert_allclose(w.data[0, 0], [0.4, 0.4, 0.2], rtol=1e-12)
    np.testing.assert_allclose(var_q.data[0, 0], 0.2 * np.log(2.0), rtol=1e-12)
    with pytest.raises(ValueError):
        fuse_query_uncertainty(v, v, np.zeros((2, 3)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31))
def test_fusion_simplex_bracketing_monotone(seed):
    rng = np.random.default_rng(seed)
    fields = [np.exp(rng.uniform(-5, 3, (3, 4))) for _ in range(3)]
    var_q, w = fuse_query_uncertainty(*fields)
    w = w.data
    assert np.all(w >= 0)
    assert np.max(np.abs(w.sum(-1) - 1)) <= 1e-12
    stack = np.stack(fields, -1)
    assert np.all(stack.min(-1) <= var_q.data) and np.all(var_q.data <= stack.max(-1))
    bumped = [fields[0] * 1.5, fields[1], fields[2]]
    assert np.all(fuse_query_uncertainty(*bumped)[1].data[..., 0] < w[..., 0])


def test_encode_query_bundle(params, rng):
    g, bundle = encode_query(params, rng.standard_normal(7), rng.standard_normal(8))
    assert np.max(np.abs(bundle.weights.sum(-1) - 1)) <= 1e-12
    assert bundle.mean_coord_uncertainty == pytest.approx(bundle.var_m.mean(), rel=1e-15)
    assert g.mu.shape == (4, 6) and np.all(g.var > 0)


def test_gv_is_shared(params, rng):
    x = rng.standard_normal(7)
    t = rng.standard_normal(8)
    _, b1 = encode_query(params, x, t)
    v1 = encode_target(params, x).var
    # the target and the var_r leg see the same image-only means, so they agree exactly
    np.testing.assert_array_equal(v1, b1.var_r)
    mutated = dict(params, **{"head_v.b2": params["head_v.b2"] + 0.5})
    _, b2 = encode_query(mutated, x, t)
    v2 = encode_target(mutated, x).var
    np.testing.assert_allclose(v2 / v1, np.exp(0.5), rtol=1e-12)
    np.testing.assert_allclose(b2.var_r / b1.var_r, np.exp(0.5), rtol=1e-12)
    assert np.all(encode_target(params, x).var == v1)


def test_encode_query_end_to_end_gradient(rng):
    cfg = ModelConfig(n_components=3, dim=4, hidden=3, d_txt=4, d_img=4)
    # default init leaves attention gradients near round-off; use a well-conditioned point
    p = random_check_model(cfg, seed=1)
    p = {k: v for k, v in p.items() if not k.startswith("loss.")}
    x_r, x_t = rng.standard_normal((1, 4)), rng.standard_normal((1, 4))
    target = encode_target(p, rng.standard_normal(4))

    def f(tape, P):
        enc = encode_batch(P, FULL, x_r, x_t, None, coord_grid=False)
        return ad.sum_(pairwise_holistic_distance(enc.mu_q, enc.var_q, target.mu[None], target.var[None]))

    # same bound as the end-to-end loss checks
    assert ad.grad_check(f, p, 1e-5) < 1e-4


def test_mode_heads_and_batch_shapes(rng):
    cfg = ModelConfig(n_components=3, dim=4, hidden=3, d_txt=4, d_img=4)
    x = rng.standard_normal((3, 4))
    for spec in MODES:
        p = init_encoder(cfg, np.random.default_rng(0), heads=spec.heads)
        assert any(k.startswith("head_") for k in p) == spec.probabilistic
        enc = encode_batch(p, spec, x, x, x)
        assert enc.mu_q.shape == (3, 3, 4)
        assert (enc.var_q is None) == (not spec.probabilistic)
        assert (enc.coord_grid is not None) == spec.coord_loss
    # the grid diagonal reproduces the matched query exactly
    p = init_encoder(cfg, np.random.default_rng(0))
    with_grid = encode_batch(p, FULL, x, x[::-1], x)
    without = encode_batch(p, FULL, x, x[::-1], x, coord_grid=False)
    np.testing.assert_array_equal(with_grid.mu_q.data, without.mu_q.data)
    np.testing.assert_array_equal(np.diag(with_grid.coord_grid.data), without.var_m.data.mean(axis=(1, 2)))
