import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hug import autodiff as ad
from hug.gaussian import (FineGrainedGaussian, GalleryEntry, distance_matrix, expected_sq_distance,
                          holistic_distance, mc_expected_sq_distance, pairwise_holistic_distance, rank_gallery)


def test_expected_distance_examples():
    assert expected_sq_distance((np.zeros(3), np.zeros(3)), (np.zeros(3), np.zeros(3))) == 0.0
    assert expected_sq_distance(([0.0], [1.0]), ([3.0], [2.0])) == 12.0
    with pytest.raises(ValueError):
        expected_sq_distance((np.zeros(2), np.zeros(2)), (np.zeros(3), np.zeros(3)))


def test_mc_degenerate_and_deterministic():
    g1, g2 = (np.array([1.0, 2.0]), np.zeros(2)), (np.array([0.0, 0.0]), np.zeros(2))
    est, se = mc_expected_sq_distance(g1, g2, 10, seed=0)
    assert est == 5.0 and se == 0.0
    rng = np.random.default_rng(0)
    g3 = (rng.standard_normal(2), rng.random(2))
    assert mc_expected_sq_distance(g1, g3, 1000, 7) == mc_expected_sq_distance(g1, g3, 1000, 7)


def test_mc_agrees_with_closed_form_d4():
    ok = 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        g1 = (rng.standard_normal(4), rng.random(4))
        g2 = (rng.standard_normal(4), rng.random(4))
        est, se = mc_expected_sq_distance(g1, g2, 20_000, seed=10_000 + trial)
        ok += abs(est - expected_sq_distance(g1, g2)) <= 3 * se
    assert ok >= 99


def test_holistic_examples():
    q = FineGrainedGaussian(np.zeros((2, 1)), np.full((2, 1), 0.5))
    c = FineGrainedGaussian(np.array([[1.0], [2.0]]), np.full((2, 1), 0.5))
    assert holistic_distance(q, c) == 7.0
    z = FineGrainedGaussian(np.ones((2, 3)), np.zeros((2, 3)))
    assert holistic_distance(z, z) == 0.0


def test_holistic_is_sum_of_components(rng):
    q = FineGrainedGaussian(rng.standard_normal((5, 3)), rng.random((5, 3)))
    c = FineGrainedGaussian(rng.standard_normal((5, 3)), rng.random((5, 3)))
    per = sum(expected_sq_distance(q.component(k), c.component(k)) for k in range(5))
    assert abs(holistic_distance(q, c) - per) <= 1e-12


def test_gaussian_validation():
    with pytest.raises(ValueError):
        FineGrainedGaussian(np.zeros((2, 3)), -np.ones((2, 3)))
    with pytest.raises(ValueError):
        FineGrainedGaussian(np.zeros((2, 3)), np.ones((3, 2)))
    with pytest.raises(ValueError):
        holistic_distance(FineGrainedGaussian(np.zeros((2, 3)), np.zeros((2, 3))),
                          FineGrainedGaussian(np.zeros((3, 3)), np.zeros((3, 3))))


def test_pairwise_matches_explicit(rng):
    mq, vq = rng.standard_normal((4, 3, 2)), rng.random((4, 3, 2))
    mc, vc = rng.standard_normal((5, 3, 2)), rng.random((5, 3, 2))
    d = pairwise_holistic_distance(mq, vq, mc, vc).data
    ref = np.array([[holistic_distance(FineGrainedGaussian(mq[i], vq[i]), FineGrainedGaussian(mc[j], vc[j]))
                     for j in range(5)] for i in range(4)])
    np.testing.assert_allclose(d, ref, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(distance_matrix(mq, vq, mc, vc), ref, rtol=1e-12, atol=1e-12)


def test_distance_gradient_wrt_query_mean(rng):
    mc, vq, vc = rng.standard_normal((3, 4)), rng.random((3, 4)), rng.random((3, 4))

    def f(tape, P):
        d = pairwise_holistic_distance(ad.reshape(P["mu_q"], (1, 3, 4)), vq[None], mc[None], vc[None])
        return ad.sum_(d)

    assert ad.grad_check(f, {"mu_q": rng.standard_normal((3, 4))}, 1e-5) < 1e-6


def _gallery(rng, n, K=3, D=2):
    return [GalleryEntry(f"g{i}", FineGrainedGaussian(rng.standard_normal((K, D)), rng.random((K, D))))
            for i in range(n)]


def test_rank_self_first(rng):
    q = FineGrainedGaussian(rng.standard_normal((3, 2)), np.zeros((3, 2)))
    gallery = _gallery(rng, 6) + [GalleryEntry("self", FineGrainedGaussian(q.mu, np.zeros((3, 2))))]
    assert rank_gallery(q, gallery)[0] == "self"


def test_rank_matches_bruteforce(rng):
    q = FineGrainedGaussian(rng.standard_normal((3, 2)), rng.random((3, 2)))
    gallery = _gallery(rng, 10)
    dist = {e.id: holistic_distance(q, e.gaussian) for e in gallery}
    order = rank_gallery(q, gallery)
    for i, a in enumerate(order):
        for b in order[i + 1:]:
            assert dist[a] <= dist[b]


def test_rank_ties_keep_insertion_order():
    g = FineGrainedGaussian(np.zeros((1, 1)), np.zeros((1, 1)))
    gallery = [GalleryEntry(i, g) for i in ("b", "a", "c")]
    assert rank_gallery(g, gallery) == ["b", "a", "c"]


def test_rank_errors(rng):
    q = FineGrainedGaussian(np.zeros((3, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        rank_gallery(q, [])
    g = _gallery(rng, 2)
    with pytest.raises(ValueError):
        rank_gallery(q, [g[0], GalleryEntry(g[0].id, g[1].gaussian)])


# magnitudes whose square underflows to 0 would break "= 0 iff identical" in floating point
finite = st.floats(-10, 10, allow_nan=False).filter(lambda x: x == 0 or abs(x) > 1e-150)
nonneg = st.floats(0, 10, allow_nan=False, allow_subnormal=False)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=nonneg),
       arrays(np.float64, 5, elements=finite), arrays(np.float64, 5, elements=nonneg))
def test_distance_properties(m1, v1, m2, v2):
    d12 = expected_sq_distance((m1, v1), (m2, v2))
    assert d12 >= 0
    assert d12 == expected_sq_distance((m2, v2), (m1, v1))
    if d12 == 0:
        assert np.array_equal(m1, m2) and not v1.any() and not v2.any()


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 100, allow_nan=False))
def test_var_c_monotone_in_rank(seed, bump):
    rng = np.random.default_rng(seed)
    q = FineGrainedGaussian(rng.standard_normal((2, 2)), rng.random((2, 2)))
    gallery = _gallery(rng, 5, K=2)
    before = rank_gallery(q, gallery).index("g2")
    var = gallery[2].gaussian.var.copy()
    var[0, 0] += bump
    gallery[2] = GalleryEntry("g2", FineGrainedGaussian(gallery[2].gaussian.mu, var))
    assert rank_gallery(q, gallery).index("g2") >= before
