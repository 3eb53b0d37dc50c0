import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hug.encoder import ModelConfig
from hug.evaluator import (SUBSET_SIZE, bound_terms, build_subsets, check_bound, component_exemplars,
                           convexity_probe, evaluate_retrieval, overall_uncertainty, ranking_auc,
                           recall_at_k, softplus_probe, subset_recall_at_k, target_ranks)
from hug.modes import FULL
from hug.synthdata import NoiseConfig, WorldConfig, gen_triplets, gen_world
from hug.trainer import TrainConfig, init_model

TINY = ModelConfig(n_components=4, dim=4, hidden=8, d_txt=8, d_img=8)


def _data(n=120, seed=0):
    world = gen_world(WorldConfig(3, 3, 8, 8), 0)
    return gen_triplets(world, n, NoiseConfig(0.3, 0.5, 0.2, 0.2), seed)


def test_recall_examples():
    assert recall_at_k([[3, 1, 2]], [1], 1) == 0.0
    assert recall_at_k([[3, 1, 2]], [1], 2) == 1.0
    assert recall_at_k([[0, 1], [1, 0]], [0, 0], 1) == 0.5


def test_recall_validation():
    with pytest.raises(ValueError, match="missing"):
        recall_at_k([[1, 2]], [5], 1)
    with pytest.raises(ValueError):
        recall_at_k([], [], 1)
    with pytest.raises(ValueError):
        recall_at_k([[1]], [1, 2], 1)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_target_ranks_match_list_recall(seed):
    rng = np.random.default_rng(seed)
    dist = rng.integers(0, 5, size=(7, 9)).astype(float)  # ties exercised
    target = rng.integers(0, 9, size=7)
    rankings = [np.argsort(row, kind="stable").tolist() for row in dist]
    ranks = target_ranks(dist, target)
    for k in (1, 3, 9):
        assert np.mean(ranks < k) == recall_at_k(rankings, target.tolist(), k)


def test_subset_recall():
    rng = np.random.default_rng(0)
    gallery = rng.standard_normal((30, 5))
    target = rng.integers(0, 30, size=40)
    subsets = build_subsets(gallery, target)
    assert subsets.shape == (40, SUBSET_SIZE)
    assert np.all(subsets[:, 0] == target)
    dist = rng.random((40, 30))
    assert subset_recall_at_k(dist, subsets, target, SUBSET_SIZE) == 1.0
    # random distances give about 1/6 at k = 1
    many = rng.integers(0, 30, size=6000)
    r = subset_recall_at_k(rng.random((6000, 30)), build_subsets(gallery, many), many, 1)
    assert abs(r - 1 / 6) < 0.02
    with pytest.raises(ValueError):
        subset_recall_at_k(dist, subsets[:, :5], target, 1)


def test_evaluate_retrieval_keys_and_range():
    data = _data()
    params = init_model(TINY, TrainConfig(mode=7))
    m = evaluate_retrieval(params, FULL, data)
    assert set(m) == {"R@1", "R@5", "R@10", "R@50", "Rsubset@1", "Rsubset@2", "Rsubset@3", "recall_avg"}
    assert all(0 <= v <= 1 for v in m.values())
    assert m["R@1"] <= m["R@5"] <= m["R@10"] <= m["R@50"]


def test_bound_terms_identity_and_static_case():
    rng = np.random.default_rng(0)
    var = rng.random((500, 4, 3)) + 0.1
    w = np.exp(-var)
    w /= w.sum(-1, keepdims=True)
    rep = bound_terms(w, var, softplus_probe(1.0, -1.0))
    assert rep.identity_residual <= 1e-9
    assert abs(rep.rhs_dynamic - rep.rhs_static - sum(rep.cov.values())) <= 1e-12
    # w decreasing in var and loss increasing in var: negative covariances
    assert all(c < 0 for c in rep.cov.values()) and rep.cov_sum_negative
    same = np.broadcast_to(rng.random((500, 4, 1)) + 0.1, (500, 4, 3))
    ws = np.full_like(same, 1 / 3)
    rep2 = bound_terms(ws, same, softplus_probe(1.0, 0.0))
    assert all(abs(c) <= 1e-15 for c in rep2.cov.values())
    assert abs(rep2.rhs_dynamic - rep2.rhs_static) <= 1e-14


def test_convexity_probe():
    samples = np.linspace(0.01, 3, 100)
    assert convexity_probe(softplus_probe(2.0, -1.0), samples)
    assert not convexity_probe(lambda v: np.sqrt(v), samples)


def test_check_bound_requires_samples():
    data = _data(50)
    params = init_model(TINY, TrainConfig(mode=7))
    with pytest.raises(ValueError, match="at least 100"):
        check_bound(params, data)
    rep = check_bound(params, _data(120))
    assert rep.n_elements == 120 * 4 * 4 and rep.identity_residual <= 1e-9


def test_ranking_auc():
    assert ranking_auc(np.array([1, 2, 3, 4.0]), np.array([0, 0, 1, 1])) == 1.0
    assert ranking_auc(np.array([1, 1, 1.0]), np.array([0, 1, 0])) == 0.5
    assert np.isnan(ranking_auc(np.array([1.0, 2.0]), np.array([1, 1])))
    rng = np.random.default_rng(1)
    assert abs(ranking_auc(rng.random(20000), rng.random(20000) < 0.3) - 0.5) < 0.02


def test_overall_uncertainty():
    v = np.arange(24, dtype=float).reshape(1, 3, 8)
    assert overall_uncertainty(v)[0] == v.sum() / 3


def test_component_exemplars():
    data = _data(120)
    params = init_model(TINY, TrainConfig(mode=7))
    ex = component_exemplars(params, data, 1, 10)
    assert len(ex.top) == len(ex.bottom) == 10 and not set(ex.top) & set(ex.bottom)
    assert ex.top_labels[0] == data.label_record(ex.top[0])
    none = component_exemplars(params, data, 0, 0)
    assert none.top == [] and none.bottom == [] and not none.truncated
    big = component_exemplars(params, data, 0, 500)
    assert big.truncated and len(big.top) == len(big.bottom) and not set(big.top) & set(big.bottom)
    with pytest.raises(ValueError):
        component_exemplars(params, data, 4, 3)
