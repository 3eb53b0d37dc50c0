"""Training objectives: holistic sigmoid contrast, coordination ranking,
fine-grained variance contrast, and their weighted total."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import BatchEncodings
from .gaussian import pairwise_holistic_distance
from .modes import COMPONENT, INSTANCE, MODALITY

log = logging.getLogger(__name__)

SIDE_Q, SIDE_C = 0, 1


def init_loss_scalars() -> dict[str, np.ndarray]:
    return {
        "loss.a": np.array(1.0),
        "loss.b": np.array(0.0),
        "loss.a_fc": np.array(1.0),
        "loss.b_fc": np.array(0.0),
    }


def _neg_log_sigmoid(x) -> Tensor:
    # -log S(x) == softplus(-x)
    return ad.softplus(ad.scale(x, -1.0))


def _offdiag_mask(B: int) -> np.ndarray:
    return 1.0 - np.eye(B)


def holistic_contrast_loss(batch: BatchEncodings, a, b) -> Tensor:
    """Sigmoid contrast over the uncertainty-aware distance.

    Positives contribute mean(-log S(-a d - b)); each of the two directions
    contributes B * mean over the B(B-1) mismatched pairs of -log S(a d + b).
    """
    B = batch.batch_size
    if B < 2:
        raise ValueError("holistic contrast needs a batch of at least 2")
    var_q = batch.var_q if batch.var_q is not None else np.zeros(batch.mu_q.shape)
    var_c = batch.var_c if batch.var_c is not None else np.zeros(batch.mu_c.shape)
    d = pairwise_holistic_distance(batch.mu_q, var_q, batch.mu_c, var_c)
    return holistic_contrast_from_distances(d, a, b)


def holistic_contrast_from_distances(d, a, b) -> Tensor:
    d = ad.as_tensor(d)
    B = d.shape[0]
    logits = ad.add(ad.mul(d, a), b)  # a*d + b
    eye, off = np.eye(B), _offdiag_mask(B)
    pos = ad.scale(ad.sum_(ad.mul(ad.softplus(logits), eye)), 1.0 / B)
    neg_terms = ad.mul(_neg_log_sigmoid(logits), off)
    # both directions enumerate the same mismatched (query, target) pairs
    neg_mean = ad.scale(ad.sum_(neg_terms), 1.0 / (B * (B - 1)))
    return ad.add(pos, ad.scale(neg_mean, 2.0 * B))


def infonce_loss(batch: BatchEncodings, inv_temp) -> Tensor:
    """Symmetric temperature-softmax contrast on point distances (baseline row 0)."""
    B = batch.batch_size
    if B < 2:
        raise ValueError("InfoNCE needs a batch of at least 2")
    zeros = np.zeros(batch.mu_q.shape)
    d = pairwise_holistic_distance(batch.mu_q, zeros, batch.mu_c, np.zeros(batch.mu_c.shape))
    logits = ad.scale(ad.mul(d, inv_temp), -1.0)
    eye = np.eye(B)
    diag = ad.sum_(ad.mul(logits, eye), axis=1)

    def lse(x: Tensor, axis: int) -> Tensor:
        shift = np.max(x.data, axis=axis, keepdims=True)  # constant; cancels in the gradient
        return ad.add(ad.log(ad.sum_(ad.exp(ad.sub(x, shift)), axis=axis)), np.squeeze(shift, axis))

    rows = ad.mean(ad.sub(lse(logits, 1), diag))
    cols = ad.mean(ad.sub(lse(logits, 0), diag))
    return ad.scale(ad.add(rows, cols), 0.5)


def coordination_loss(coord_grid, sign: str = "intent") -> Tensor:
    """Ranking loss on mean coordination variance.

    ``coord_grid[i, j]`` is the mean coordination variance of reference i with
    text j.  With ``sign="intent"`` each term is -log S(grid[i, j] - grid[i, i]),
    pushing matched pairs below mismatched ones; ``sign="printed"`` flips the
    argument.
    """
    g = ad.as_tensor(coord_grid)
    B = g.shape[0]
    if B < 2:
        raise ValueError("coordination loss needs a batch of at least 2")
    matched = ad.reshape(ad.sum_(ad.mul(g, np.eye(B)), axis=1), (B, 1))
    if sign == "intent":
        diff = ad.sub(g, matched)
    elif sign == "printed":
        diff = ad.sub(matched, g)
    else:
        raise ValueError(f"cord_sign must be 'intent' or 'printed', got {sign!r}")
    terms = ad.mul(_neg_log_sigmoid(diff), _offdiag_mask(B))
    return ad.scale(ad.sum_(terms), 1.0 / (B * (B - 1)))


# ---------------------------------------------------------------------------
# fine-grained negatives


@dataclass(frozen=True)
class SamplerConfig:
    """Per-strategy negative counts; ``None`` means the documented default.

    Defaults: component-wise K-1, instance-wise 2(B-1), modality-wise 2B.
    """

    strategies: tuple[str, ...] = (COMPONENT, INSTANCE, MODALITY)
    n_component: int | None = None
    n_instance: int | None = None
    n_modality: int | None = None

    def counts(self, B: int, K: int) -> dict[str, int]:
        defaults = {COMPONENT: K - 1, INSTANCE: 2 * (B - 1), MODALITY: 2 * B}
        given = {COMPONENT: self.n_component, INSTANCE: self.n_instance, MODALITY: self.n_modality}
        return {s: (defaults[s] if given[s] is None else given[s]) for s in self.strategies}


def pool_size(strategy: str, B: int, K: int) -> int:
    return {COMPONENT: K - 1, INSTANCE: (B - 1) * K, MODALITY: B * K}[strategy]


def _flat(side, n, k, B, K):
    return (side * B + n) * K + k


def _choose_without_replacement(rng: np.random.Generator, pool: int, count: int, n_rows: int) -> np.ndarray:
    """``n_rows`` independent uniform subsets of size ``count`` from range(pool).

    Each row keeps the ``count`` smallest of ``pool`` i.i.d. uniform keys.
    """
    keys = rng.random((n_rows, pool))
    if count >= pool:
        return np.argsort(keys, axis=1)
    return np.argpartition(keys, count - 1, axis=1)[:, :count]


def _pool_to_triplets(strategy: str, slot: np.ndarray, side, n, k, B: int, K: int):
    """Map pool-local indices to (side, instance, component) for each anchor row."""
    side = np.broadcast_to(side, slot.shape)
    n = np.broadcast_to(n, slot.shape)
    k = np.broadcast_to(k, slot.shape)
    if strategy == COMPONENT:
        kk = slot + (slot >= k)
        return side, n, kk
    if strategy == INSTANCE:
        nn, kk = np.divmod(slot, K)
        nn = nn + (nn >= n)
        return side, nn, kk
    nn, kk = np.divmod(slot, K)
    return 1 - side, nn, kk


def sample_fine_grained_negatives(
    anchor: tuple[int, int, int],
    strategy: str,
    rng: np.random.Generator,
    count: int,
    batch_size: int,
    n_components: int,
) -> list[tuple[int, int, int]]:
    """Negatives (side, instance, component) for one anchor under one strategy.

    Sides are 0 for queries and 1 for targets.  An empty pool yields an empty
    list (logged); a count larger than the pool returns the whole pool.
    """
    side, n, k = anchor
    B, K = batch_size, n_components
    size = pool_size(strategy, B, K)
    if size == 0:
        log.info("%s-wise negative pool is empty (B=%d, K=%d)", strategy, B, K)
        return []
    count = min(count, size)
    slot = _choose_without_replacement(rng, size, count, 1)[0]
    s, nn, kk = _pool_to_triplets(strategy, slot, side, n, k, B, K)
    return [(int(a), int(b), int(c)) for a, b, c in zip(s, nn, kk)]


def sample_all_negatives(rng: np.random.Generator, B: int, K: int, cfg: SamplerConfig):
    """Vectorised sampling for every anchor of a batch.

    Returns ``(anchor_idx, neg_idx, counts)``: flat indices into the stacked
    (2, B, K) component array for every anchor-negative pair, and the number
    of negatives each anchor received.
    """
    side, n, k = np.meshgrid(np.arange(2), np.arange(B), np.arange(K), indexing="ij")
    side, n, k = side.reshape(-1, 1), n.reshape(-1, 1), k.reshape(-1, 1)
    n_anchor = side.shape[0]
    anchors, negs = [], []
    per_anchor = np.zeros(n_anchor, dtype=np.intp)
    for strategy, count in cfg.counts(B, K).items():
        size = pool_size(strategy, B, K)
        if size == 0 or count <= 0:
            if size == 0:
                log.info("%s-wise negative pool is empty (B=%d, K=%d)", strategy, B, K)
            continue
        count = min(count, size)
        if count == size:
            slot = np.broadcast_to(np.arange(size), (n_anchor, size))
        else:
            slot = _choose_without_replacement(rng, size, count, n_anchor)
        s, nn, kk = _pool_to_triplets(strategy, slot, side, n, k, B, K)
        negs.append(_flat(s, nn, kk, B, K).reshape(-1))
        anchors.append(np.broadcast_to(_flat(side, n, k, B, K), slot.shape).reshape(-1))
        per_anchor += count
    if not negs:
        raise ValueError("every fine-grained negative pool is empty")
    return np.concatenate(anchors), np.concatenate(negs), per_anchor


def fine_grained_contrast_loss(var_q, var_c, a_fc, b_fc, sampler: SamplerConfig,
                               rng: np.random.Generator) -> Tensor:
    """Mean over anchors of the mean over sampled negatives of
    -log S(a' ||var_anchor - var_neg||^2 + b')."""
    var_q, var_c = ad.as_tensor(var_q), ad.as_tensor(var_c)
    B, K, D = var_q.shape
    anchor_idx, neg_idx, per_anchor = sample_all_negatives(rng, B, K, sampler)
    stacked = ad.reshape(ad.concat([var_q, var_c], axis=0), (2 * B * K, D))
    # explicit differences (no Gram expansion) keep round-off small for gradient checks
    pair_d = ad.pair_sqdist(stacked, anchor_idx, neg_idx)
    terms = _neg_log_sigmoid(ad.add(ad.mul(pair_d, a_fc), b_fc))
    # weight each pair by 1/(its anchor's count) then average anchors with negatives
    has_neg = per_anchor > 0
    w = 1.0 / (per_anchor[anchor_idx] * has_neg.sum())
    return ad.sum_(ad.mul(terms, w))


def fine_grained_contrast_bruteforce(var_q: np.ndarray, var_c: np.ndarray, a_fc: float, b_fc: float,
                                     strategies=(COMPONENT, INSTANCE, MODALITY)) -> float:
    """Exhaustive-pool loop version, used as an independent check."""
    B, K, _ = var_q.shape
    fields = (var_q, var_c)
    total, n_anchor = 0.0, 0
    for side in (0, 1):
        for n in range(B):
            for k in range(K):
                terms = []
                for s2 in (0, 1):
                    for n2 in range(B):
                        for k2 in range(K):
                            if s2 == side and n2 == n and k2 == k:
                                continue
                            if s2 == side and n2 == n:
                                kind = COMPONENT
                            elif s2 == side:
                                kind = INSTANCE
                            else:
                                kind = MODALITY
                            if kind not in strategies:
                                continue
                            diff = fields[side][n, k] - fields[s2][n2, k2]
                            x = a_fc * float(diff @ diff) + b_fc
                            terms.append(np.logaddexp(0.0, -x))
                if terms:
                    total += sum(terms) / len(terms)
                    n_anchor += 1
    return total / n_anchor


# ---------------------------------------------------------------------------
# total


@dataclass
class LossBreakdown:
    total: Tensor
    hc: float
    fc: float
    cord: float
    terms: dict[str, float] = field(default_factory=dict)


def total_loss(batch: BatchEncodings, scalars: Mapping, lambda_fc: float, lambda_cord: float,
               sampler: SamplerConfig | None, rng: np.random.Generator | None,
               cord_sign: str = "intent") -> LossBreakdown:
    """L_HC + lambda_fc * L_FC + lambda_cord * L_Cord.

    A term is skipped (reported as 0) when its weight is zero, the sampler is
    None, or the batch carries no coordination grid.
    """
    hc = holistic_contrast_loss(batch, scalars["loss.a"], scalars["loss.b"])
    total = hc
    fc_val = cord_val = 0.0
    if lambda_fc != 0.0 and sampler is not None and sampler.strategies:
        fc = fine_grained_contrast_loss(batch.var_q, batch.var_c, scalars["loss.a_fc"],
                                        scalars["loss.b_fc"], sampler, rng)
        fc_val = float(fc.data)
        total = ad.add(total, ad.scale(fc, lambda_fc))
    if lambda_cord != 0.0 and batch.coord_grid is not None:
        cord = coordination_loss(batch.coord_grid, cord_sign)
        cord_val = float(cord.data)
        total = ad.add(total, ad.scale(cord, lambda_cord))
    return LossBreakdown(total, float(hc.data), fc_val, cord_val)
