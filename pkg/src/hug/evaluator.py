"""Retrieval metrics, the dynamic-vs-static fusion bound check, and
uncertainty probes."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata, spearmanr

from .encoder import SOURCES, encode_batch, encode_gallery
from .gaussian import FineGrainedGaussian
from .modes import FULL, ModeSpec
from .synthdata import TripletSet

RECALL_KS = (1, 5, 10, 50)
SUBSET_KS = (1, 2, 3)
SUBSET_SIZE = 6


# ---------------------------------------------------------------------------
# retrieval metrics


def recall_at_k(rankings: Sequence[Sequence], ground_truth: Sequence, k: int) -> float:
    """Fraction of queries whose ground-truth id is within the first ``k`` of its ranking."""
    if len(rankings) != len(ground_truth):
        raise ValueError("one ranking per query is required")
    if len(rankings) == 0:
        raise ValueError("no queries")
    hits = 0
    missing = []
    for q, (ranked, gt) in enumerate(zip(rankings, ground_truth)):
        ranked = list(ranked)
        if gt not in ranked:
            missing.append(q)
            continue
        hits += ranked.index(gt) < k
    if missing:
        raise ValueError(f"ground truth missing from the ranking of queries {missing}")
    return hits / len(rankings)


def target_ranks(dist: np.ndarray, target: np.ndarray) -> np.ndarray:
    """0-based rank of each target under a stable ascending sort of its row."""
    order = np.argsort(dist, axis=1, kind="stable")
    return np.argmax(order == np.asarray(target)[:, None], axis=1)


def build_subsets(gallery_feats: np.ndarray, target_index: np.ndarray) -> np.ndarray:
    """Each target plus its 5 nearest gallery neighbours in clean feature space."""
    t = gallery_feats[target_index]
    d = np.sum((t[:, None, :] - gallery_feats[None]) ** 2, axis=-1)
    d[np.arange(len(target_index)), target_index] = -np.inf  # target first
    return np.argsort(d, axis=1, kind="stable")[:, :SUBSET_SIZE]


def subset_recall_at_k(dist: np.ndarray, subsets: np.ndarray, target_index: np.ndarray, k: int) -> float:
    """Recall@k when each query only ranks its own 6-candidate subset."""
    subsets = np.asarray(subsets)
    if subsets.ndim != 2 or subsets.shape[1] != SUBSET_SIZE:
        raise ValueError(f"subsets must have exactly {SUBSET_SIZE} candidates, got shape {subsets.shape}")
    for row, (s, t) in enumerate(zip(subsets, target_index)):
        if t not in s or len(set(s.tolist())) != SUBSET_SIZE:
            raise ValueError(f"subset {row} is malformed")
    sub_d = np.take_along_axis(dist, subsets, axis=1)
    pos = np.argmax(subsets == np.asarray(target_index)[:, None], axis=1)
    return float(np.mean(target_ranks(sub_d, pos) < k))


@dataclass
class EncodedSet:
    mu_q: np.ndarray
    var_q: np.ndarray
    mu_g: np.ndarray
    var_g: np.ndarray
    var_r: np.ndarray | None = None
    var_t: np.ndarray | None = None
    var_m: np.ndarray | None = None
    weights: np.ndarray | None = None


def encode_set(params: Mapping, spec: ModeSpec, data: TripletSet, chunk: int = 256) -> EncodedSet:
    parts: dict[str, list] = {k: [] for k in ("mu_q", "var_q", "var_r", "var_t", "var_m", "weights")}
    for s in range(0, len(data), chunk):
        sl = slice(s, s + chunk)
        enc = encode_batch(params, spec, data.x_r[sl], data.x_t[sl], None, coord_grid=False)
        parts["mu_q"].append(enc.mu_q.data)
        parts["var_q"].append(enc.var_q.data if enc.var_q is not None else np.zeros_like(enc.mu_q.data))
        for name in ("var_r", "var_t", "var_m", "weights"):
            t = getattr(enc, name)
            parts[name].append(None if t is None else t.data)
    mu_g, var_g = encode_gallery(params, spec, data.gallery)

    def cat(name):
        xs = parts[name]
        return None if xs[0] is None else np.concatenate(xs)

    return EncodedSet(cat("mu_q"), cat("var_q"), mu_g, var_g,
                      cat("var_r"), cat("var_t"), cat("var_m"), cat("weights"))


def retrieval_distances(enc: EncodedSet) -> np.ndarray:
    """Query-by-gallery holistic distances."""
    n, m = enc.mu_q.shape[0], enc.mu_g.shape[0]
    fq = enc.mu_q.reshape(n, -1)
    fg = enc.mu_g.reshape(m, -1)
    mean_term = (fq * fq).sum(1)[:, None] + (fg * fg).sum(1)[None, :] - 2.0 * fq @ fg.T
    return mean_term + enc.var_q.reshape(n, -1).sum(1)[:, None] + enc.var_g.reshape(m, -1).sum(1)[None, :]


def evaluate_retrieval(params: Mapping, spec: ModeSpec, data: TripletSet) -> dict[str, float]:
    enc = encode_set(params, spec, data)
    dist = retrieval_distances(enc)
    ranks = target_ranks(dist, data.target_index)
    out = {f"R@{k}": float(np.mean(ranks < k)) for k in RECALL_KS}
    subsets = build_subsets(data.gallery, data.target_index)
    for k in SUBSET_KS:
        out[f"Rsubset@{k}"] = subset_recall_at_k(dist, subsets, data.target_index, k)
    out["recall_avg"] = float(np.mean([out["R@1"], out["R@5"], out["R@10"]]))
    return out


# ---------------------------------------------------------------------------
# bound check


@dataclass
class BoundReport:
    mean_weight: dict[str, float]
    mean_loss: dict[str, float]
    cov: dict[str, float]
    pearson: dict[str, float]
    rhs_dynamic: float
    rhs_static: float
    identity_residual: float
    convexity_ok: bool
    cov_sum_negative: bool
    matched_expectation: bool
    n_elements: int
    notes: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return asdict(self)


def softplus_probe(a: float, b: float):
    def loss(var):
        return np.logaddexp(0.0, a * np.asarray(var) + b)
    return loss


def bound_terms(weights: np.ndarray, var: np.ndarray, loss_fn) -> BoundReport:
    """Bound ingredients from per-element weights and variances.

    ``weights`` and ``var`` have a trailing axis of size 3 ordered (r, t, m);
    all leading axes are pooled as samples.
    """
    w = weights.reshape(-1, 3)
    v = var.reshape(-1, 3)
    ell = loss_fn(v)
    mean_w, mean_l, cov, rho = {}, {}, {}, {}
    residual = 0.0
    for j, x in enumerate(SOURCES):
        wx, lx = w[:, j], ell[:, j]
        ew, el = float(wx.mean()), float(lx.mean())
        c = float(np.mean((wx - ew) * (lx - el)))
        residual = max(residual, abs(float(np.mean(wx * lx)) - ew * el - c))
        sw, sl = wx.std(), lx.std()
        mean_w[x], mean_l[x], cov[x] = ew, el, c
        rho[x] = float(c / (sw * sl)) if sw > 0 and sl > 0 else 0.0
    rhs_dyn = sum(mean_w[x] * mean_l[x] + cov[x] for x in SOURCES)
    # static weights matched to E[w_dyn]: same first term, zero covariance
    rhs_static = sum(mean_w[x] * mean_l[x] for x in SOURCES)
    return BoundReport(
        mean_weight=mean_w, mean_loss=mean_l, cov=cov, pearson=rho,
        rhs_dynamic=rhs_dyn, rhs_static=rhs_static, identity_residual=residual,
        convexity_ok=False, cov_sum_negative=sum(cov.values()) < 0,
        matched_expectation=True, n_elements=w.shape[0],
    )


def convexity_probe(loss_fn, var_samples: np.ndarray, n_pairs: int = 1000, seed: int = 0) -> bool:
    """Midpoint convexity test on random pairs drawn from observed variances."""
    rng = np.random.default_rng(seed)
    flat = var_samples.reshape(-1)
    u = rng.choice(flat, n_pairs)
    v = rng.choice(flat, n_pairs)
    lhs = loss_fn(0.5 * (u + v))
    rhs = 0.5 * (loss_fn(u) + loss_fn(v))
    return bool(np.all(lhs <= rhs + 1e-12 * np.maximum(1.0, np.abs(rhs))))


def check_bound(params: Mapping, data: TripletSet, min_samples: int = 100, seed: int = 0) -> BoundReport:
    """Compare the dynamic-fusion bound terms against matched static fusion."""
    if len(data) < min_samples:
        raise ValueError(f"bound check needs at least {min_samples} samples, got {len(data)}")
    enc = encode_set(params, FULL, data)
    var = np.stack([enc.var_r, enc.var_t, enc.var_m], axis=-1)
    loss_fn = softplus_probe(float(params["loss.a"]), float(params["loss.b"]))
    report = bound_terms(enc.weights, var, loss_fn)
    report.convexity_ok = convexity_probe(loss_fn, var, seed=seed)
    if float(params["loss.a"]) < 0:
        report.notes.append("loss scale a < 0: probe loss decreases with variance")
    return report


# ---------------------------------------------------------------------------
# interpretability probes


def overall_uncertainty(g: FineGrainedGaussian | np.ndarray) -> float | np.ndarray:
    """Mean over components of the summed variance; batched for (N, K, D) arrays."""
    var = g.var if isinstance(g, FineGrainedGaussian) else np.asarray(g)
    return var.sum(axis=-1).mean(axis=-1)


def ranking_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability that a positive outscores a negative (ties count one half)."""
    labels = np.asarray(labels, dtype=bool)
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    r = rankdata(scores)
    return float((r[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _spearman(x: np.ndarray, y: np.ndarray) -> float:
    if np.all(x == x[0]) or np.all(y == y[0]):
        return float("nan")
    return float(spearmanr(x, y).statistic)


def uncertainty_noise_correlation(params: Mapping, data: TripletSet) -> dict[str, float]:
    """Rank correlations of noise labels with overall uncertainty, and the
    AUC of mean coordination variance for mismatched queries.

    Undefined statistics (constant labels) come back as NaN.
    """
    enc = encode_set(params, FULL, data)
    return {
        "rho_img": _spearman(data.noise_img, overall_uncertainty(enc.var_r)),
        "rho_txt": _spearman(data.noise_txt, overall_uncertainty(enc.var_t)),
        "auc_coord": ranking_auc(enc.var_m.mean(axis=(1, 2)), data.coord_mismatch),
    }


@dataclass
class Exemplars:
    component: int
    top: list[int]
    bottom: list[int]
    top_labels: list[dict]
    bottom_labels: list[dict]
    truncated: bool = False


def component_exemplars(params: Mapping, data: TripletSet, component: int, count: int,
                        spec: ModeSpec = FULL, var_r: np.ndarray | None = None) -> Exemplars:
    """Highest/lowest reference-image variance at one component.

    Instances in the top decile of overall uncertainty are excluded first.
    ``var_r`` may be passed to reuse an existing encoding.
    """
    if var_r is None:
        var_r = encode_set(params, spec, data).var_r
    K = var_r.shape[1]
    if not 0 <= component < K:
        raise ValueError(f"component {component} out of range 0..{K - 1}")
    overall = overall_uncertainty(var_r)
    keep = np.flatnonzero(overall <= np.quantile(overall, 0.9))
    score = var_r[keep, component].sum(axis=-1)
    order = keep[np.argsort(score, kind="stable")]
    truncated = 2 * count > len(order)
    c = min(count, len(order) // 2) if truncated else count
    top = order[::-1][:c].tolist() if c else []
    bottom = order[:c].tolist() if c else []
    return Exemplars(component, top, bottom, [data.label_record(i) for i in top],
                     [data.label_record(i) for i in bottom], truncated)
