"""Cross-attention composer, variance heads and uncertainty fusion.

Parameters live in a flat ``dict`` keyed ``"<group>.<name>"``; every forward
function accepts either numpy arrays (plain evaluation) or tape tensors
(differentiable evaluation).  Batched inputs are (B, d) feature matrices and
outputs are (B, K, D).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gaussian import FineGrainedGaussian
from .modes import ModeSpec

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
SOURCES = ("r", "t", "m")


@dataclass(frozen=True)
class ModelConfig:
    n_components: int = 32
    dim: int = 16
    hidden: int = 32
    d_txt: int = 32
    d_img: int = 32


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_composer(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    K, D, H = cfg.n_components, cfg.dim, cfg.hidden
    return {
        "composer.x_lq": 0.02 * rng.standard_normal((K, D)),
        "composer.proj_txt": _uniform(rng, cfg.d_txt, (cfg.d_txt, D)),
        "composer.proj_img": _uniform(rng, cfg.d_img, (cfg.d_img, D)),
        "composer.wq": _uniform(rng, D, (D, D)),
        "composer.wk": _uniform(rng, D, (D, D)),
        "composer.wv": _uniform(rng, D, (D, D)),
        "composer.ff_w1": _uniform(rng, D, (D, H)),
        "composer.ff_b1": np.zeros(H),
        "composer.ff_w2": _uniform(rng, H, (H, D)),
        "composer.ff_b2": np.zeros(D),
    }


def init_head(cfg: ModelConfig, rng: np.random.Generator, name: str) -> dict[str, np.ndarray]:
    D, H = cfg.dim, cfg.hidden
    p = f"head_{name}."
    return {
        p + "wq": _uniform(rng, D, (D, D)),
        p + "wk": _uniform(rng, D, (D, D)),
        p + "wv": _uniform(rng, D, (D, D)),
        p + "w1": _uniform(rng, D, (D, H)),
        p + "b1": np.zeros(H),
        p + "w2": _uniform(rng, H, (H, D)),
        p + "b2": np.zeros(D),  # log-variance bias; variance starts near 1
    }


def init_encoder(cfg: ModelConfig, rng: np.random.Generator, heads=("v", "t", "m")) -> dict[str, np.ndarray]:
    params = init_composer(cfg, rng)
    for h in ("v", "t", "m"):
        if h in heads:
            params.update(init_head(cfg, rng, h))
    return params


def head_params(params: Mapping, name: str) -> dict:
    prefix = f"head_{name}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# composer


def project_text(p: Mapping, x_t) -> Tensor:
    return ad.matmul(x_t, p["composer.proj_txt"])


def project_image(p: Mapping, x_img) -> Tensor:
    return ad.matmul(x_img, p["composer.proj_img"])


def attend(p: Mapping, tokens: list[Tensor]) -> Tensor:
    """Learnable queries cross-attend to (B, D) modality tokens, then a tanh FFN."""
    if not tokens:
        raise ValueError("compose needs at least one modality")
    x_lq = ad.as_tensor(p["composer.x_lq"])
    D = x_lq.shape[1]
    B = ad.as_tensor(tokens[0]).shape[0]
    kv = ad.concat([ad.reshape(t, (B, 1, D)) for t in tokens], axis=1)  # (B, M, D)
    keys = ad.matmul(kv, p["composer.wk"])
    values = ad.matmul(kv, p["composer.wv"])
    q = ad.matmul(x_lq, p["composer.wq"])  # (K, D)
    scores = ad.scale(ad.matmul(q, ad.transpose(keys)), 1.0 / np.sqrt(D))  # (B, K, M)
    attn = ad.softmax(scores)
    h = ad.add(x_lq, ad.matmul(attn, values))
    ff = ad.tanh(ad.add(ad.matmul(h, p["composer.ff_w1"]), p["composer.ff_b1"]))
    ff = ad.add(ad.matmul(ff, p["composer.ff_w2"]), p["composer.ff_b2"])
    return ad.add(h, ff)


def compose(p: Mapping, text_feat=None, image_feat=None) -> Tensor:
    """Fine-grained means from whichever modalities are present.

    Accepts single feature vectors (returns K x D) or batches (returns B x K x D).
    """
    if text_feat is None and image_feat is None:
        raise ValueError("compose needs at least one modality")
    present = [x for x in (text_feat, image_feat) if x is not None]
    single = ad.as_tensor(present[0]).ndim == 1
    tokens = []
    if text_feat is not None:
        x = ad.reshape(text_feat, (1, -1)) if single else text_feat
        tokens.append(project_text(p, x))
    if image_feat is not None:
        x = ad.reshape(image_feat, (1, -1)) if single else image_feat
        tokens.append(project_image(p, x))
    out = attend(p, tokens)
    return ad.reshape(out, out.shape[1:]) if single else out


# ---------------------------------------------------------------------------
# uncertainty heads


def estimate_uncertainty(head: Mapping, means) -> Tensor:
    """One self-attention block over the K tokens emitting clamped log-variances.

    ``head`` holds the unprefixed head weights (wq, wk, wv, w1, b1, w2, b2).
    Returns exp(clamp(s, -10, 10)) with the same shape as ``means``.
    """
    m = ad.as_tensor(means)
    D = m.shape[-1]
    q = ad.matmul(m, head["wq"])
    k = ad.matmul(m, head["wk"])
    v = ad.matmul(m, head["wv"])
    attn = ad.softmax(ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(D)))
    h = ad.add(m, ad.matmul(attn, v))
    hidden = ad.tanh(ad.add(ad.matmul(h, head["w1"]), head["b1"]))
    logvar = ad.add(ad.matmul(hidden, head["w2"]), head["b2"])
    return ad.exp(ad.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX))


# ---------------------------------------------------------------------------
# fusion


def fuse_query_uncertainty(var_r, var_t, var_m) -> tuple[Tensor, Tensor]:
    """Element-wise softmax(-variance) weights over {r, t, m} and the fused variance.

    Returns ``(var_q, weights)`` where ``weights`` has a trailing axis of size 3
    ordered (r, t, m).
    """
    for name, v in (("var_r", var_r), ("var_t", var_t), ("var_m", var_m)):
        if np.any(ad.as_tensor(v).data <= 0):
            raise ValueError(f"{name} must be strictly positive")
    stacked = ad.stack_last([var_r, var_t, var_m])
    weights = ad.softmax(ad.scale(stacked, -1.0))
    var_q = ad.sum_(ad.mul(weights, stacked), axis=-1)
    # a dominant source with weights summing to 1 - ulp can land one ulp outside
    # [min, max]; a constant correction restores the bracket and leaves gradients alone
    lo, hi = stacked.data.min(axis=-1), stacked.data.max(axis=-1)
    corr = np.clip(var_q.data, lo, hi) - var_q.data
    if np.any(corr):
        var_q = ad.add(var_q, corr)
    return var_q, weights


def fuse_static(sources: list) -> tuple[Tensor, Tensor]:
    """Uniform-weight fusion (1/len(sources) each)."""
    stacked = ad.stack_last(sources)
    n = len(sources)
    weights = np.full(stacked.shape, 1.0 / n)
    return ad.scale(ad.sum_(stacked, axis=-1), 1.0 / n), ad.as_tensor(weights)


def pool_variance(var) -> Tensor:
    """Replace a (B, K, D) field by its per-instance mean, broadcast back."""
    var = ad.as_tensor(var)
    B = var.shape[0]
    m = ad.mean(ad.reshape(var, (B, -1)), axis=1)
    ones = np.ones(var.shape)
    return ad.mul(ad.reshape(m, (B, 1, 1)), ones)


# ---------------------------------------------------------------------------
# end-to-end encoders


@dataclass(frozen=True)
class QueryUncertaintyBundle:
    var_r: np.ndarray
    var_t: np.ndarray
    var_m: np.ndarray
    weights: np.ndarray
    var_q: np.ndarray
    mean_coord_uncertainty: float


def encode_query(model: Mapping, x_r, x_t) -> tuple[FineGrainedGaussian, QueryUncertaintyBundle]:
    """Full heterogeneous query encoding for one (reference, text) pair."""
    x_r = np.asarray(x_r, dtype=np.float64)
    x_t = np.asarray(x_t, dtype=np.float64)
    mu_q = compose(model, x_t, x_r)
    var_r = estimate_uncertainty(head_params(model, "v"), compose(model, None, x_r))
    var_t = estimate_uncertainty(head_params(model, "t"), compose(model, x_t, None))
    var_m = estimate_uncertainty(head_params(model, "m"), mu_q)
    var_q, weights = fuse_query_uncertainty(var_r, var_t, var_m)
    bundle = QueryUncertaintyBundle(
        var_r=var_r.data, var_t=var_t.data, var_m=var_m.data, weights=weights.data,
        var_q=var_q.data, mean_coord_uncertainty=float(var_m.data.mean()),
    )
    return FineGrainedGaussian(mu_q.data, var_q.data), bundle


def encode_target(model: Mapping, x_c) -> FineGrainedGaussian:
    mu_c = compose(model, None, np.asarray(x_c, dtype=np.float64))
    var_c = estimate_uncertainty(head_params(model, "v"), mu_c)
    return FineGrainedGaussian(mu_c.data, var_c.data)


@dataclass
class BatchEncodings:
    """Everything the objectives need for one mini-batch, as tensors.

    ``coord_grid[i, j]`` is the mean coordination variance of reference i paired
    with text j; the diagonal holds the matched pairs.
    """

    mu_q: Tensor
    var_q: Tensor | None
    mu_c: Tensor
    var_c: Tensor | None
    var_r: Tensor | None = None
    var_t: Tensor | None = None
    var_m: Tensor | None = None
    weights: Tensor | None = None
    coord_grid: Tensor | None = None

    @property
    def batch_size(self) -> int:
        return self.mu_q.shape[0]


def encode_batch(p: Mapping, spec: ModeSpec, x_r, x_t, x_c, coord_grid: bool | None = None) -> BatchEncodings:
    """Mode-aware encoding of a batch of triplets (``x_c`` may be None)."""
    if coord_grid is None:
        coord_grid = spec.coord_loss
    B = np.shape(x_r)[0]
    tok_r = project_image(p, x_r)
    tok_t = project_text(p, x_t)
    grid = None
    if coord_grid:
        # every (reference i, text j) pair; the matched queries are the diagonal
        ii = np.repeat(np.arange(B), B)
        jj = np.tile(np.arange(B), B)
        mu_grid = attend(p, [ad.slice_(tok_t, jj), ad.slice_(tok_r, ii)])
        diag = np.arange(B) * (B + 1)
        mu_q = ad.slice_(mu_grid, diag)
    else:
        mu_q = attend(p, [tok_t, tok_r])
    mu_c = attend(p, [project_image(p, x_c)]) if x_c is not None else None
    if not spec.probabilistic:
        return BatchEncodings(mu_q, None, mu_c, None)

    head_v = head_params(p, "v")
    var_r = estimate_uncertainty(head_v, attend(p, [tok_r]))
    var_t = estimate_uncertainty(head_params(p, "t"), attend(p, [tok_t]))
    var_c = estimate_uncertainty(head_v, mu_c) if mu_c is not None else None
    var_m = None
    if spec.coord_in_fusion:
        head_m = head_params(p, "m")
        if coord_grid:
            var_m_grid = estimate_uncertainty(head_m, mu_grid)
            K, D = var_m_grid.shape[1:]
            grid = ad.reshape(ad.mean(ad.reshape(var_m_grid, (B * B, K * D)), axis=1), (B, B))
            var_m = ad.slice_(var_m_grid, diag)
        else:
            var_m = estimate_uncertainty(head_m, mu_q)
        if spec.dynamic_weights:
            var_q, weights = fuse_query_uncertainty(var_r, var_t, var_m)
        else:
            var_q, weights = fuse_static([var_r, var_t, var_m])
    else:
        var_q, weights = fuse_static([var_r, var_t])
    if spec.pooled_variance:
        var_q = pool_variance(var_q)
        if var_c is not None:
            var_c = pool_variance(var_c)
    return BatchEncodings(mu_q, var_q, mu_c, var_c, var_r, var_t, var_m, weights, grid)


def encode_gallery(p: Mapping, spec: ModeSpec, x_c) -> tuple[np.ndarray, np.ndarray]:
    """Means and variances of candidate images; zero variance for point models."""
    mu = attend(p, [project_image(p, x_c)])
    if not spec.probabilistic:
        return mu.data, np.zeros_like(mu.data)
    var = estimate_uncertainty(head_params(p, "v"), mu)
    if spec.pooled_variance:
        var = pool_variance(var)
    return mu.data, var.data
