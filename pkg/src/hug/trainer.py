"""Seeded mini-batch training with AdamW over the ablation ladder."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tape
from .encoder import ModelConfig, encode_batch, init_encoder
from .modes import ModeSpec, get_mode
from .objectives import SamplerConfig, infonce_loss, init_loss_scalars, total_loss
from .synthdata import TripletSet

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient for parameter {name!r}")
        self.name = name


@dataclass
class TrainConfig:
    mode: int = 7
    batch_size: int = 32
    epochs: int = 30
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    weight_decay: float = 1e-4
    lambda_fc: float = 0.5
    lambda_cord: float = 0.1
    cord_sign: str = "intent"
    grad_clip: float = 5.0
    n_comp_neg: int = -1
    n_inst_neg: int = -1
    n_mod_neg: int = -1
    seed: int = 2
    sampler_seed: int = 3
    eval_every_epoch: bool = True

    @property
    def spec(self) -> ModeSpec:
        return get_mode(self.mode)

    def sampler(self) -> SamplerConfig | None:
        spec = self.spec
        if not spec.fc_pools:
            return None

        def opt(x: int) -> int | None:
            return None if x < 0 else x

        return SamplerConfig(spec.fc_pools, opt(self.n_comp_neg), opt(self.n_inst_neg), opt(self.n_mod_neg))


@dataclass
class OptimState:
    lr: float
    beta1: float
    beta2: float
    eps: float
    weight_decay: float
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray], cfg: TrainConfig) -> "OptimState":
        return cls(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay,
                   m={k: np.zeros_like(v) for k, v in params.items()},
                   v={k: np.zeros_like(v) for k, v in params.items()})


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay applies to weight matrices only, not biases, scalars or query tokens."""
    return value.ndim >= 2 and not name.endswith("x_lq")


def adamw_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
               state: OptimState) -> tuple[dict[str, np.ndarray], OptimState]:
    """One bias-corrected Adam update with decoupled weight decay.

    Raises :class:`NonFiniteGradient` (leaving params and state untouched) if
    any gradient entry is NaN or infinite.
    """
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {params[name].shape} for {name}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(name)
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            new[name] = p
            continue
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay and decays(name, p):
            p = p - state.lr * state.weight_decay * p
        new[name] = p - state.lr * update
    return new, state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        grads = {k: g * s for k, g in grads.items()}
    return grads, norm


def init_model(model_cfg: ModelConfig, cfg: TrainConfig) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(cfg.seed)
    params = init_encoder(model_cfg, rng, heads=cfg.spec.heads)
    params.update(init_loss_scalars())
    return params


@dataclass
class StepResult:
    loss: float
    hc: float
    fc: float
    cord: float
    grads: dict[str, np.ndarray]
    mean_weights: list[float] | None


def loss_and_grads(params: Mapping[str, np.ndarray], cfg: TrainConfig, x_r, x_t, x_c,
                   rng: np.random.Generator | None) -> StepResult:
    spec = cfg.spec
    tape = Tape()
    P = tape.params_from(params)
    enc = encode_batch(P, spec, x_r, x_t, x_c)
    weights = None
    if not spec.probabilistic:
        loss = infonce_loss(enc, P["loss.a"])
        hc = fc = cord = 0.0
        hc = float(loss.data)
    else:
        br = total_loss(enc, P, cfg.lambda_fc, cfg.lambda_cord, cfg.sampler(), rng, cfg.cord_sign)
        loss, hc, fc, cord = br.total, br.hc, br.fc, br.cord
        if enc.weights is not None:
            weights = enc.weights.data.reshape(-1, enc.weights.shape[-1]).mean(axis=0).tolist()
    grads = ad.backward(tape, loss)
    return StepResult(float(loss.data), hc, fc, cord, grads, weights)


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    log: list[dict]
    status: str = "ok"
    val_metrics: dict | None = None


def train(cfg: TrainConfig, model_cfg: ModelConfig, data: TripletSet, val: TripletSet | None = None,
          on_record: Callable[[dict], None] | None = None) -> TrainResult:
    """Train one ablation mode; returns the final (or last finite) parameters."""
    from .evaluator import evaluate_retrieval

    if len(data) == 0:
        raise ValueError("training set is empty")
    if cfg.batch_size < 2:
        raise ValueError("batch size must be >= 2")
    spec = cfg.spec
    params = init_model(model_cfg, cfg)
    state = OptimState.for_params(params, cfg)
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    sampler_rng = np.random.default_rng(cfg.sampler_seed)
    records: list[dict] = []

    def emit(rec: dict) -> None:
        records.append(rec)
        if on_record is not None:
            on_record(rec)

    n = len(data)
    step = 0
    val_metrics = None
    for epoch in range(cfg.epochs):
        perm = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            if len(idx) < 2:
                continue
            res = loss_and_grads(params, cfg, data.x_r[idx], data.x_t[idx], data.x_c[idx], sampler_rng)
            if not np.isfinite(res.loss):
                log.error("loss diverged at step %d; keeping last finite parameters", step)
                emit({"step": step, "epoch": epoch, "event": "diverged"})
                return TrainResult(params, records, "diverged", val_metrics)
            grads, gnorm = clip_global_norm(res.grads, cfg.grad_clip)
            try:
                params, state = adamw_step(params, grads, state)
            except NonFiniteGradient as exc:
                log.warning("step %d rejected: %s", step, exc)
                emit({"step": step, "epoch": epoch, "event": "rejected", "param": exc.name})
                step += 1
                continue
            rec = {"step": step, "epoch": epoch, "L_HC": res.hc, "L_FC": res.fc, "L_Cord": res.cord,
                   "total": res.loss, "grad_norm": gnorm}
            if res.mean_weights is not None:
                rec["mean_weights"] = dict(zip(("r", "t", "m"), res.mean_weights))
            emit(rec)
            step += 1
        if val is not None and (cfg.eval_every_epoch or epoch == cfg.epochs - 1):
            val_metrics = evaluate_retrieval(params, spec, val)
            emit({"epoch": epoch, "event": "validation", **val_metrics})
    return TrainResult(params, records, "ok", val_metrics)


# ---------------------------------------------------------------------------
# gradient fidelity


LOSS_TERMS = ("L_HC", "L_FC", "L_Cord", "total")


def random_check_model(model_cfg: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Full-mode parameters with randomised biases and scalars.

    Log-variance biases are centred at -2 so every loss term sits in its
    non-saturated range and no log-variance touches the clamp.  Query/key
    maps and learnable queries are scaled up so attention scores are O(1)
    rather than nearly uniform, which exercises the softmax paths.
    """
    rng = np.random.default_rng(seed)
    params = init_model(model_cfg, TrainConfig(mode=7, seed=seed))
    for name, v in params.items():
        if name.endswith((".wq", ".wk")):
            params[name] = 4.0 * v
        elif name == "composer.x_lq":
            params[name] = 0.5 * rng.standard_normal(v.shape)
        elif name.endswith(".b2") and name.startswith("head_"):
            params[name] = -2.0 + 0.3 * rng.standard_normal(v.shape)
        elif name.endswith(("b1", "b2")):
            params[name] = 0.1 * rng.standard_normal(v.shape)
    params["loss.a"] = np.array(0.5 + rng.random())
    params["loss.b"] = np.array(-1.0 + 0.2 * rng.standard_normal())
    params["loss.a_fc"] = np.array(0.5 + rng.random())
    params["loss.b_fc"] = np.array(0.1 * rng.standard_normal())
    return params


def check_loss_gradients(model_cfg: ModelConfig, seed: int = 0, batch_size: int = 2,
                         max_coords: int | None = 6, step: float = 1e-5) -> dict[str, float]:
    """Max relative analytic-vs-central-difference error for each loss term.

    With ``max_coords`` only that many random coordinates of each parameter
    are probed (all of them when None).
    """
    from .modes import FULL
    from .objectives import SamplerConfig, coordination_loss, fine_grained_contrast_loss, holistic_contrast_loss

    params = random_check_model(model_cfg, seed)
    rng = np.random.default_rng(seed + 1)
    # unit-variance features: smaller inputs shrink attention gradients below round-off
    x_r = rng.standard_normal((batch_size, model_cfg.d_img))
    x_t = rng.standard_normal((batch_size, model_cfg.d_txt))
    x_c = rng.standard_normal((batch_size, model_cfg.d_img))
    sampler = SamplerConfig()
    defaults = TrainConfig()

    def term(name):
        def f(tape, P):
            enc = encode_batch(P, FULL, x_r, x_t, x_c)
            # a fresh generator per evaluation keeps the sampled negatives fixed
            srng = np.random.default_rng(seed + 2)
            if name == "L_HC":
                return holistic_contrast_loss(enc, P["loss.a"], P["loss.b"])
            if name == "L_FC":
                return fine_grained_contrast_loss(enc.var_q, enc.var_c, P["loss.a_fc"], P["loss.b_fc"], sampler, srng)
            if name == "L_Cord":
                return coordination_loss(enc.coord_grid)
            return total_loss(enc, P, defaults.lambda_fc, defaults.lambda_cord, sampler, srng).total
        return f

    out = {}
    for name in LOSS_TERMS:
        out[name] = ad.grad_check(term(name), params, step, max_coords=max_coords,
                                  rng=np.random.default_rng(seed + 3))
    return out


def check_distance_gradients(K: int = 8, D: int = 16, n: int = 3, seed: int = 0, step: float = 1e-3) -> float:
    """Gradient check of the pairwise holistic distance kernel alone.

    The kernel is quadratic in the means and linear in the variances, so
    central differences carry no truncation error; the larger default step
    only shrinks round-off.
    """
    from .gaussian import pairwise_holistic_distance

    rng = np.random.default_rng(seed)
    params = {
        "mu_q": rng.standard_normal((n, K, D)),
        "var_q": rng.random((n, K, D)) + 0.1,
        "mu_c": rng.standard_normal((n, K, D)),
        "var_c": rng.random((n, K, D)) + 0.1,
    }
    weights = rng.standard_normal((n, n))

    def f(tape, P):
        d = pairwise_holistic_distance(P["mu_q"], P["var_q"], P["mu_c"], P["var_c"])
        return ad.sum_(ad.mul(d, weights))

    return ad.grad_check(f, params, step)
