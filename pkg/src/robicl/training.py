"""Adversarial pretraining by projected SGD with momentum on the in-context loss.

Each step draws fresh datasets (one query each), computes the closed-form
optimal attack from the current parameters, and backpropagates through the
attacked prediction with the attack held fixed (Danskin step). Parameters
are clamped to [0, 1] after every update; a plateau scheduler shrinks the
learning rate when the step loss stops improving.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .distributions import TrainDistSpec, train_products
from .model import ReducedParams, ShapeError, TransformerParams
from .theory import Regime, closed_form_params


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    d: int
    lam: float
    eps: float
    n_demos: int = 1000
    datasets_per_step: int = 1000
    steps: int = 100
    learning_rate: float = 0.1
    momentum: float = 0.9
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    improvement_threshold: float = 1e-4
    seed: int = 0
    mode: str = "full"          # full | p_only | q_only
    init: str = "uniform"       # [reduced-]uniform[:scale] | [reduced-]constant[:value] | zeros
    stratify_tasks: bool = True

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.n_demos < 1:
            raise ValueError("n_demos must be >= 1")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.mode not in ("full", "p_only", "q_only"):
            raise ValueError(f"unknown mode {self.mode!r}")


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    lr_changes: list = field(default_factory=list)   # (step, new_lr)
    final_distances: dict = field(default_factory=dict)


def init_params(config: TrainConfig, rng) -> TransformerParams:
    d = config.d
    spec = config.init
    reduced = spec.startswith("reduced-")
    if reduced:
        spec = spec[len("reduced-"):]
    kind, _, arg = spec.partition(":")
    if kind == "zeros":
        p = np.zeros((d + 1, d + 1))
        q = np.zeros((d + 1, d + 1))
        return TransformerParams(p, q)
    if kind == "uniform":
        scale = float(arg) if arg else 1.0
        draw = lambda shape: rng.uniform(0.0, scale, shape)
    elif kind == "constant":
        value = float(arg) if arg else 0.5
        draw = lambda shape: np.full(shape, value)
    else:
        raise ValueError(f"unknown init spec {config.init!r}")
    if reduced:
        p = np.zeros((d + 1, d + 1))
        q = np.zeros((d + 1, d + 1))
        p[d, :] = draw(d + 1)
        q[:, :d] = draw((d + 1, d))
    else:
        p = draw((d + 1, d + 1))
        q = draw((d + 1, d + 1))
    return TransformerParams(np.clip(p, 0.0, 1.0), np.clip(q, 0.0, 1.0))


def _sample_tasks(rng, d, count, stratify):
    if stratify and count % d == 0:
        c = np.repeat(np.arange(1, d + 1), count // d)
        rng.shuffle(c)
        return c
    return rng.integers(1, d + 1, size=count)


def step_gradients(params: TransformerParams, u_demos, u_query, eps):
    """Mean attacked loss and its gradient wrt the full P and Q.

    Only the last row of P and the first d columns of Q carry gradient;
    the rest of both matrices never influences the query prediction.
    """
    d = params.d
    rp = ReducedParams.from_full(params)
    loss, grad_b, grad_a = kernels.attacked_loss_grad(u_demos, u_query, rp.b, rp.a, eps)
    grad_p = np.zeros_like(params.p)
    grad_p[d, :] = grad_b
    grad_q = np.zeros_like(params.q)
    grad_q[:, :d] = grad_a
    return loss, grad_p, grad_q


def frozen_attack_loss(params: TransformerParams, u_demos, u_query, attack_signs, eps):
    """Batch loss with the attack direction frozen to `attack_signs` (B, d).

    Reference objective for finite-difference gradient checks.
    """
    rp = ReducedParams.from_full(params)
    v = u_query - eps * attack_signs
    t = kernels.gram_times_vec(u_demos, rp.b)
    av = v @ rp.a.T
    return float(-(t * av).sum(axis=1).mean())


def attack_signs(params: TransformerParams, u_demos):
    """sgn(b^T G A) per dataset with sgn(0) := +1, shape (B, d)."""
    rp = ReducedParams.from_full(params)
    w = kernels.attack_coefficients(u_demos, rp.b, rp.a)
    return np.where(w >= 0.0, 1.0, -1.0)


def train(config: TrainConfig):
    """Run projected SGD; returns (TransformerParams, TrainHistory)."""
    rng = np.random.default_rng(config.seed)
    params = init_params(config, rng)
    p, q = params.p.copy(), params.q.copy()
    vel_p = np.zeros_like(p)
    vel_q = np.zeros_like(q)
    lr = config.learning_rate
    history = TrainHistory()
    best = np.inf
    stale = 0
    d, n, batch = config.d, config.n_demos, config.datasets_per_step
    for step in range(config.steps):
        c = _sample_tasks(rng, d, batch, config.stratify_tasks)
        u = train_products(d, config.lam, batch * (n + 1), rng, np.repeat(c, n + 1))
        u = u.reshape(batch, n + 1, d)
        u_demos = np.ascontiguousarray(u[:, :n, :])
        u_query = u[:, n, :]
        loss, grad_p, grad_q = step_gradients(
            TransformerParams(p, q), u_demos, u_query, config.eps)
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: {loss!r} (lr={lr}, eps={config.eps})")
        if config.mode != "q_only":
            vel_p = config.momentum * vel_p + grad_p
            p = np.clip(p - lr * vel_p, 0.0, 1.0)
        if config.mode != "p_only":
            vel_q = config.momentum * vel_q + grad_q
            q = np.clip(q - lr * vel_q, 0.0, 1.0)
        history.losses.append(float(loss))
        if loss < best - config.improvement_threshold:
            best = loss
            stale = 0
        else:
            stale += 1
            if stale >= config.plateau_patience:
                lr *= config.plateau_factor
                stale = 0
                history.lr_changes.append((step, lr))
    trained = TransformerParams(p, q)
    for regime in Regime:
        history.final_distances[regime.value] = param_distance(
            trained, closed_form_params(regime, d))
    return trained, history


def finetune(start: TransformerParams, mode: str, downstream: TrainDistSpec,
             config: TrainConfig | None = None):
    """Standard (eps = 0) training on one downstream task, updating only the
    matrix selected by mode."""
    if mode not in ("p_only", "q_only"):
        raise ValueError("finetune mode must be p_only or q_only")
    if config is None:
        config = TrainConfig(d=downstream.d, lam=downstream.lam, eps=0.0)
    rng = np.random.default_rng(config.seed)
    p, q = start.p.copy(), start.q.copy()
    vel = np.zeros_like(p)
    lr = config.learning_rate
    best = np.inf
    stale = 0
    d, n, batch = downstream.d, config.n_demos, config.datasets_per_step
    if start.d != d:
        raise ShapeError(f"start params d={start.d} but downstream d={d}")
    for step in range(config.steps):
        u = train_products(d, downstream.lam, batch * (n + 1), rng, downstream.c)
        u = u.reshape(batch, n + 1, d)
        loss, grad_p, grad_q = step_gradients(
            TransformerParams(p, q), np.ascontiguousarray(u[:, :n, :]), u[:, n, :], 0.0)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite loss at step {step}")
        if mode == "p_only":
            vel = config.momentum * vel + grad_p
            p = np.clip(p - lr * vel, 0.0, 1.0)
        else:
            vel = config.momentum * vel + grad_q
            q = np.clip(q - lr * vel, 0.0, 1.0)
        if loss < best - config.improvement_threshold:
            best = loss
            stale = 0
        else:
            stale += 1
            if stale >= config.plateau_patience:
                lr *= config.plateau_factor
                stale = 0
    return TransformerParams(p, q, start.regime)


def in_context_loss(params: TransformerParams, batch, eps: float) -> float:
    """Mean adversarial in-context loss over (dataset, c) pairs, each dataset
    holding N demonstrations plus the query as its final sample. The inner
    maximization is closed-form, so this is the exact Eq-style objective."""
    u_demos, u_query = [], []
    for dataset, _c in batch:
        u = dataset.products()
        if u.shape[0] < 2:
            raise ShapeError("each dataset needs at least one demo plus a query")
        u_demos.append(u[:-1])
        u_query.append(u[-1])
    u_demos = np.ascontiguousarray(np.stack(u_demos))
    u_query = np.stack(u_query)
    rp = ReducedParams.from_full(params)
    if rp.d != u_demos.shape[2]:
        raise ShapeError("params dimension does not match batch dimension")
    return float(kernels.attacked_loss(u_demos, u_query, rp.b, rp.a, eps).mean())


def param_distance(a: TransformerParams, b: TransformerParams) -> float:
    """max entrywise |P_a - P_b| and |Q_a - Q_b|."""
    if a.d != b.d:
        raise ShapeError(f"dimension mismatch: {a.d} vs {b.d}")
    return float(max(np.abs(a.p - b.p).max(), np.abs(a.q - b.q).max()))
