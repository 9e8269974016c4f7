"""Pure-NumPy implementations of the batched hot kernels.

All kernels work in the label-product representation u_n := y_n * x_n.
Because labels are +/-1, the prompt column z_n = (x_n; y_n) equals
y_n * (u_n; 1), so the demonstration Gram matrix G = (1/N) sum_n z_n z_n^T
is exactly (1/N) sum_n zeta_n zeta_n^T with zeta_n = (u_n; 1): labels drop
out of every margin-type quantity and only u arrays are needed.

Shapes: u_demos (B, N, d), u_queries (B, T, d) or (B, d); b (d+1,) is the
last row of P; a (d+1, d) holds the first d columns of Q.
"""

import numpy as np


def gram_times_vec(u_demos, vec):
    """(G @ vec) for each batch, vec (B, d+1) or (d+1,). Returns (B, d+1)."""
    B, N, d = u_demos.shape
    vec = np.broadcast_to(vec, (B, d + 1))
    s = np.einsum("bnd,bd->bn", u_demos, vec[:, :d]) + vec[:, d:]
    out = np.empty((B, d + 1))
    out[:, :d] = np.einsum("bnd,bn->bd", u_demos, s) / N
    out[:, d] = s.mean(axis=1)
    return out


def attack_coefficients(u_demos, b, a):
    """w = b^T G A per batch; the attacked margin is w.u_q - eps*||w||_1.

    Returns (B, d).
    """
    t = gram_times_vec(u_demos, b)
    return t @ a


def batch_margins(u_demos, u_queries, b, a, eps):
    """Clean and attacked query margins y*f(Z) for a batch of prompts.

    u_queries may be (B, T, d) (T queries share each demo set) or (B, d).
    Returns (clean, attacked) with matching leading shape.
    """
    squeeze = u_queries.ndim == 2
    if squeeze:
        u_queries = u_queries[:, None, :]
    w = attack_coefficients(u_demos, b, a)
    clean = np.einsum("btd,bd->bt", u_queries, w)
    attacked = clean - eps * np.abs(w).sum(axis=1, keepdims=True)
    if squeeze:
        return clean[:, 0], attacked[:, 0]
    return clean, attacked


def attacked_loss(u_demos, u_query, b, a, eps):
    """Per-dataset adversarial in-context loss, -min_margin = max_Delta -y*f.

    Solves the inner maximization exactly: loss = -(w.u_q) + eps*||w||_1.
    Returns (B,).
    """
    clean, attacked = batch_margins(u_demos, u_query, b, a, eps)
    return -attacked


def attacked_loss_grad(u_demos, u_query, b, a, eps):
    """Mean attacked loss over the batch plus its gradient wrt b and a.

    The attack is held fixed at its closed form for the current (b, a)
    (Danskin step), so the gradient is that of -b^T G A (u_q - eps*sgn(w))
    with sgn frozen; sgn(0) counts as +1.

    Returns (loss_mean, grad_b (d+1,), grad_a (d+1, d)).
    """
    B, N, d = u_demos.shape
    t = gram_times_vec(u_demos, b)           # G b
    w = t @ a
    v = u_query - eps * np.where(w >= 0.0, 1.0, -1.0)
    av = v @ a.T                              # A v per batch, (B, d+1)
    losses = -np.einsum("bi,bi->b", t, av)
    grad_a = -(t.T @ v) / B
    grad_b = -gram_times_vec(u_demos, av).mean(axis=0)
    return losses.mean(), grad_b, grad_a
