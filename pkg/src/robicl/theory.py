"""Closed-form optima, threshold constants, and the combinatorial score objective.

The adversarial pretraining problem reduces to maximizing a hinge-sum score
over (d', b_last) in {0..d} x {0,1}; the maximizer maps back to explicit
(P, Q) matrices. Three budget regimes have named closed forms: standard
(eps = 0), adversarial (eps at the r7 root), and strongly adversarial
(eps at or beyond the r1 root), where the optimum is the zero transformer.
"""

import enum
import itertools
import math
from dataclasses import dataclass

import numpy as np

from .model import ReducedParams, TransformerParams


class Regime(enum.Enum):
    STANDARD = "standard"
    ADVERSARIAL = "adversarial"
    STRONG_ADVERSARIAL = "strong_adversarial"


def closed_form_params(regime: Regime, d: int) -> TransformerParams:
    """The global minimizer for the three characterized budget regimes."""
    if d < 1:
        raise ValueError("d must be >= 1")
    p = np.zeros((d + 1, d + 1))
    q = np.zeros((d + 1, d + 1))
    if regime is Regime.STANDARD:
        p[d, :] = 1.0
        q[:, :d] = 1.0
    elif regime is Regime.ADVERSARIAL:
        p[d, :] = 1.0
        q[:d, :d] = np.eye(d)
    elif regime is not Regime.STRONG_ADVERSARIAL:
        raise ValueError(f"unknown regime {regime!r}")
    return TransformerParams(p, q, regime.value)


@dataclass(frozen=True)
class EpsilonThresholds:
    """Budget values where the r coefficients (and s5 at full selection)
    change sign. For d >= 2: eps2 <= eps6 <= eps4 <= eps_s5 <= eps7 <= eps5
    <= eps3 <= eps1."""

    eps1: float
    eps2: float
    eps3: float
    eps4: float
    eps5: float
    eps6: float
    eps7: float
    eps_s5: float

    def ordered(self):
        return (self.eps2, self.eps6, self.eps4, self.eps_s5,
                self.eps7, self.eps5, self.eps3, self.eps1)


def epsilon_thresholds(d: int, lam: float) -> EpsilonThresholds:
    if d < 1:
        raise ValueError("d must be >= 1")
    if not 0.0 < lam < 1.0:
        raise ValueError("lambda must lie in (0, 1)")
    return EpsilonThresholds(
        eps1=lam / 2 + 1.5 * (2 - lam) / (lam**2 * (d - 1) + 3),
        eps2=lam * (lam**2 * (d - 2) + 2 * lam + 3) / (2 * (lam**2 * (d - 1) + 3)),
        eps3=(lam**2 * (d - 1) + 4) / (2 * (lam * (d - 1) + 2)),
        eps4=lam * (lam * (d - 2) + 4) / (2 * (lam * (d - 1) + 2)),
        eps5=(lam**2 * (d - 2) + 2 * lam + 4) / (2 * (lam * (d - 2) + 4)),
        eps6=lam * (lam * (d - 3) + 6) / (2 * (lam * (d - 2) + 4)),
        eps7=(lam * (d - 1) + 2) / (2 * d),
        eps_s5=(lam / 2)
        * (3 * d**2 * lam**2 - 8 * d * lam**2 + 24 * d * lam + 4 * lam**2 - 34 * lam + 48)
        / (3 * d**2 * lam**2 - 5 * d * lam**2 + 18 * d * lam + 2 * lam**2 - 18 * lam + 24),
    )


def rs_coefficients(d: int, lam: float, eps: float):
    """(r1..r7) as functions of eps+ = 1 - eps and eps- = lambda/2 - eps."""
    ep = 1.0 - eps
    em = lam / 2.0 - eps
    return (
        ep + (lam**2 / 3) * (d - 1) * em,
        em + (lam**2 / 3) * ep + (lam**2 / 3) * (d - 2) * em,
        ep + (lam / 2) * (d - 1) * em,
        em + (lam / 2) * ep + (lam / 2) * (d - 2) * em,
        (lam / 2) * ep + (lam / 2) * em + (lam**2 / 4) * (d - 2) * em,
        lam * em + (lam**2 / 4) * ep + (lam**2 / 4) * (d - 3) * em,
        ep + (d - 1) * em,
    )


def s_arguments(d_prime: int, b_last: int, d: int, lam: float, eps: float):
    """(s1..s8) evaluated at (d', b_last)."""
    r1, r2, r3, r4, r5, r6, r7 = rs_coefficients(d, lam, eps)
    return (
        b_last * r7 + r3 + (d_prime - 1) * r4,
        b_last * r7 + d_prime * r4,
        b_last * r3 + r1 + (d_prime - 1) * r5,
        b_last * r3 + d_prime * r5,
        b_last * r4 + r2 + r5 + (d_prime - 2) * r6,
        b_last * r4 + r2 + (d_prime - 1) * r6,
        b_last * r4 + r5 + (d_prime - 1) * r6,
        b_last * r4 + d_prime * r6,
    )


def score(d_prime: int, b_last: int, d: int, lam: float, eps: float) -> float:
    """The transformed objective: hinge terms weighted by selection counts.
    Minimizing the in-context loss equals maximizing score; the loss value
    at the mapped parameters is -score/d."""
    if not 0 <= d_prime <= d:
        raise ValueError(f"d' must lie in [0, {d}]")
    s = s_arguments(d_prime, b_last, d, lam, eps)
    rest = d - d_prime
    coeff = (d_prime, rest, d_prime, rest,
             d_prime * (d_prime - 1), d_prime * rest, d_prime * rest,
             rest * (rest - 1))
    return sum(c * max(0.0, x) for c, x in zip(coeff, s))


def map_to_params(d_prime: int, b_last: int, d: int, lam: float, eps: float):
    """Map a selection (d', b_last) to explicit parameters.

    b has ones on a d'-prefix plus b_last in the label slot; A entries are
    set by the sign of their score contribution. A tie (contribution zero,
    which happens exactly on threshold budgets) is resolved to 0 so that the
    mapped matrices coincide with the named closed forms; either choice is
    loss-equivalent. Ties are detected with a tolerance scaled to the terms
    of the contribution, since the threshold identities only hold to float
    round-off.

    Returns (ReducedParams, TransformerParams).
    """
    if not 0 <= d_prime <= d:
        raise ValueError(f"d' must lie in [0, {d}]")
    r1, r2, r3, r4, r5, r6, r7 = rs_coefficients(d, lam, eps)
    b = np.zeros(d + 1)
    b[:d_prime] = 1.0
    b[d] = float(b_last)
    a = np.zeros((d + 1, d))
    for j in range(d + 1):
        for k in range(d):
            ink = k < d_prime
            if j == d:
                terms = (b_last * r7, r3 if ink else 0.0, (d_prime - ink) * r4)
            elif j == k:
                terms = (b_last * r3, r1 if ink else 0.0, (d_prime - ink) * r5)
            else:
                inj = j < d_prime
                terms = (b_last * r4, r2 if inj else 0.0, r5 if ink else 0.0,
                         (d_prime - inj - ink) * r6)
            arg = sum(terms)
            tie_tol = 1e-12 * max(1.0, sum(abs(t) for t in terms))
            if arg > tie_tol:
                a[j, k] = 1.0
    rp = ReducedParams(b, a)
    return rp, rp.to_full()


def brute_force_optimum(d: int, lam: float, eps: float):
    """Enumerate all (d', b_last); return (d', b_last, score, params).

    Ties at positive scores break toward larger d' then larger b_last. When
    no selection beats the empty one (max score is 0, the strongly
    adversarial situation), the empty selection (0, 0) is returned so the
    mapped parameters are the zero transformer.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    best = (0, 0, 0.0)
    for d_prime in range(d + 1):
        for b_last in (0, 1):
            val = score(d_prime, b_last, d, lam, eps)
            if val > best[2] + 1e-12 or (
                abs(val - best[2]) <= 1e-12
                and best[2] > 1e-12
                and (d_prime, b_last) > (best[0], best[1])
            ):
                best = (d_prime, b_last, val)
    d_prime, b_last, val = best
    _, params = map_to_params(d_prime, b_last, d, lam, eps)
    return d_prime, b_last, val, params


def score_general(b_vec, d: int, lam: float, eps: float) -> float:
    """Score of an arbitrary binary b vector, bypassing the d'-prefix
    symmetry reduction. Exhaustive verification helper for small d."""
    b_vec = np.asarray(b_vec)
    if b_vec.shape != (d + 1,):
        raise ValueError(f"b must have length {d + 1}")
    r1, r2, r3, r4, r5, r6, r7 = rs_coefficients(d, lam, eps)
    sel = b_vec[:d].astype(bool)
    b_last = float(b_vec[d])
    total = 0.0
    for j in range(d + 1):
        for k in range(d):
            if j == d:
                arg = (b_last * r7 + (r3 if sel[k] else 0.0)
                       + (sel.sum() - sel[k]) * r4)
            elif j == k:
                arg = (b_last * r3 + (r1 if sel[j] else 0.0)
                       + (sel.sum() - sel[j]) * r5)
            else:
                arg = (b_last * r4 + (r2 if sel[j] else 0.0)
                       + (r5 if sel[k] else 0.0)
                       + (sel.sum() - sel[j] - sel[k]) * r6)
            total += max(0.0, arg)
    return total


def exhaustive_optimum(d: int, lam: float, eps: float):
    """Maximize over all 2^(d+1) binary b vectors (d <= 12). Confirms the
    prefix reduction used by brute_force_optimum."""
    if d > 12:
        raise ValueError("exhaustive mode is limited to d <= 12")
    best_val = -math.inf
    best_b = None
    for bits in itertools.product((0, 1), repeat=d + 1):
        val = score_general(np.array(bits), d, lam, eps)
        if val > best_val + 1e-12:
            best_val = val
            best_b = np.array(bits)
    return best_b, best_val


def baseline_predict(kind: str, x, c: int | None = None) -> int:
    """Warm-up classifiers: the all-ones linear rule, the single robust
    coordinate rule, and the max-magnitude oracle. sgn(0) := +1; oracle
    argmax ties go to the smallest index."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    if kind == "std_linear":
        val = x.sum()
    elif kind == "adv_linear":
        if c is None or not 1 <= c <= x.shape[0]:
            raise ValueError("adv_linear needs a robust index c in [1, d]")
        val = x[c - 1]
    elif kind == "oracle_argmax":
        val = x[int(np.argmax(np.abs(x)))]
    else:
        raise ValueError(f"unknown baseline kind {kind!r}")
    return 1 if val >= 0.0 else -1


def score_table_rows(d: int, lam: float, eps: float):
    """All (d', b_last, score) rows, for the score-table CSV."""
    return [
        (d_prime, b_last, score(d_prime, b_last, d, lam, eps))
        for d_prime in range(d + 1)
        for b_last in (0, 1)
    ]
