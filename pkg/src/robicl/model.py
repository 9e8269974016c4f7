"""Prompt matrices, the single-layer linear transformer, and closed-form attacks.

The model is f(Z) = (1/N) P Z M Z^T Q Z with the mask M zeroing the query
column; only entry (d+1, N+1) of the output is ever consumed as the query
prediction. Everything here is a pure function over immutable arrays.
"""

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Dimension mismatch between prompt, parameters, or vectors."""


def _as_vector(x, d=None, name="vector"):
    v = np.asarray(x, dtype=np.float64).reshape(-1)
    if d is not None and v.shape[0] != d:
        raise ShapeError(f"{name} has length {v.shape[0]}, expected {d}")
    return v


@dataclass(frozen=True)
class PromptMatrix:
    """In-context input Z: N demonstration columns (x_n; y_n) plus a query
    column (x_query + delta; 0)."""

    d: int
    n_demos: int
    data: np.ndarray  # (d+1, N+1)

    def __post_init__(self):
        if self.d < 1 or self.n_demos < 1:
            raise ShapeError("need d >= 1 and at least one demonstration")
        if self.data.shape != (self.d + 1, self.n_demos + 1):
            raise ShapeError(
                f"data shape {self.data.shape} != {(self.d + 1, self.n_demos + 1)}"
            )
        labels = self.data[self.d, : self.n_demos]
        if not np.all(np.isin(labels, (-1.0, 1.0))):
            raise ValueError("demonstration labels must be +/-1")
        if self.data[self.d, self.n_demos] != 0.0:
            raise ValueError("prediction placeholder must be 0")

    @property
    def query(self):
        """Feature part of the query column (perturbation included)."""
        return self.data[: self.d, self.n_demos]

    @property
    def demos(self):
        """(features (N, d), labels (N,)) view of the demonstration columns."""
        return self.data[: self.d, : self.n_demos].T, self.data[self.d, : self.n_demos]

    def to_json(self):
        return {"d": self.d, "n": self.n_demos, "data": self.data.tolist()}

    @classmethod
    def from_json(cls, obj):
        return cls(int(obj["d"]), int(obj["n"]), np.asarray(obj["data"], dtype=np.float64))


@dataclass(frozen=True)
class TransformerParams:
    """Value matrix P and key-query product Q, both (d+1) x (d+1)."""

    p: np.ndarray
    q: np.ndarray
    regime: str | None = None

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        q = np.asarray(self.q, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] != p.shape[1] or p.shape != q.shape:
            raise ShapeError(f"P {p.shape} and Q {q.shape} must be equal square matrices")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)

    @property
    def d(self):
        return self.p.shape[0] - 1

    def to_json(self):
        return {
            "d": self.d,
            "p": self.p.tolist(),
            "q": self.q.tolist(),
            "regime": self.regime,
        }

    @classmethod
    def from_json(cls, obj):
        params = cls(
            np.asarray(obj["p"], dtype=np.float64),
            np.asarray(obj["q"], dtype=np.float64),
            obj.get("regime"),
        )
        if params.d != int(obj["d"]):
            raise ShapeError(f"declared d={obj['d']} but matrices have d={params.d}")
        return params


@dataclass(frozen=True)
class ReducedParams:
    """The loss-relevant parameters: b = last row of P, A = first d columns of Q."""

    b: np.ndarray  # (d+1,)
    a: np.ndarray  # (d+1, d)

    def __post_init__(self):
        b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        a = np.asarray(self.a, dtype=np.float64)
        if a.shape != (b.shape[0], b.shape[0] - 1):
            raise ShapeError(f"A shape {a.shape} incompatible with b length {b.shape[0]}")
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "a", a)

    @property
    def d(self):
        return self.b.shape[0] - 1

    @classmethod
    def from_full(cls, params: TransformerParams):
        d = params.d
        return cls(params.p[d, :].copy(), params.q[:, :d].copy())

    def to_full(self, regime=None) -> TransformerParams:
        d = self.d
        p = np.zeros((d + 1, d + 1))
        p[d, :] = self.b
        q = np.zeros((d + 1, d + 1))
        q[:, :d] = self.a
        return TransformerParams(p, q, regime)


@dataclass(frozen=True)
class MaskedGram:
    """G = (1/N) Z M Z^T, the demonstration-only second-moment matrix."""

    g: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.g, dtype=np.float64)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise ShapeError("Gram matrix must be square")
        object.__setattr__(self, "g", g)


def build_prompt(demos, query, delta=None) -> PromptMatrix:
    """Lay out Z from (feature, label) demonstrations, a query, and a
    perturbation added to the query column. delta=None means no perturbation."""
    if len(demos) == 0:
        raise ValueError("demos must be nonempty")
    query = _as_vector(query, name="query")
    d = query.shape[0]
    if delta is None:
        delta = np.zeros(d)
    delta = _as_vector(delta, d, "delta")
    n = len(demos)
    data = np.zeros((d + 1, n + 1))
    for j, (x, y) in enumerate(demos):
        data[:d, j] = _as_vector(x, d, f"demo {j}")
        if y not in (-1, 1):
            raise ValueError(f"label {y!r} not in {{-1, +1}}")
        data[d, j] = y
    data[:d, n] = query + delta
    return PromptMatrix(d, n, data)


def masked_gram(z: PromptMatrix) -> MaskedGram:
    """G = (1/N) sum over demonstration columns of z_n z_n^T."""
    cols = z.data[:, : z.n_demos]
    return MaskedGram(cols @ cols.T / z.n_demos)


def mask_matrix(n_demos: int) -> np.ndarray:
    """The (N+1) x (N+1) mask blocking attention to the query token."""
    m = np.eye(n_demos + 1)
    m[n_demos, n_demos] = 0.0
    return m


def predict(z: PromptMatrix, params: TransformerParams) -> float:
    """Query prediction [(1/N) P Z M Z^T Q Z]_{d+1, N+1}."""
    if params.d != z.d:
        raise ShapeError(f"params d={params.d} but prompt d={z.d}")
    m = mask_matrix(z.n_demos)
    out = params.p @ z.data @ m @ z.data.T @ params.q @ z.data / z.n_demos
    return float(out[z.d, z.n_demos])


def reduced_predict(rp: ReducedParams, z: PromptMatrix) -> float:
    """b^T G A x_query; identical to predict() on the reconstructed (P, Q)."""
    if rp.d != z.d:
        raise ShapeError(f"reduced params d={rp.d} but prompt d={z.d}")
    g = masked_gram(z).g
    return float(rp.b @ g @ rp.a @ z.query)


def attack_coefficients(rp: ReducedParams, z_clean: PromptMatrix) -> np.ndarray:
    """w = b^T G A; the prediction is w.x and the optimal perturbation
    direction is -y*sgn(w)."""
    g = masked_gram(z_clean).g
    return rp.b @ g @ rp.a


def robust_margin(rp: ReducedParams, z_clean: PromptMatrix, y_query: int, eps: float) -> float:
    """min over ||Delta||_inf <= eps of y * prediction, solved exactly:
    y * w.x_query - eps * ||w||_1."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    w = attack_coefficients(rp, z_clean)
    return float(y_query * (w @ z_clean.query) - eps * np.abs(w).sum())


def optimal_attack(z_clean: PromptMatrix, y_query: int, params: TransformerParams,
                   eps: float) -> np.ndarray:
    """Worst-case perturbation Delta = -eps * y * sgn(b^T G A), sgn(0) := +1."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    w = attack_coefficients(ReducedParams.from_full(params), z_clean)
    return -eps * y_query * np.where(w >= 0.0, 1.0, -1.0)


def adversarial_context(demos, eps: float):
    """The naive context attack: each x_n becomes x_n - eps*y_n*1, labels kept."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    out = []
    for x, y in demos:
        x = np.asarray(x, dtype=np.float64)
        out.append((x - eps * y * np.ones_like(x), y))
    return out
