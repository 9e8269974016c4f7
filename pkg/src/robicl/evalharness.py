"""Clean/robust accuracy measurement, benchmark tables, sweeps, and the
trade-off / sample-size studies.

A prediction counts as correct only when its sign matches the label; an
exactly-zero prediction is wrong for both labels, so the zero transformer
scores 0%, not 50%. Robust accuracy applies the closed-form optimal attack
at the task budget to every query.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .distributions import (LabeledDataset, TestDistSpec, TrainDistSpec,
                            test_normal_products, train_products)
from .model import ReducedParams, ShapeError, TransformerParams

DEFAULT_BATCHES = 100
DEFAULT_QUERIES = 200


@dataclass(frozen=True)
class RealPair:
    """A preprocessed binary class pair: training split for demonstrations,
    test split for queries."""

    train: LabeledDataset
    test: LabeledDataset
    name: str = ""

    def __post_init__(self):
        if len(self.train) == 0 or len(self.test) == 0:
            raise ValueError("empty real split")
        if self.train.d != self.test.d:
            raise ShapeError("train/test dimension mismatch")


@dataclass(frozen=True)
class EvalTask:
    source: object            # TrainDistSpec | TestDistSpec | RealPair
    n_demos: int
    eps: float
    trials: int
    seed: int = 0
    n_batches: int | None = None  # None: fresh demonstrations for every query

    def __post_init__(self):
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.eps < 0:
            raise ValueError("eps must be >= 0")


@dataclass
class EvalReport:
    clean_accuracy: float
    robust_accuracy: float
    clean_sd: float = 0.0
    robust_sd: float = 0.0
    per_pair: list = field(default_factory=list)
    mean_margin: float = 0.0
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class TradeoffSpec:
    """Theorem-5 style two-point distribution: y*x_1 = +/-alpha with
    probabilities (p, 1-p); y*x_i = beta deterministically for i >= 2."""

    p: float
    alpha: float
    beta: float
    d: int
    n_demos: int
    trials: int = 10000

    def __post_init__(self):
        if not 0.5 < self.p <= 1.0:
            raise ValueError("p must lie in (0.5, 1]")
        if self.d < 2:
            raise ValueError("d must be >= 2")

    def expected_yx(self):
        out = np.full(self.d, self.beta)
        out[0] = (2 * self.p - 1) * self.alpha
        return out


def tradeoff_products(spec: TradeoffSpec, count, rng):
    u = np.full((count, spec.d), spec.beta)
    flips = rng.random(count) < spec.p
    u[:, 0] = np.where(flips, spec.alpha, -spec.alpha)
    return u


def _sample_products(source, count, rng):
    if isinstance(source, TrainDistSpec):
        return train_products(source.d, source.lam, count, rng, source.c)
    if isinstance(source, TestDistSpec):
        return test_normal_products(source, count, rng)
    if isinstance(source, TradeoffSpec):
        return tradeoff_products(source, count, rng)
    raise TypeError(f"cannot sample from {type(source).__name__}")


def _source_dim(source):
    if isinstance(source, RealPair):
        return source.train.d
    return source.d


def _batch_plan(task: EvalTask):
    if task.n_batches is None:
        return task.trials, 1
    per = max(1, task.trials // task.n_batches)
    return task.n_batches, per


def _accuracy(margins):
    return float((margins > 0.0).mean())


def evaluate(params: TransformerParams, task: EvalTask) -> EvalReport:
    """Accuracy of `params` on the task; robust numbers use the exact
    worst-case query perturbation at task.eps."""
    if params.d != _source_dim(task.source):
        raise ShapeError(
            f"params d={params.d} but task dimension is {_source_dim(task.source)}")
    rp = ReducedParams.from_full(params)
    rng = np.random.default_rng(task.seed)
    if isinstance(task.source, RealPair):
        return _evaluate_real(rp, task, rng)

    n_batches, queries_per = _batch_plan(task)
    clean_acc, robust_acc, margin_sum = [], [], 0.0
    chunk = max(1, min(n_batches, 268_435_456 // max(1, task.n_demos * params.d * 8)))
    done = 0
    while done < n_batches:
        b = min(chunk, n_batches - done)
        u = _sample_products(task.source, b * (task.n_demos + queries_per), rng)
        u = u.reshape(b, task.n_demos + queries_per, params.d)
        demos = np.ascontiguousarray(u[:, : task.n_demos, :])
        queries = u[:, task.n_demos:, :]
        clean, attacked = kernels.batch_margins(demos, queries, rp.b, rp.a, task.eps)
        clean_acc.extend((clean > 0.0).mean(axis=1))
        robust_acc.extend((attacked > 0.0).mean(axis=1))
        margin_sum += attacked.sum()
        done += b
    clean_acc = np.asarray(clean_acc)
    robust_acc = np.asarray(robust_acc)
    sd = lambda a: float(a.std(ddof=1)) if a.size > 1 else 0.0
    return EvalReport(
        clean_accuracy=float(clean_acc.mean()),
        robust_accuracy=float(robust_acc.mean()),
        clean_sd=sd(clean_acc),
        robust_sd=sd(robust_acc),
        mean_margin=margin_sum / (n_batches * queries_per),
        metadata={"regime": params.regime, "eps": task.eps, "seed": task.seed,
                  "n_demos": task.n_demos, "batches": int(n_batches)},
    )


def pair_gram(pair: RealPair, n_demos: int | None, rng):
    """Demonstration Gram matrix of a real pair in product space.

    n_demos=None uses the whole training split; otherwise demonstrations are
    drawn without replacement, or with replacement once n_demos exceeds the
    split size.
    """
    u = pair.train.products()
    if n_demos is not None and n_demos != len(u):
        replace = n_demos > len(u)
        idx = rng.choice(len(u), size=n_demos, replace=replace)
        u = u[idx]
    zeta = np.concatenate([u, np.ones((len(u), 1))], axis=1)
    return zeta.T @ zeta / len(u)


def _real_margins(rp: ReducedParams, gram, u_queries, eps):
    w = rp.b @ gram @ rp.a
    clean = u_queries @ w
    return clean, clean - eps * np.abs(w).sum()


def _evaluate_real(rp: ReducedParams, task: EvalTask, rng) -> EvalReport:
    pair = task.source
    gram = pair_gram(pair, task.n_demos or None, rng)
    u_test = pair.test.products()
    if task.trials < len(u_test):
        u_test = u_test[rng.choice(len(u_test), size=task.trials, replace=False)]
    clean, attacked = _real_margins(rp, gram, u_test, task.eps)
    return EvalReport(
        clean_accuracy=_accuracy(clean),
        robust_accuracy=_accuracy(attacked),
        mean_margin=float(attacked.mean()),
        metadata={"pair": pair.name, "eps": task.eps, "queries": len(u_test)},
    )


def evaluate_pairs(params_list, pairs, eps, seed=0):
    """Evaluate several parameter sets across real pairs, reusing each
    pair's Gram matrix. Returns {params index: EvalReport} with per-pair
    breakdowns and across-pair mean/sd."""
    rows = {i: [] for i in range(len(params_list))}
    rng = np.random.default_rng(seed)
    for pair in pairs:
        gram = pair_gram(pair, None, rng)
        u_test = pair.test.products()
        for i, params in enumerate(params_list):
            rp = ReducedParams.from_full(params)
            clean, attacked = _real_margins(rp, gram, u_test, eps)
            rows[i].append({
                "pair": pair.name,
                "clean": _accuracy(clean),
                "robust": _accuracy(attacked),
            })
    reports = {}
    for i, params in enumerate(params_list):
        clean = np.array([r["clean"] for r in rows[i]])
        robust = np.array([r["robust"] for r in rows[i]])
        reports[i] = EvalReport(
            clean_accuracy=float(clean.mean()),
            robust_accuracy=float(robust.mean()),
            clean_sd=float(clean.std(ddof=1)) if clean.size > 1 else 0.0,
            robust_sd=float(robust.std(ddof=1)) if robust.size > 1 else 0.0,
            per_pair=rows[i],
            metadata={"regime": params.regime, "eps": eps, "pairs": len(rows[i])},
        )
    return reports


def sweep(base_task: EvalTask, axis: str, values, params_list):
    """Re-evaluate every parameter set along one task axis.

    Returns rows with keys axis_value, model, clean_mean, clean_sd,
    robust_mean, robust_sd.
    """
    rows = []
    for value in values:
        task = _task_with(base_task, axis, value)
        for params in params_list:
            report = evaluate(params, task)
            rows.append({
                "axis": axis,
                "axis_value": value,
                "model": params.regime or "custom",
                "clean_mean": report.clean_accuracy,
                "clean_sd": report.clean_sd,
                "robust_mean": report.robust_accuracy,
                "robust_sd": report.robust_sd,
            })
    return rows


def _task_with(task: EvalTask, axis: str, value):
    if axis == "eps":
        return EvalTask(task.source, task.n_demos, float(value), task.trials,
                        task.seed, task.n_batches)
    if axis == "N":
        return EvalTask(task.source, int(value), task.eps, task.trials,
                        task.seed, task.n_batches)
    if axis in ("d_rob", "d_vul", "d_irr"):
        src = task.source
        if not isinstance(src, TestDistSpec):
            raise ValueError(f"axis {axis} requires a test-normal source")
        kwargs = dict(d_rob=src.d_rob, d_vul=src.d_vul, d_irr=src.d_irr,
                      alpha=src.alpha, beta=src.beta, gamma=src.gamma)
        kwargs[axis] = int(value)
        return EvalTask(TestDistSpec(**kwargs), task.n_demos, task.eps,
                        task.trials, task.seed, task.n_batches)
    raise ValueError(f"unknown sweep axis {axis!r}")


def expected_query_margin(params: TransformerParams, demo_products,
                          spec: TradeoffSpec) -> float:
    """Query expectation taken analytically: b^T (Z M Z^T / N) A E[y x] with
    E[y x] = ((2p-1)alpha, beta, ..., beta). Removes query sampling noise."""
    rp = ReducedParams.from_full(params)
    u = np.asarray(demo_products, dtype=np.float64)
    zeta = np.concatenate([u, np.ones((len(u), 1))], axis=1)
    gram = zeta.T @ zeta / len(u)
    return float(rp.b @ gram @ rp.a @ spec.expected_yx())


def tradeoff_experiment(spec: TradeoffSpec, params_list, seed=0):
    """Sample demo sets and queries from the two-point distribution and
    record per-trial margins y*prediction for each parameter set.

    Returns {regime: {"margins": (trials,), "accuracy": float}}.
    """
    rng = np.random.default_rng(seed)
    out = {}
    batch = max(1, spec.trials // 100)
    demo_sets = []
    queries = []
    done = 0
    while done < spec.trials:
        b = min(batch, spec.trials - done)
        demo_sets.append(tradeoff_products(spec, b * spec.n_demos, rng)
                         .reshape(b, spec.n_demos, spec.d))
        queries.append(tradeoff_products(spec, b, rng))
        done += b
    for params in params_list:
        rp = ReducedParams.from_full(params)
        margins = []
        for demos, u_q in zip(demo_sets, queries):
            clean, _ = kernels.batch_margins(
                np.ascontiguousarray(demos), u_q, rp.b, rp.a, 0.0)
            margins.append(clean)
        margins = np.concatenate(margins)
        out[params.regime or "custom"] = {
            "margins": margins,
            "accuracy": _accuracy(margins),
        }
    return out


def sample_size_experiment(spec: TradeoffSpec, demo_counts, params_list,
                           n_sets=10000, seed=0):
    """Fraction of demo sets whose analytic expected query margin is positive,
    per in-context sample size, with the 1 - exp(-p*N) reference bound."""
    rng = np.random.default_rng(seed)
    rows = []
    e_yx = spec.expected_yx()
    for n in demo_counts:
        u = tradeoff_products(spec, n_sets * n, rng).reshape(n_sets, n, spec.d)
        zeta = np.concatenate([u, np.ones((n_sets, n, 1))], axis=2)
        row = {"N": int(n), "bound": 1.0 - math.exp(-spec.p * n)}
        for params in params_list:
            rp = ReducedParams.from_full(params)
            t = np.einsum("bni,bn->bi", zeta, np.einsum("bni,i->bn", zeta, rp.b)) / n
            margins = (t @ rp.a) @ e_yx
            row[params.regime or "custom"] = float((margins > 0.0).mean())
        rows.append(row)
    return rows


def adversarial_context_eval(params: TransformerParams, spec: TrainDistSpec,
                             eps: float, n_demos: int, trials: int,
                             seed: int = 0, n_batches: int | None = None) -> EvalReport:
    """Evaluate with naively perturbed demonstrations x_n - eps*y_n*1 (labels
    kept) and an optimally attacked query. In product space the context
    shift is u_n -> u_n - eps."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    rp = ReducedParams.from_full(params)
    rng = np.random.default_rng(seed)
    if n_batches is None:
        n_batches, queries_per = trials, 1
    else:
        queries_per = max(1, trials // n_batches)
    clean_acc, robust_acc, margin_sum = [], [], 0.0
    for _ in range(n_batches):
        u = train_products(spec.d, spec.lam, n_demos + queries_per, rng, spec.c)
        demos = np.ascontiguousarray((u[:n_demos] - eps)[None])
        queries = u[n_demos:][None]
        clean, attacked = kernels.batch_margins(demos, queries, rp.b, rp.a, eps)
        clean_acc.append((clean > 0.0).mean())
        robust_acc.append((attacked > 0.0).mean())
        margin_sum += attacked.sum()
    return EvalReport(
        clean_accuracy=float(np.mean(clean_acc)),
        robust_accuracy=float(np.mean(robust_acc)),
        mean_margin=margin_sum / (n_batches * queries_per),
        metadata={"context_eps": eps, "n_demos": n_demos},
    )


TABLE1_EPS = {"train_dist": 0.15, "test_normal": 0.2,
              "mnist": 0.1, "fmnist": 0.15, "cifar10": 0.1}
TABLE1_LABELS = {"train_dist": "D^tr", "test_normal": "D^te",
                 "mnist": "MNIST", "fmnist": "FMNIST", "cifar10": "CIFAR10"}


def run_table1(params_list, data_dir=None, seed=0, n_demos=1000,
               n_batches=100, queries=20000, warn=print):
    """Clean/robust accuracy of each parameter set on the two synthetic
    columns and the available real datasets at the benchmark budgets.

    Returns {column: {regime: EvalReport}}; real columns whose files are
    missing under data_dir are skipped with a warning.
    """
    from . import realdata

    results = {}
    synth = {
        "train_dist": TrainDistSpec(d=100, lam=0.1, c=1),
        "test_normal": TestDistSpec(d_rob=10, d_vul=90, d_irr=0,
                                    alpha=1.0, beta=0.1, gamma=0.0),
    }
    for column, source in synth.items():
        task = EvalTask(source, n_demos, TABLE1_EPS[column], queries,
                        seed=seed, n_batches=n_batches)
        results[column] = {p.regime or "custom": evaluate(p, task)
                           for p in params_list}
    for column in ("mnist", "fmnist", "cifar10"):
        if data_dir is None:
            warn(f"table1: no data directory given, skipping {column}")
            continue
        pairs = realdata.build_pairs(data_dir, column)
        if pairs is None:
            warn(f"table1: {column} files not found under {data_dir}, skipping")
            continue
        reports = evaluate_pairs(params_list, pairs, TABLE1_EPS[column], seed)
        results[column] = {params_list[i].regime or "custom": reports[i]
                           for i in range(len(params_list))}
    return results


def format_table1(results, params_order=("standard", "adversarial")) -> str:
    """Two-row text table, clean/robust percentages per column."""
    columns = [c for c in TABLE1_LABELS if c in results]
    header = ["model"] + [TABLE1_LABELS[c] for c in columns]
    widths = [24] + [13] * len(columns)
    lines = ["  ".join(h.ljust(w) for h, w in zip(header, widths))]
    for regime in params_order:
        cells = [f"{regime} pretrained".ljust(widths[0])]
        for c, w in zip(columns, widths[1:]):
            rep = results[c].get(regime)
            cell = ("-" if rep is None
                    else f"{100 * rep.clean_accuracy:.0f} / {100 * rep.robust_accuracy:.0f}")
            cells.append(cell.ljust(w))
        lines.append("  ".join(cells))
    return "\n".join(lines)


def table1_rows(results):
    """Flat CSV rows (one per column x params) for report emission."""
    rows = []
    for column, by_regime in results.items():
        for regime, rep in by_regime.items():
            rows.append({
                "column": column,
                "model": regime,
                "eps": TABLE1_EPS[column],
                "clean_mean": rep.clean_accuracy,
                "clean_sd": rep.clean_sd,
                "robust_mean": rep.robust_accuracy,
                "robust_sd": rep.robust_sd,
            })
    return rows


def write_rows_csv(rows, path, fieldnames=None):
    if not rows:
        raise ValueError("no rows to write")
    fieldnames = fieldnames or list(rows[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
