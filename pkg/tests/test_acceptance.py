"""End-to-end acceptance suite.

Run with `pytest tests/test_acceptance.py -v -s` to see one printed
PASS/FAIL line per criterion. The two gate checks (analytic gradient vs
finite differences, full vs reduced forward equivalence) run first and,
via the module fixture, block the remaining criteria if broken.

Real-dataset criteria read the directory named by ICL_DATA_DIR and are
skipped with an explicit reason when the files are absent (no download
client exists by design).
"""

import itertools
import math
import os
import time

import numpy as np
import pytest

from robicl.distributions import TestDistSpec, TrainDistSpec
from robicl.evalharness import (EvalTask, TradeoffSpec, adversarial_context_eval,
                                evaluate, evaluate_pairs,
                                sample_size_experiment, tradeoff_experiment)
from robicl.model import ReducedParams, TransformerParams, build_prompt, predict, reduced_predict
from robicl.theory import (Regime, brute_force_optimum, closed_form_params,
                           epsilon_thresholds, map_to_params, score)
from robicl.training import (TrainConfig, attack_signs, frozen_attack_loss,
                             param_distance, step_gradients, train)

DATA_DIR = os.environ.get("ICL_DATA_DIR")

_gate_state = {"passed": False}


def _report(ok: bool, label: str, detail: str = ""):
    print(f"[{'PASS' if ok else 'FAIL'}] {label}" + (f": {detail}" if detail else ""))
    return ok


@pytest.fixture(autouse=True)
def require_gates(request):
    # gate tests run first (definition order); everything after them is
    # skipped when they did not pass
    if not request.node.name.startswith("test_gate") and not _gate_state["passed"]:
        pytest.skip("gate checks did not pass")
    yield


def test_gate_gradient_vs_finite_differences():
    rng = np.random.default_rng(101)
    start = time.time()
    worst = 0.0
    for _ in range(4):
        d = int(rng.integers(2, 6))
        n = int(rng.integers(4, 21))
        c = rng.integers(d, size=3)
        u = rng.uniform(0, 0.2, size=(3, n + 1, d))
        u[np.arange(3), :, c] = 1.0
        u_demos = np.ascontiguousarray(u[:, :n, :])
        u_query = u[:, n, :]
        params = TransformerParams(rng.uniform(size=(d + 1, d + 1)),
                                   rng.uniform(size=(d + 1, d + 1)))
        eps = float(rng.uniform(0, 0.3))
        signs = attack_signs(params, u_demos)
        _, grad_p, grad_q = step_gradients(params, u_demos, u_query, eps)
        step = 1e-5
        fd = {"p": np.zeros_like(grad_p), "q": np.zeros_like(grad_q)}
        for which in ("p", "q"):
            for i in range(d + 1):
                for j in range(d + 1):
                    hi = {"p": params.p.copy(), "q": params.q.copy()}
                    lo = {"p": params.p.copy(), "q": params.q.copy()}
                    hi[which][i, j] += step
                    lo[which][i, j] -= step
                    f_hi = frozen_attack_loss(TransformerParams(hi["p"], hi["q"]),
                                              u_demos, u_query, signs, eps)
                    f_lo = frozen_attack_loss(TransformerParams(lo["p"], lo["q"]),
                                              u_demos, u_query, signs, eps)
                    fd[which][i, j] = (f_hi - f_lo) / (2 * step)
        analytic = np.concatenate([grad_p.ravel(), grad_q.ravel()])
        numeric = np.concatenate([fd["p"].ravel(), fd["q"].ravel()])
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
        worst = max(worst, rel)
    elapsed = time.time() - start
    ok = worst <= 1e-4 and elapsed < 60
    _report(ok, "gate: gradient vs central differences",
            f"worst rel err {worst:.2e} in {elapsed:.1f}s")
    assert worst <= 1e-4
    assert elapsed < 60


def test_gate_forward_reduced_equivalence():
    rng = np.random.default_rng(102)
    start = time.time()
    worst = 0.0
    for _ in range(200):
        d = int(rng.integers(1, 6))
        n = int(rng.integers(1, 10))
        demos = [(rng.normal(size=d), 1 if b else -1)
                 for b in rng.integers(0, 2, size=n)]
        z = build_prompt(demos, rng.normal(size=d), rng.normal(size=d))
        rp = ReducedParams(rng.normal(size=d + 1), rng.normal(size=(d + 1, d)))
        full = predict(z, rp.to_full())
        reduced = reduced_predict(rp, z)
        worst = max(worst, abs(full - reduced) / max(1.0, abs(full)))
    elapsed = time.time() - start
    ok = worst <= 1e-10 and elapsed < 60
    _report(ok, "gate: full/reduced forward equivalence",
            f"worst rel diff {worst:.2e} in {elapsed:.1f}s")
    assert worst <= 1e-10
    assert elapsed < 60
    _gate_state["passed"] = True


def test_criterion_1_regime_recovery():
    d, lam = 20, 0.1
    eps1 = epsilon_thresholds(d, lam).eps1
    targets = {
        0.0: Regime.STANDARD,
        0.0975: Regime.ADVERSARIAL,
        eps1 + 0.01: Regime.STRONG_ADVERSARIAL,
    }
    distances = {}
    for eps, regime in targets.items():
        start = time.time()
        cfg = TrainConfig(d=d, lam=lam, eps=eps, n_demos=200,
                          datasets_per_step=2000, steps=150, learning_rate=0.1,
                          seed=1, init="reduced-constant:0.02")
        params, _ = train(cfg)
        elapsed = time.time() - start
        dist = param_distance(params, closed_form_params(regime, d))
        distances[regime.value] = (dist, elapsed)
        assert elapsed < 600, f"{regime.value} run exceeded 10 minutes"
    ok = all(dist <= 0.05 for dist, _ in distances.values())
    _report(ok, "criterion 1 (training recovers all three closed forms)",
            ", ".join(f"{k}: dist={v[0]:.4f} in {v[1]:.0f}s"
                      for k, v in distances.items()))
    for regime, (dist, _) in distances.items():
        assert dist <= 0.05, f"{regime}: distance {dist:.4f} > 0.05"


STD100 = closed_form_params(Regime.STANDARD, 100)
ADV100 = closed_form_params(Regime.ADVERSARIAL, 100)


def test_criterion_2_table1_synthetic_attainable():
    train_task = EvalTask(TrainDistSpec(d=100, lam=0.1, c=1), 1000, 0.15,
                          20000, seed=2, n_batches=100)
    te_task = EvalTask(TestDistSpec(10, 90, 0, alpha=1.0, beta=0.1, gamma=0.0),
                       1000, 0.2, 20000, seed=2, n_batches=100)
    std_tr = evaluate(STD100, train_task)
    adv_tr = evaluate(ADV100, train_task)
    std_te = evaluate(STD100, te_task)
    adv_te = evaluate(ADV100, te_task)
    checks = {
        "D^tr standard clean >= 98": std_tr.clean_accuracy >= 0.98,
        "D^tr standard robust <= 2": std_tr.robust_accuracy <= 0.02,
        "D^tr adversarial clean >= 98": adv_tr.clean_accuracy >= 0.98,
        "D^tr adversarial robust >= 98": adv_tr.robust_accuracy >= 0.98,
        "D^te standard clean >= 98": std_te.clean_accuracy >= 0.98,
        "D^te adversarial clean >= 96": adv_te.clean_accuracy >= 0.96,
        "D^te adversarial robust >= 90": adv_te.robust_accuracy >= 0.90,
    }
    _report(all(checks.values()), "criterion 2 (synthetic benchmark, attainable clauses)",
            f"D^tr std {100*std_tr.clean_accuracy:.1f}/{100*std_tr.robust_accuracy:.1f}, "
            f"adv {100*adv_tr.clean_accuracy:.1f}/{100*adv_tr.robust_accuracy:.1f}; "
            f"D^te std {100*std_te.clean_accuracy:.1f}/{100*std_te.robust_accuracy:.1f}, "
            f"adv {100*adv_te.clean_accuracy:.1f}/{100*adv_te.robust_accuracy:.1f}")
    for label, ok in checks.items():
        assert ok, label


def test_criterion_2_table1_synthetic_dte_standard_robust():
    # As stated, this clause cannot hold: the attacked standard margin on
    # the normal test family is c*(T - eps*d) with c > 0 and
    # T ~ N(d_rob*alpha + d_vul*beta, d_rob*alpha^2 + d_vul*beta^2)
    # = N(19, 10.9), so at eps = 0.2 the success probability is
    # P(T > 20) ~= 38%, far above 2%. Budgets in [0.26, 0.37] would satisfy
    # every bound of this table simultaneously.
    te_task = EvalTask(TestDistSpec(10, 90, 0, alpha=1.0, beta=0.1, gamma=0.0),
                       1000, 0.2, 20000, seed=2, n_batches=100)
    std_te = evaluate(STD100, te_task)
    ok = std_te.robust_accuracy <= 0.02
    _report(ok, "criterion 2 (D^te standard robust <= 2 at eps = 0.2)",
            f"measured {100*std_te.robust_accuracy:.1f}% "
            f"(analytic tail P(N(19, 10.9) > 20) = 38.1%)")
    assert ok, (
        f"standard robust accuracy {100*std_te.robust_accuracy:.1f}% > 2%: "
        "unattainable at eps = 0.2; the normal-tail value is 38.1%")


@pytest.mark.skipif(DATA_DIR is None,
                    reason="ICL_DATA_DIR not set; real datasets unavailable")
def test_criterion_3_table1_real():
    from robicl import realdata

    bounds = {
        "mnist": {"eps": 0.1, "standard": (94, 4), "adversarial": (93, 72)},
        "fmnist": {"eps": 0.15, "standard": (91, 20), "adversarial": (89, 62)},
        "cifar10": {"eps": 0.1, "standard": (68, 21), "adversarial": (64, 34)},
    }
    start = time.time()
    failures = []
    for name, spec in bounds.items():
        pairs = realdata.build_pairs(DATA_DIR, name)
        if pairs is None:
            pytest.skip(f"{name} files not found under {DATA_DIR}")
        d = pairs[0].train.d
        params = [closed_form_params(Regime.STANDARD, d),
                  closed_form_params(Regime.ADVERSARIAL, d)]
        reports = evaluate_pairs(params, pairs, spec["eps"], seed=3)
        for i, model in enumerate(("standard", "adversarial")):
            clean, robust = reports[i].clean_accuracy, reports[i].robust_accuracy
            t_clean, t_robust = spec[model]
            line = (f"{name} {model}: {100*clean:.1f}/{100*robust:.1f} "
                    f"(target {t_clean}+-5 / {t_robust}+-5)")
            print(line)
            if abs(100 * clean - t_clean) > 5 or abs(100 * robust - t_robust) > 5:
                failures.append(line)
    elapsed = time.time() - start
    ok = not failures and elapsed < 1800
    _report(ok, "criterion 3 (real-data benchmark within +-5 points)",
            f"{elapsed:.0f}s")
    assert elapsed < 1800, "real-data run exceeded 30 minutes"
    assert not failures, "; ".join(failures)


def test_criterion_4_score_loss_duality():
    n_sets, n_demos = 10000, 1000
    worst_z = 0.0
    argmax_ok = True
    for d in (2, 5, 10):
        for lam in (0.1, 0.5):
            rng = np.random.default_rng(100 + d)
            th = epsilon_thresholds(d, lam)
            grams = np.empty((n_sets, d + 1, d + 1))
            u_q = np.empty((n_sets, d))
            for lo in range(0, n_sets, 2000):
                b = min(2000, n_sets - lo)
                c = rng.integers(d, size=b)
                u = rng.uniform(0, lam, size=(b, n_demos + 1, d))
                u[np.arange(b), :, c] = 1.0
                u_q[lo:lo + b] = u[:, n_demos, :]
                zeta = np.concatenate(
                    [u[:, :n_demos, :], np.ones((b, n_demos, 1))], axis=2)
                grams[lo:lo + b] = np.einsum("bni,bnj->bij", zeta, zeta) / n_demos
            for eps in (0.0, th.eps4, th.eps7, th.eps1):
                losses = {}
                for dp in range(d + 1):
                    for b_last in (0, 1):
                        rp, _ = map_to_params(dp, b_last, d, lam, eps)
                        w = np.einsum("i,bij->bj", rp.b, grams) @ rp.a
                        vals = (-np.einsum("bk,bk->b", w, u_q)
                                + eps * np.abs(w).sum(axis=1))
                        losses[(dp, b_last)] = vals
                        target = -score(dp, b_last, d, lam, eps) / d
                        se = vals.std(ddof=1) / math.sqrt(n_sets)
                        if se > 1e-14:
                            z = abs(vals.mean() - target) / se
                            worst_z = max(worst_z, z)
                            assert z <= 3, (
                                f"d={d} lam={lam} eps={eps:.4f} "
                                f"(d'={dp}, b={b_last}): z={z:.2f}")
                        else:
                            assert abs(vals.mean() - target) <= 1e-12
                # the score argmax must coincide with the empirical loss
                # argmin up to paired MC noise
                best_dp, best_b, _, _ = brute_force_optimum(d, lam, eps)
                emp_argmin = min(losses, key=lambda k: losses[k].mean())
                diff = losses[(best_dp, best_b)] - losses[emp_argmin]
                se = diff.std(ddof=1) / math.sqrt(n_sets)
                if diff.mean() > 3 * max(se, 1e-14):
                    argmax_ok = False
    _report(worst_z <= 3 and argmax_ok, "criterion 4 (score/loss duality)",
            f"worst |z| = {worst_z:.2f} over the full grid")
    assert argmax_ok, "score argmax is not an empirical loss argmin"


def test_criterion_5_threshold_ordering():
    rng = np.random.default_rng(104)
    for _ in range(1000):
        d = int(rng.integers(2, 501))
        lam = float(rng.uniform(0.01, 0.99))
        ordered = epsilon_thresholds(d, lam).ordered()
        assert all(a <= b + 1e-12 for a, b in zip(ordered, ordered[1:])), (d, lam)
    for lam in (0.05, 0.25, 0.5, 0.75, 0.95):
        assert epsilon_thresholds(1, lam).eps1 == pytest.approx(1.0, abs=1e-15)
    _report(True, "criterion 5 (threshold ordering, 1000 draws; eps1(1) = 1)")


def test_criterion_6_attack_optimality():
    rng = np.random.default_rng(105)
    for _ in range(100):
        d = int(rng.integers(1, 13))
        n = int(rng.integers(1, 8))
        demos = [(rng.normal(size=d), 1 if b else -1)
                 for b in rng.integers(0, 2, size=n)]
        query = rng.normal(size=d)
        z = build_prompt(demos, query)
        rp = ReducedParams(rng.normal(size=d + 1), rng.normal(size=(d + 1, d)))
        y = int(rng.choice((-1, 1)))
        eps = float(rng.uniform(0, 1))
        from robicl.model import robust_margin
        closed = robust_margin(rp, z, y, eps)
        corner_min = min(
            y * reduced_predict(rp, build_prompt(demos, query, eps * np.array(s)))
            for s in itertools.product((-1.0, 1.0), repeat=d))
        assert abs(closed - corner_min) <= 1e-9, (d, closed, corner_min)
    _report(True, "criterion 6 (closed-form attack = exhaustive corner minimum)")


def test_criterion_7_tradeoff():
    spec = TradeoffSpec(p=0.8, alpha=1.0, beta=0.1, d=21, n_demos=1000,
                        trials=10000)
    out = tradeoff_experiment(
        spec, [closed_form_params(Regime.STANDARD, 21),
               closed_form_params(Regime.ADVERSARIAL, 21)], seed=106)
    std_acc = out["standard"]["accuracy"]
    adv_acc = out["adversarial"]["accuracy"]
    ok = std_acc >= 0.99 and abs(adv_acc - 0.8) <= 0.02
    _report(ok, "criterion 7 (accuracy trade-off)",
            f"standard {100*std_acc:.1f}%, adversarial {100*adv_acc:.1f}%")
    assert std_acc >= 0.99
    assert abs(adv_acc - 0.8) <= 0.02


def test_criterion_8_sample_size_standard_bound():
    spec = TradeoffSpec(p=0.55, alpha=1.0, beta=0.1, d=21, n_demos=4)
    rows = sample_size_experiment(
        spec, [4, 8, 16, 32],
        [closed_form_params(Regime.STANDARD, 21),
         closed_form_params(Regime.ADVERSARIAL, 21)],
        n_sets=10000, seed=107)
    ok = all(row["standard"] >= row["bound"] for row in rows)
    _report(ok, "criterion 8 (standard fraction meets 1 - exp(-pN))",
            ", ".join(f"N={r['N']}: {r['standard']:.3f} >= {r['bound']:.3f}"
                      for r in rows))
    for row in rows:
        assert row["standard"] >= row["bound"], row


def test_criterion_8_sample_size_adversarial_separation():
    # As stated, this clause cannot hold at these parameters: the
    # adversarial expected query margin is 0.7 + 0.5*mean(y_n x_{n,1}) with
    # the mean bounded below by -1, hence always positive, so the fraction
    # is 1.0 for every N. The small-sample separation requires
    # (d-1)*beta + 1 < alpha (here 3 > 1).
    spec = TradeoffSpec(p=0.55, alpha=1.0, beta=0.1, d=21, n_demos=4)
    rows = sample_size_experiment(
        spec, [4],
        [closed_form_params(Regime.STANDARD, 21),
         closed_form_params(Regime.ADVERSARIAL, 21)],
        n_sets=10000, seed=107)
    std_frac, adv_frac = rows[0]["standard"], rows[0]["adversarial"]
    ok = adv_frac < std_frac
    _report(ok, "criterion 8 (adversarial fraction strictly lower at N = 4)",
            f"standard {std_frac:.4f}, adversarial {adv_frac:.4f}")
    assert ok, (
        f"adversarial fraction {adv_frac:.4f} is not strictly below the "
        f"standard fraction {std_frac:.4f}: both margins are deterministically "
        "positive at these parameters (requires alpha > (d-1)*beta + 1)")


def test_criterion_9_adversarial_context():
    std = closed_form_params(Regime.STANDARD, 100)
    report = adversarial_context_eval(
        std, TrainDistSpec(d=100, lam=0.1, c=1), eps=0.15, n_demos=1000,
        trials=10000, seed=108, n_batches=100)
    ok = report.mean_margin <= 0.0 and report.robust_accuracy <= 0.02
    _report(ok, "criterion 9 (naive adversarial context does not help)",
            f"mean margin {report.mean_margin:.2f}, "
            f"robust {100*report.robust_accuracy:.2f}%")
    assert report.mean_margin <= 0.0
    assert report.robust_accuracy <= 0.02


@pytest.mark.skipif(DATA_DIR is None,
                    reason="ICL_DATA_DIR not set; real datasets unavailable")
def test_criterion_10_preprocessing_statistics():
    from robicl import realdata
    from robicl.distributions import feature_stats

    pairs = realdata.build_pairs(DATA_DIR, "mnist")
    if pairs is None:
        pytest.skip(f"mnist files not found under {DATA_DIR}")
    for pair in pairs:
        aligned_sums = (pair.train.labels[:, None] * pair.train.features).sum(axis=0)
        assert np.all(aligned_sums >= 0.0), pair.name
        stats = feature_stats(pair.train)
        frac = (stats.total_cov >= 0.0).mean()
        assert frac > 0.5, f"{pair.name}: only {100*frac:.1f}% nonnegative"
    _report(True, "criterion 10 (alignment exact; covariance majority nonnegative)",
            f"{len(pairs)} pairs")
