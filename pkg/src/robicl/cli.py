"""Command-line surface: train, eval, table1, sweep, score-table,
verify-theory, preprocess, stats, attack-demo.

Every command writes a run manifest (resolved config, seed, version, input
digests, output paths) next to its outputs before producing them, so a run
can be reproduced from the manifest alone. Exit codes: 0 success,
1 validation error, 2 I/O or format error.
"""

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, distributions, evalharness, realdata, theory
from .distributions import FormatError, TestDistSpec, TrainDistSpec
from .evalharness import EvalTask
from .model import ShapeError, TransformerParams, build_prompt, optimal_attack, predict
from .theory import Regime
from .training import TrainConfig, train


class CliError(Exception):
    def __init__(self, message, code=1):
        super().__init__(message)
        self.code = code


def save_params(params: TransformerParams, path):
    with open(path, "w") as f:
        json.dump(params.to_json(), f)


def load_params(path) -> TransformerParams:
    try:
        with open(path) as f:
            obj = json.load(f)
    except json.JSONDecodeError as e:
        raise CliError(f"{path}: malformed JSON at line {e.lineno}: {e.msg}", 2)
    except OSError as e:
        raise CliError(f"cannot read {path}: {e}", 2)
    try:
        return TransformerParams.from_json(obj)
    except (KeyError, ShapeError, ValueError) as e:
        raise CliError(f"{path}: invalid parameter file: {e}", 2)


def resolve_params(spec: str, d: int | None) -> TransformerParams:
    """--params accepts std|adv|strong shortcuts or a JSON file path."""
    shortcuts = {"std": Regime.STANDARD, "adv": Regime.ADVERSARIAL,
                 "strong": Regime.STRONG_ADVERSARIAL}
    if spec in shortcuts:
        if d is None:
            raise CliError("--d is required with a closed-form --params shortcut")
        return theory.closed_form_params(shortcuts[spec], d)
    params = load_params(spec)
    if d is not None and params.d != d:
        raise CliError(f"parameter file has d={params.d} but --d {d} was given")
    return params


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, seed,
                   input_files=(), outputs=()):
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "inputs": {str(p): _digest(p) for p in input_files if Path(p).exists()},
        "outputs": [str(p) for p in outputs],
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
    return path


def _add_common(parser, with_seed=True):
    parser.add_argument("--out-dir", default=".", help="directory for outputs")
    if with_seed:
        parser.add_argument("--seed", type=int, default=None,
                            help="RNG seed (default: drawn and recorded)")
    parser.add_argument("--config", help="JSON config file; flags override it")


_SUBPARSERS = {}


def build_parser():
    parser = argparse.ArgumentParser(prog="robicl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    _real_add_parser = sub.add_parser

    def add_parser(name, **kwargs):
        _SUBPARSERS[name] = _real_add_parser(name, **kwargs)
        return _SUBPARSERS[name]

    sub.add_parser = add_parser

    p = sub.add_parser("train", help="adversarially pretrain a transformer")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--n-demos", type=int, default=1000)
    p.add_argument("--datasets-per-step", type=int, default=1000)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--init", default="uniform")
    p.add_argument("--mode", default="full", choices=("full", "p_only", "q_only"))
    p.add_argument("--out", default="params.json")
    _add_common(p)

    p = sub.add_parser("eval", help="clean/robust accuracy on a task")
    p.add_argument("--params", required=True, help="std|adv|strong or a JSON file")
    p.add_argument("--d", type=int)
    p.add_argument("--dataset", required=True,
                   choices=("train-dist", "test-normal", "mnist", "fmnist", "cifar10"))
    p.add_argument("--data-dir", default=os.environ.get("ICL_DATA_DIR"))
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--c", type=int, default=1)
    p.add_argument("--d-rob", type=int, default=10)
    p.add_argument("--d-vul", type=int, default=90)
    p.add_argument("--d-irr", type=int, default=0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--n-demos", type=int, default=1000)
    p.add_argument("--trials", type=int, default=20000)
    p.add_argument("--batches", type=int, default=100)
    _add_common(p)

    p = sub.add_parser("table1", help="benchmark table over all columns")
    p.add_argument("--data-dir", default=os.environ.get("ICL_DATA_DIR"))
    p.add_argument("--d", type=int, default=100, help="synthetic dimension")
    p.add_argument("--n-demos", type=int, default=1000)
    p.add_argument("--trials", type=int, default=20000)
    p.add_argument("--batches", type=int, default=100)
    _add_common(p)

    p = sub.add_parser("sweep", help="accuracy along one task axis")
    p.add_argument("--axis", required=True,
                   choices=("d_rob", "d_vul", "d_irr", "N", "eps"))
    p.add_argument("--values", required=True,
                   help="comma-separated axis values")
    p.add_argument("--source", default="test-normal",
                   choices=("test-normal", "train-dist"))
    p.add_argument("--eps", type=float, default=0.2)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--c", type=int, default=1)
    p.add_argument("--d", type=int, default=100)
    p.add_argument("--d-rob", type=int, default=10)
    p.add_argument("--d-vul", type=int, default=90)
    p.add_argument("--d-irr", type=int, default=0)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=0.1)
    p.add_argument("--gamma", type=float, default=0.1)
    p.add_argument("--n-demos", type=int, default=200)
    p.add_argument("--trials", type=int, default=10000)
    p.add_argument("--batches", type=int, default=50)
    _add_common(p)

    p = sub.add_parser("score-table", help="score values over (d', b_last)")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--eps", type=float, required=True)
    _add_common(p, with_seed=False)

    p = sub.add_parser("verify-theory",
                       help="thresholds and regime table for (d, lambda)")
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    _add_common(p, with_seed=False)

    p = sub.add_parser("preprocess", help="center/align a real class pair")
    p.add_argument("--dataset", required=True, choices=("mnist", "fmnist", "cifar10"))
    p.add_argument("--data-dir", default=os.environ.get("ICL_DATA_DIR"))
    p.add_argument("--pair", default="0,1", help="class pair, e.g. 0,1")
    _add_common(p, with_seed=False)

    p = sub.add_parser("stats", help="feature statistics of a pair")
    p.add_argument("--dataset", required=True, choices=("mnist", "fmnist", "cifar10"))
    p.add_argument("--data-dir", default=os.environ.get("ICL_DATA_DIR"))
    p.add_argument("--pair", default="0,1")
    _add_common(p, with_seed=False)

    p = sub.add_parser("attack-demo",
                       help="show the optimal attack on one sampled prompt")
    p.add_argument("--d", type=int, default=5)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1)
    p.add_argument("--c", type=int, default=1)
    p.add_argument("--n-demos", type=int, default=20)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--params", default="std")
    _add_common(p)
    return parser


def _load_config_file(args):
    if getattr(args, "config", None):
        try:
            with open(args.config) as f:
                overrides = json.load(f)
        except OSError as e:
            raise CliError(f"cannot read config file: {e}", 2)
        except json.JSONDecodeError as e:
            raise CliError(f"config file: malformed JSON at line {e.lineno}", 2)
        defaults = _SUBPARSERS[args.command]
        for key, value in overrides.items():
            attr = key.replace("-", "_")
            if not hasattr(args, attr):
                raise CliError(f"config file: unknown key {key!r}")
            # flags given on the command line win over the config file
            if defaults.get_default(attr) == getattr(args, attr):
                setattr(args, attr, value)
    return args


def _ensure_seed(args):
    if getattr(args, "seed", None) is None:
        args.seed = int(np.random.SeedSequence().entropy % (2**31))
        print(f"seed not given; using recorded seed {args.seed}")
    return args.seed


def cmd_train(args):
    out_dir = Path(args.out_dir)
    seed = _ensure_seed(args)
    config = TrainConfig(
        d=args.d, lam=args.lam, eps=args.eps, n_demos=args.n_demos,
        datasets_per_step=args.datasets_per_step, steps=args.steps,
        learning_rate=args.lr, momentum=args.momentum, seed=seed,
        mode=args.mode, init=args.init)
    out_path = out_dir / args.out
    history_path = out_dir / "history.csv"
    write_manifest(out_dir, "train", vars(args) | {"config": None}, seed,
                   outputs=[out_path, history_path])
    params, history = train(config)
    save_params(params, out_path)
    lr_map = dict(history.lr_changes)
    with open(history_path, "w") as f:
        f.write("step,loss,lr\n")
        lr = config.learning_rate
        for step, loss in enumerate(history.losses):
            lr = lr_map.get(step, lr)
            f.write(f"{step},{loss},{lr}\n")
    print(f"wrote {out_path}")
    for regime, dist in history.final_distances.items():
        print(f"distance to {regime}: {dist:.4f}")
    return 0


def _eval_task(args):
    if args.dataset == "train-dist":
        if args.d is None:
            raise CliError("--d is required for train-dist")
        source = TrainDistSpec(d=args.d, lam=args.lam, c=args.c)
    elif args.dataset == "test-normal":
        source = TestDistSpec(d_rob=args.d_rob, d_vul=args.d_vul, d_irr=args.d_irr,
                              alpha=args.alpha, beta=args.beta, gamma=args.gamma)
        if args.d is not None and source.d != args.d:
            raise CliError(f"--d {args.d} conflicts with block sizes (sum {source.d})")
    else:
        if not args.data_dir:
            raise CliError("--data-dir (or ICL_DATA_DIR) is required for real datasets")
        pairs = realdata.build_pairs(args.data_dir, args.dataset)
        if pairs is None:
            raise CliError(f"{args.dataset} files not found under {args.data_dir}", 2)
        return pairs
    return EvalTask(source, args.n_demos, args.eps, args.trials,
                    seed=args.seed, n_batches=args.batches)


def cmd_eval(args):
    out_dir = Path(args.out_dir)
    seed = _ensure_seed(args)
    params = resolve_params(args.params, args.d)
    task_or_pairs = _eval_task(args)
    csv_path = out_dir / "eval.csv"
    write_manifest(out_dir, "eval", {k: v for k, v in vars(args).items()},
                   seed, outputs=[csv_path])
    if isinstance(task_or_pairs, list):
        reports = evalharness.evaluate_pairs([params], task_or_pairs, args.eps, seed)
        report = reports[0]
        rows = [{"pair": r["pair"], "clean": r["clean"], "robust": r["robust"]}
                for r in report.per_pair]
    else:
        report = evalharness.evaluate(params, task_or_pairs)
        rows = [{"pair": args.dataset, "clean": report.clean_accuracy,
                 "robust": report.robust_accuracy}]
    evalharness.write_rows_csv(rows, csv_path)
    print(f"clean accuracy:  {100 * report.clean_accuracy:.2f}%")
    print(f"robust accuracy: {100 * report.robust_accuracy:.2f}% (eps={args.eps})")
    print(f"wrote {csv_path}")
    return 0


def cmd_table1(args):
    out_dir = Path(args.out_dir)
    seed = _ensure_seed(args)
    csv_path = out_dir / "table1.csv"
    write_manifest(out_dir, "table1", vars(args), seed, outputs=[csv_path])
    params = [theory.closed_form_params(Regime.STANDARD, args.d),
              theory.closed_form_params(Regime.ADVERSARIAL, args.d)]
    results = evalharness.run_table1(
        params, data_dir=args.data_dir, seed=seed, n_demos=args.n_demos,
        n_batches=args.batches, queries=args.trials,
        warn=lambda m: print(m, file=sys.stderr))
    print(evalharness.format_table1(results))
    evalharness.write_rows_csv(evalharness.table1_rows(results), csv_path)
    print(f"wrote {csv_path}")
    return 0


def cmd_sweep(args):
    out_dir = Path(args.out_dir)
    seed = _ensure_seed(args)
    try:
        values = [float(v) for v in args.values.split(",") if v]
    except ValueError:
        raise CliError(f"cannot parse --values {args.values!r}")
    if args.source == "train-dist":
        source = TrainDistSpec(d=args.d, lam=args.lam, c=args.c)
        d = args.d
    else:
        source = TestDistSpec(d_rob=args.d_rob, d_vul=args.d_vul, d_irr=args.d_irr,
                              alpha=args.alpha, beta=args.beta, gamma=args.gamma)
        d = source.d
    csv_path = out_dir / "sweep.csv"
    write_manifest(out_dir, "sweep", vars(args), seed, outputs=[csv_path])
    base = EvalTask(source, args.n_demos, args.eps, args.trials,
                    seed=seed, n_batches=args.batches)
    if args.axis in ("d_rob", "d_vul", "d_irr", "N"):
        values = [int(v) for v in values]
    rows = []
    for value in values:
        task = evalharness._task_with(base, args.axis, value)
        dim = evalharness._source_dim(task.source)
        for regime in (Regime.STANDARD, Regime.ADVERSARIAL):
            p = theory.closed_form_params(regime, dim)
            report = evalharness.evaluate(p, task)
            rows.append({"axis": args.axis, "axis_value": value,
                         "model": regime.value,
                         "clean_mean": report.clean_accuracy,
                         "clean_sd": report.clean_sd,
                         "robust_mean": report.robust_accuracy,
                         "robust_sd": report.robust_sd})
    evalharness.write_rows_csv(rows, csv_path)
    print(f"wrote {csv_path} ({len(rows)} rows)")
    return 0


def cmd_score_table(args):
    out_dir = Path(args.out_dir)
    csv_path = out_dir / "score_table.csv"
    side_path = out_dir / "score_table.json"
    write_manifest(out_dir, "score-table", vars(args), None,
                   outputs=[csv_path, side_path])
    rows = [{"d_prime": dp, "b_last": b, "score": s}
            for dp, b, s in theory.score_table_rows(args.d, args.lam, args.eps)]
    evalharness.write_rows_csv(rows, csv_path)
    th = theory.epsilon_thresholds(args.d, args.lam)
    r = theory.rs_coefficients(args.d, args.lam, args.eps)
    with open(side_path, "w") as f:
        json.dump({
            "d": args.d, "lambda": args.lam, "eps": args.eps,
            "thresholds": {k: getattr(th, k) for k in
                           ("eps1", "eps2", "eps3", "eps4", "eps5", "eps6",
                            "eps7", "eps_s5")},
            "r": {f"r{i + 1}": r[i] for i in range(7)},
        }, f, indent=2)
    print(f"wrote {csv_path} and {side_path}")
    return 0


def cmd_verify_theory(args):
    th = theory.epsilon_thresholds(args.d, args.lam)
    print(f"thresholds for d={args.d}, lambda={args.lam}:")
    for name in ("eps2", "eps6", "eps4", "eps_s5", "eps7", "eps5", "eps3", "eps1"):
        print(f"  {name:7s} = {getattr(th, name):.6f}")
    print("regime table:")
    for label, eps, regime in (
            ("standard", 0.0, Regime.STANDARD),
            ("adversarial", th.eps7, Regime.ADVERSARIAL),
            ("strong", th.eps1 + 0.01, Regime.STRONG_ADVERSARIAL)):
        dp, b_last, value, params = theory.brute_force_optimum(args.d, args.lam, eps)
        expected = theory.closed_form_params(regime, args.d)
        match = (np.array_equal(params.p, expected.p)
                 and np.array_equal(params.q, expected.q))
        print(f"  eps={eps:.4f} ({label}): argmax (d'={dp}, b={b_last}), "
              f"score={value:.4f}, matches closed form: {match}")
        if not match:
            raise CliError(f"brute-force optimum disagrees with {label} closed form")
    return 0


def _pair_arg(args):
    try:
        a, b = (int(x) for x in args.pair.split(","))
    except ValueError:
        raise CliError(f"cannot parse --pair {args.pair!r}; expected like 0,1")
    if not (0 <= a <= 9 and 0 <= b <= 9 and a != b):
        raise CliError("--pair classes must be distinct digits 0-9")
    return a, b


def cmd_preprocess(args):
    out_dir = Path(args.out_dir)
    if not args.data_dir:
        raise CliError("--data-dir (or ICL_DATA_DIR) is required")
    a, b = _pair_arg(args)
    raw = realdata.load_raw(args.data_dir, args.dataset)
    if raw is None:
        raise CliError(f"{args.dataset} files not found under {args.data_dir}", 2)
    (train_x, train_y), _ = raw
    by_class = distributions.split_by_class(train_x, train_y)
    info = distributions.fit_preprocess(by_class[a], by_class[b])
    dataset = distributions.apply_preprocess(
        info, by_class[a], by_class[b], f"{args.dataset}:{a}v{b}")
    csv_path = out_dir / f"{args.dataset}_{a}v{b}.csv"
    manifest_path = out_dir / f"{args.dataset}_{a}v{b}.json"
    write_manifest(out_dir, "preprocess", vars(args), None,
                   outputs=[csv_path, manifest_path])
    distributions.export_csv(dataset, csv_path)
    distributions.export_manifest(manifest_path, [args.data_dir], (a, b), info)
    print(f"wrote {csv_path} ({len(dataset)} samples, d={dataset.d})")
    return 0


def cmd_stats(args):
    out_dir = Path(args.out_dir)
    if not args.data_dir:
        raise CliError("--data-dir (or ICL_DATA_DIR) is required")
    a, b = _pair_arg(args)
    pairs = realdata.build_pairs(args.data_dir, args.dataset, pairs=[(a, b)])
    if pairs is None:
        raise CliError(f"{args.dataset} files not found under {args.data_dir}", 2)
    stats = distributions.feature_stats(pairs[0].train)
    csv_path = out_dir / f"stats_{args.dataset}_{a}v{b}.csv"
    write_manifest(out_dir, "stats", vars(args), None, outputs=[csv_path])
    rows = [{"dim": i, "mean_yx": stats.mean_yx[i], "total_cov": stats.total_cov[i]}
            for i in range(len(stats.mean_yx))]
    evalharness.write_rows_csv(rows, csv_path)
    frac = float((stats.total_cov >= 0).mean())
    print(f"{args.dataset} pair {a}v{b}: {100 * frac:.1f}% of dimensions have "
          f"nonnegative total covariance")
    print(f"wrote {csv_path}")
    return 0


def cmd_attack_demo(args):
    seed = _ensure_seed(args)
    rng = np.random.default_rng(seed)
    spec = TrainDistSpec(d=args.d, lam=args.lam, c=args.c)
    data = distributions.sample_train(spec, args.n_demos + 1, seed)
    demos = list(zip(data.features[:-1], data.labels[:-1]))
    query, y = data.features[-1], int(data.labels[-1])
    params = resolve_params(args.params, args.d)
    clean_z = build_prompt(demos, query)
    delta = optimal_attack(clean_z, y, params, args.eps)
    attacked_z = build_prompt(demos, query, delta)
    print(f"query label: {y:+d}")
    print(f"clean prediction:    {predict(clean_z, params):+.4f}")
    print(f"attacked prediction: {predict(attacked_z, params):+.4f}")
    print(f"perturbation: {np.array2string(delta, precision=3)}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "table1": cmd_table1,
    "sweep": cmd_sweep,
    "score-table": cmd_score_table,
    "verify-theory": cmd_verify_theory,
    "preprocess": cmd_preprocess,
    "stats": cmd_stats,
    "attack-demo": cmd_attack_demo,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 1 if e.code not in (0, None) else 0
    try:
        _load_config_file(args)
        return COMMANDS[args.command](args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (FormatError,) as e:
        print(f"format error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 2
    except (ValueError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
