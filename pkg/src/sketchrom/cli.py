"""Command-line experiment runner.

Every file written by a subcommand carries the full run configuration: CSV
files start with a ``# config: {...}`` line and JSON files have a
``config`` key.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import os
import sys

import numpy as np

from . import __version__
from .basis_gen import (ResidencyTracker, classical_pod, greedy, snapshot_stream, sketched_pod,
                        streaming_pod_driver)
from .benchmarks import CloakConfig, ThermalBlockConfig, build_cloak, build_thermal_block
from .core_la import SingularSystemError, read_problem, write_problem
from .embeddings import KINDS, embedding_for_space
from .sketch import build_sketch, load_sketch, read_header, save_sketch
from . import studies


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def _config(args) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg["version"] = __version__
    return cfg


def write_csv(path: str, rows: list, config: dict) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
        if rows:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)


def read_csv(path: str):
    """Return ``(config, rows)`` from a file written by :func:`write_csv`."""
    with open(path) as fh:
        first = fh.readline()
        config = json.loads(first[len("# config: "):])
        rows = list(csv.DictReader(fh))
    return config, rows


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    if isinstance(x, complex):
        return [x.real, x.imag]
    return x


def write_json(path: str | None, payload: dict, config: dict) -> None:
    doc = {"config": config, **_jsonable(payload)}
    text = json.dumps(doc, indent=2, sort_keys=True)
    if path is None:
        print(text)
        return
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(text + "\n")


def _ints(text: str) -> list:
    return [int(x) for x in text.split(",") if x]


def _out(args, name: str) -> str:
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


def _basis(problem, args):
    """Reduced basis for the studies: loaded from ``--basis`` or built by a
    classical greedy run on ``--train-size`` points."""
    if getattr(args, "basis", None):
        return np.load(args.basis)
    train = problem.domain.sample(args.train_size, args.train_seed)
    return greedy(problem, train, mode="classical", i_max=args.r).basis


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_embed_verify(args) -> int:
    eps = studies.embedding_trials(args.kind, args.k, args.n, args.d, args.trials, args.seed)
    payload = {"epsilon_quantiles": {str(p): float(np.quantile(eps, p)) for p in (0.5, 0.9, 0.99, 1.0)},
               "failure_rate": float(np.mean(eps > args.eps)), "trials": args.trials}
    write_json(args.out, payload, _config(args))
    return 0


def cmd_bench(args) -> int:
    if args.which == "thermal-block":
        problem = build_thermal_block(ThermalBlockConfig(dim=args.dim, res=args.res, blocks=args.blocks,
                                                         cap=args.cap))
    else:
        problem = build_cloak(CloakConfig(layers=args.layers, kappa0=args.kappa0, res=args.res, cap=args.cap))
    path = write_problem(problem, args.out)
    print(json.dumps({"problem": path, "n": problem.n, "m_A": problem.A.m, "param_dim": problem.param_dim}))
    return 0


def cmd_sketch(args) -> int:
    if args.action == "info":
        with open(args.file, "rb") as fh:
            print(json.dumps(read_header(fh), indent=2, sort_keys=True))
        return 0
    if args.action == "dump":
        sk = load_sketch(args.file)
        arrays = {"Ub_sk": sk.Ub_sk}
        arrays.update({f"V_sk_{i}": f for i, f in enumerate(sk.V_sk.factors)})
        arrays.update({f"b_sk_{i}": f for i, f in enumerate(sk.b_sk.factors)})
        arrays.update({f"l_r_{i}": f for i, f in enumerate(sk.l_r.factors)})
        np.savez(args.out, **arrays)
        return 0
    problem = read_problem(args.problem)
    theta = embedding_for_space(args.kind, args.k, problem.space, args.seed)
    U = np.column_stack(list(snapshot_stream(problem, problem.domain.sample(args.snapshots, args.snap_seed))))
    save_sketch(build_sketch(problem, theta, U), args.out)
    return 0


def cmd_greedy(args) -> int:
    problem = read_problem(args.problem)
    train = problem.domain.sample(args.train_size, args.train_seed)
    theta = None
    if args.mode == "sketched":
        theta = embedding_for_space(args.kind, args.k, problem.space, args.seed)
    kprime = args.kprime if args.kprime > 0 else None
    st = greedy(problem, train, tau=args.tau, mode=args.mode, theta=theta, k_prime=kprime,
                gamma_seed=args.seed + 1, i_max=args.r)
    cfg = _config(args)
    write_json(_out(args, "greedy.json"), {"selected": st.selected, "trace": st.trace,
                                           "failures": st.failures, "gamma_seeds": st.gamma_seeds}, cfg)
    write_csv(_out(args, "greedy.csv"), [{"iteration": i, "indicator": v} for i, v in enumerate(st.trace)], cfg)
    if st.basis is not None:
        np.save(_out(args, "basis.npy"), st.basis)
    if st.sketch is not None:
        save_sketch(st.sketch, _out(args, "sketch.thsk"))
    return 0


def cmd_pod(args) -> int:
    problem = read_problem(args.problem)
    mus = problem.domain.sample(args.m, args.snap_seed)
    cfg = _config(args)
    if args.mode == "classical":
        U_m = np.column_stack(list(snapshot_stream(problem, mus)))
        U_r, delta, sv = classical_pod(U_m, problem.space, args.r)
        np.save(_out(args, "basis.npy"), U_r)
        write_json(_out(args, "pod.json"), {"delta": delta, "singular_values": sv}, cfg)
        return 0
    theta = embedding_for_space(args.kind, args.k, problem.space, args.seed)
    if args.mode == "sketched":
        U_m = np.column_stack(list(snapshot_stream(problem, mus)))
        res = sketched_pod(build_sketch(problem, theta, U_m), args.r)
        tracker = None
    else:
        tracker = ResidencyTracker()
        shards = [snapshot_stream(problem, part) for part in np.array_split(mus, args.shards)]
        res = streaming_pod_driver(problem, shards, theta, args.r, tracker)
    np.save(_out(args, "coefficients.npy"), res.T_r)
    save_sketch(res.sketch, _out(args, "sketch.thsk"))
    payload = {"delta_pod": res.delta_pod, "eigenvalues": res.eigenvalues, "r": res.r}
    if tracker is not None:
        payload["peak_live_snapshots"] = tracker.peak
        payload["theta_applications"] = theta.apply_count
    write_json(_out(args, "pod.json"), payload, cfg)
    return 0


def cmd_study_projection(args) -> int:
    problem = read_problem(args.problem)
    U = _basis(problem, args)
    test = problem.domain.sample(args.test_size, args.test_seed)
    res = studies.projection_study(problem, U, test, args.ks, args.reps, args.kind, args.seed)
    cfg = _config(args)
    write_csv(_out(args, "projection.csv"), studies.projection_rows(res), cfg)
    write_json(_out(args, "projection.json"), {"classical": res["classical"],
               "failures": {k: v["failures"] for k, v in res["sketched"].items()}}, cfg)
    return 0


def cmd_study_pd(args) -> int:
    problem = read_problem(args.problem)
    U = _basis(problem, args)
    if args.dual_basis:
        U_du = np.load(args.dual_basis)
    else:
        dual_train = problem.domain.sample(args.train_size, args.train_seed)
        U_du = greedy(problem.dual(), dual_train, mode="classical", i_max=args.r_du).basis
    test = problem.domain.sample(args.test_size, args.test_seed)
    res = studies.pd_study(problem, U, U_du, test, args.ks, args.reps, args.i_du, args.kind, args.seed)
    cfg = _config(args)
    write_csv(_out(args, "pd.csv"), studies.pd_rows(res), cfg)
    write_json(_out(args, "pd.json"), {"slope": res["slope"], "d_r": res["d_r"], "d_pd": res["d_pd"]}, cfg)
    return 0


def cmd_study_roundoff(args) -> int:
    problem = read_problem(args.problem)
    U = _basis(problem, args)
    mu = problem.domain.sample(1, args.test_seed)[0]
    theta = embedding_for_space(args.kind, args.k, problem.space, args.seed)
    t = np.logspace(-1, -args.decades, args.decades)
    res = studies.roundoff_study(problem, U, mu, theta, t, args.seed)
    rows = [{"t": a, "true": b, "classical": c, "sketched": d}
            for a, b, c, d in zip(res["t"], res["true"], res["classical"], res["sketched"])]
    write_csv(_out(args, "roundoff.csv"), rows, _config(args))
    return 0


def cmd_study_greedy(args) -> int:
    problem = read_problem(args.problem)
    train = problem.domain.sample(args.train_size, args.train_seed)
    res = studies.greedy_study(problem, train, args.r, args.k, args.kprime, args.kind, args.seed)
    cl, sk = res["classical_trace"], res["sketched_trace"]
    rows = [{"iteration": i, "classical": cl[i] if i < len(cl) else "", "sketched": sk[i] if i < len(sk) else ""}
            for i in range(max(len(cl), len(sk)))]
    cfg = _config(args)
    write_csv(_out(args, "greedy_study.csv"), rows, cfg)
    write_json(_out(args, "greedy_study.json"), {k: v for k, v in res.items() if not k.endswith("trace")}, cfg)
    return 0


def cmd_study_pod(args) -> int:
    problem = read_problem(args.problem)
    U_m = np.column_stack(list(snapshot_stream(problem, problem.domain.sample(args.m, args.snap_seed))))
    cfg = _config(args)
    res = studies.pod_study(problem, U_m, args.r, args.ks, args.reps, args.kind, args.seed)
    write_csv(_out(args, "pod_k.csv"), studies.pod_rows(res), cfg)
    res_r = studies.pod_r_sweep(problem, U_m, args.rs, args.k, args.reps, args.kind, args.seed)
    write_csv(_out(args, "pod_r.csv"), studies.pod_r_rows(res_r, args.k), cfg)
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _embedding_args(p, k=400):
    p.add_argument("--kind", choices=KINDS, default="gaussian")
    p.add_argument("--k", type=int, default=k)
    p.add_argument("--seed", type=int, default=0)


def _basis_args(p, r=50):
    p.add_argument("--basis", help=".npy basis; otherwise built by classical greedy")
    p.add_argument("--r", type=int, default=r)
    p.add_argument("--train-size", type=int, default=500)
    p.add_argument("--train-seed", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sketchrom", description=__doc__.splitlines()[0])
    ap.add_argument("--deterministic", action="store_true",
                    help="run BLAS single-threaded so floating-point reductions are reproducible")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("embed-verify", help="empirical eps statistics of an embedding distribution")
    p.add_argument("--kind", choices=KINDS, default="gaussian")
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--eps", type=float, default=0.5, help="failure threshold")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="JSON file (stdout if omitted)")
    p.set_defaults(func=cmd_embed_verify)

    p = sub.add_parser("bench", help="write a benchmark problem directory")
    bsub = p.add_subparsers(dest="which", required=True)
    q = bsub.add_parser("thermal-block")
    q.add_argument("--dim", type=int, default=3, choices=(2, 3))
    q.add_argument("--res", type=int, default=16)
    q.add_argument("--blocks", type=int, default=2)
    q.add_argument("--cap", type=int, default=20000)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_bench)
    q = bsub.add_parser("cloak")
    q.add_argument("--layers", type=int, default=10)
    q.add_argument("--kappa0", type=float, default=CloakConfig.kappa0)
    q.add_argument("--res", type=int, default=64)
    q.add_argument("--cap", type=int, default=20000)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_bench)

    p = sub.add_parser("sketch", help="build or inspect sketch files")
    ssub = p.add_subparsers(dest="action", required=True)
    q = ssub.add_parser("build")
    q.add_argument("problem")
    _embedding_args(q)
    q.add_argument("--snapshots", type=int, default=20)
    q.add_argument("--snap-seed", type=int, default=2)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_sketch)
    q = ssub.add_parser("info")
    q.add_argument("file")
    q.set_defaults(func=cmd_sketch)
    q = ssub.add_parser("dump")
    q.add_argument("file")
    q.add_argument("--out", required=True, help=".npz file")
    q.set_defaults(func=cmd_sketch)

    p = sub.add_parser("greedy", help="classical or sketched greedy basis generation")
    p.add_argument("problem")
    p.add_argument("--mode", choices=("classical", "sketched"), default="classical")
    _embedding_args(p)
    p.add_argument("--kprime", type=int, default=100, help="0 disables the second-level sketch")
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--r", type=int, default=50, help="maximum number of iterations")
    p.add_argument("--train-size", type=int, default=500)
    p.add_argument("--train-seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_greedy)

    p = sub.add_parser("pod", help="classical, sketched or streaming POD")
    p.add_argument("problem")
    p.add_argument("--mode", choices=("classical", "sketched", "streaming"), default="sketched")
    _embedding_args(p, 500)
    p.add_argument("--r", type=int, default=20)
    p.add_argument("--m", type=int, default=200)
    p.add_argument("--shards", type=int, default=4)
    p.add_argument("--snap-seed", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pod)

    p = sub.add_parser("study-projection", help="e_P and Delta_P quantiles versus k")
    p.add_argument("problem")
    _basis_args(p)
    _embedding_args(p)
    p.add_argument("--ks", type=_ints, default=[100, 200, 400, 800])
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--test-size", type=int, default=50)
    p.add_argument("--test-seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_study_projection)

    p = sub.add_parser("study-pd", help="primal-dual output errors versus k")
    p.add_argument("problem")
    _basis_args(p)
    _embedding_args(p)
    p.add_argument("--dual-basis")
    p.add_argument("--r-du", type=int, default=50)
    p.add_argument("--i-du", type=int, default=30)
    p.add_argument("--ks", type=_ints, default=[50, 100, 200, 400, 800, 1600])
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--test-size", type=int, default=50)
    p.add_argument("--test-seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_study_pd)

    p = sub.add_parser("study-roundoff", help="residual-norm evaluations near the exact solution")
    p.add_argument("problem")
    _basis_args(p, 20)
    _embedding_args(p)
    p.add_argument("--decades", type=int, default=15)
    p.add_argument("--test-seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_study_roundoff)

    p = sub.add_parser("study-greedy", help="classical versus sketched greedy convergence")
    p.add_argument("problem")
    _embedding_args(p)
    p.add_argument("--kprime", type=int, default=100)
    p.add_argument("--r", type=int, default=50)
    p.add_argument("--train-size", type=int, default=500)
    p.add_argument("--train-seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_study_greedy)

    p = sub.add_parser("study-pod", help="sketched POD versus k and versus r")
    p.add_argument("problem")
    _embedding_args(p, 500)
    p.add_argument("--r", type=int, default=20)
    p.add_argument("--m", type=int, default=200)
    p.add_argument("--ks", type=_ints, default=[100, 200, 400, 800, 1600])
    p.add_argument("--rs", type=_ints, default=[5, 10, 20, 40])
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--snap-seed", type=int, default=2)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_study_pod)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    ctx = contextlib.nullcontext()
    if args.deterministic:
        from threadpoolctl import threadpool_limits
        ctx = threadpool_limits(limits=1)
    try:
        with ctx:
            return args.func(args)
    except (ValueError, OSError, KeyError, SingularSystemError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
