"""Experiment drivers comparing classical and sketched reduction.

Each study returns plain dictionaries of numpy arrays; :mod:`sketchrom.cli`
turns them into CSV/JSON files.
"""
from __future__ import annotations

import numpy as np

from .basis_gen import classical_pod, greedy, sketched_pod_from_matrix
from .core_la import ParametricProblem, solve_full
from .embeddings import (Embedding, EmbeddingSpec, embedding_for_space, exact_isometry, sample_embedding,
                         verify_epsilon_embedding)
from .error_est import ClassicalResidualData, DenseResidual, rhs_dual_norms, sketched_residual_norms
from .rom import (build_classical_rom, build_coarse_dual, build_sketched_rom, primal_dual_correct,
                  solve_rom_many)
from .sketch import RieszCache, build_sketch, orthogonalize

QUANTILES = (1.0, 0.9, 0.5, 0.1)


def derive_seed(root: int, *keys: int) -> int:
    """Independent 63-bit seed for run ``keys`` under ``root``."""
    ss = np.random.SeedSequence(int(root), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def solve_many(problem: ParametricProblem, mus) -> np.ndarray:
    return np.column_stack([solve_full(problem, mu) for mu in np.atleast_2d(mus)])


def quantiles(samples, ps=QUANTILES) -> dict:
    samples = np.asarray(samples)
    return {p: float(np.quantile(samples, p)) for p in ps}


def _errors(problem, U, coords, u_test):
    Q = problem.space.Q
    diff = Q @ u_test - (Q @ U) @ coords.T
    return np.linalg.norm(diff, axis=0)


# ---------------------------------------------------------------------------
# oblivious embedding statistics
# ---------------------------------------------------------------------------

def embedding_trials(kind: str, k: int, n: int, d: int, trials: int, seed: int = 0) -> np.ndarray:
    """Observed eps of fresh embeddings on fresh random ``d``-dim subspaces
    of ``R^n``, one pair per trial."""
    eps = np.empty(trials)
    for t in range(trials):
        V = np.random.default_rng(derive_seed(seed, 0, t)).standard_normal((n, d))
        theta = sample_embedding(EmbeddingSpec(kind, k, n, derive_seed(seed, 1, t)))
        eps[t] = verify_epsilon_embedding(theta, V)
    return eps


# ---------------------------------------------------------------------------
# Galerkin projection quality
# ---------------------------------------------------------------------------

def projection_study(problem: ParametricProblem, U, test_mus, ks, reps: int = 20, kind: str = "gaussian",
                     seed: int = 0, u_test=None) -> dict:
    """``e_P`` and ``Delta_P`` of classical and sketched Galerkin projections.

    ``e_P = max ||u - u_r||_U / max ||u||_U`` and
    ``Delta_P = max ||r(u_r)||_{U'} / max ||b||_{U'}`` over the test set.
    """
    test_mus = np.atleast_2d(test_mus)
    if u_test is None:
        u_test = solve_many(problem, test_mus)
    u_norm = problem.space.norm(u_test).max()
    b_norm = rhs_dual_norms(problem, test_mus).max()
    dense = DenseResidual(problem, U)
    cl = build_classical_rom(problem, U)
    a_cl, _ = solve_rom_many(cl, test_mus)
    out = {"classical": {"e_P": float(_errors(problem, U, a_cl, u_test).max() / u_norm),
                         "delta_P": float(dense.norms(a_cl, test_mus).max() / b_norm)},
           "sketched": {}}
    cache = RieszCache(problem, U)
    for k in ks:
        e, d, fails = [], [], 0
        for rep in range(reps):
            theta = embedding_for_space(kind, int(k), problem.space, derive_seed(seed, k, rep))
            sk, T = orthogonalize(cache.sketch(theta))
            coords, failed = solve_rom_many(build_sketched_rom(sk), test_mus)
            fails += len(failed)
            coords = coords @ T.T
            if failed:
                e.append(np.inf)
                d.append(np.inf)
                continue
            e.append(_errors(problem, U, coords, u_test).max() / u_norm)
            d.append(dense.norms(coords, test_mus).max() / b_norm)
        out["sketched"][int(k)] = {"e_P": np.array(e), "delta_P": np.array(d), "failures": fails}
    return out


def projection_rows(res: dict) -> list:
    rows = []
    for k, v in res["sketched"].items():
        qe, qd = quantiles(v["e_P"]), quantiles(v["delta_P"])
        for p in QUANTILES:
            rows.append({"k": k, "p": p, "e_P_classical": res["classical"]["e_P"],
                         "delta_P_classical": res["classical"]["delta_P"],
                         "e_P_sketched": qe[p], "delta_P_sketched": qd[p]})
    return rows


# ---------------------------------------------------------------------------
# primal-dual corrections
# ---------------------------------------------------------------------------

def pd_study(problem: ParametricProblem, U, U_du, test_mus, ks, reps: int = 20, i_du: int = 30,
             kind: str = "gaussian", seed: int = 0, s_exact=None) -> dict:
    """Output errors ``d_P = max |s - s~| / max |s|`` of the corrected outputs.

    The primal and dual reduced solutions are classical Galerkin projections
    on ``U`` and ``U_du``; only the corrections are sketched. The coarse dual
    space is spanned by the first ``i_du`` columns of ``U_du``.
    """
    test_mus = np.atleast_2d(test_mus)
    dual = problem.dual()
    if s_exact is None:
        s_exact = np.array([problem.output(solve_full(problem, mu), mu) for mu in test_mus])
    s_scale = np.abs(s_exact).max()
    cl = build_classical_rom(problem, U)
    cl_du = build_classical_rom(dual, U_du)
    a, _ = solve_rom_many(cl, test_mus)
    a_du, _ = solve_rom_many(cl_du, test_mus)
    s_r = np.array([cl.lr.evaluate(mu) @ x for mu, x in zip(test_mus, a)])
    s_pd = np.array([primal_dual_correct((cl, x), (cl_du, y), mu, "classical")
                     for mu, x, y in zip(test_mus, a, a_du)])
    coarse = build_coarse_dual(problem, U_du[:, :i_du], U_du, U)
    cache = RieszCache(problem, U)
    cache_du = RieszCache(dual, U_du)
    out = {"d_r": float(np.abs(s_exact - s_r).max() / s_scale),
           "d_pd": float(np.abs(s_exact - s_pd).max() / s_scale), "spd": {}, "spdplus": {}}
    for k in ks:
        e1, e2 = [], []
        for rep in range(reps):
            theta = embedding_for_space(kind, int(k), problem.space, derive_seed(seed, k, rep))
            m = build_sketched_rom(cache.sketch(theta))
            m_du = build_sketched_rom(cache_du.sketch(theta))
            cs = coarse.sketched(theta)
            spd = np.array([primal_dual_correct((m, x), (m_du, y), mu, "sketched")
                            for mu, x, y in zip(test_mus, a, a_du)])
            spdp = np.array([primal_dual_correct((m, x), (m_du, y), mu, "improved", cs)
                             for mu, x, y in zip(test_mus, a, a_du)])
            e1.append(np.abs(s_exact - spd).max() / s_scale)
            e2.append(np.abs(s_exact - spdp).max() / s_scale)
        out["spd"][int(k)] = np.array(e1)
        out["spdplus"][int(k)] = np.array(e2)
    ks_arr = np.array(sorted(out["spd"]), dtype=float)
    med = np.array([np.median(out["spd"][int(k)]) for k in ks_arr])
    out["slope"] = float(np.polyfit(np.log(ks_arr), np.log(med), 1)[0]) if len(ks_arr) > 1 else float("nan")
    return out


def pd_rows(res: dict) -> list:
    rows = []
    for k in res["spd"]:
        q1, q2 = quantiles(res["spd"][k]), quantiles(res["spdplus"][k])
        for p in QUANTILES:
            rows.append({"k": k, "p": p, "d_r": res["d_r"], "d_pd": res["d_pd"],
                         "d_spd": q1[p], "d_spdplus": q2[p]})
    return rows


# ---------------------------------------------------------------------------
# round-off behaviour of the residual-norm evaluations
# ---------------------------------------------------------------------------

def roundoff_study(problem: ParametricProblem, U, mu, theta: Embedding, distances, seed: int = 0) -> dict:
    """Residual norms of ``u*_t = u(mu) + t w`` with ``w`` in the reduced space.

    ``U`` is extended by ``u(mu)`` and U-orthonormalized, so every ``u*_t``
    lies in the reduced space. ``w`` is scaled so that ``||A w||_{U'}``
    equals ``||b(mu)||_{U'}``; the relative residual is then about ``t``.
    Reports the residual norm computed directly from the full residual
    vector, through the quadratic expansion, and through the sketch.
    """
    mu = np.asarray(mu, dtype=float)
    space = problem.space
    u = solve_full(problem, mu)
    W, _ = space.orthonormalize(np.column_stack([U, u]))
    a_exact = W.conj().T @ space.apply_R(u)
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(W.shape[1])
    if problem.field == "complex":
        c = c + 1j * rng.standard_normal(W.shape[1])
    A = problem.A.evaluate(mu)
    b = problem.b.evaluate(mu)
    b_norm = float(space.dual_norm(b))
    c = c * b_norm / float(space.dual_norm(A @ (W @ c)))
    data = ClassicalResidualData(problem, W)
    sk = build_sketch(problem, theta, W)
    true, classical, sketched = [], [], []
    for t in distances:
        a = a_exact + t * c
        r = b - A @ (W @ a)
        true.append(float(space.dual_norm(r)))
        classical.append(float(data.norms(a[None], mu[None])[0][0]))
        sketched.append(float(sketched_residual_norms(sk, a[None], mu[None])[0]))
    return {"t": np.asarray(distances, float), "true": np.array(true) / b_norm,
            "classical": np.array(classical) / b_norm, "sketched": np.array(sketched) / b_norm,
            "clamped": data.clamp_count}


# ---------------------------------------------------------------------------
# greedy
# ---------------------------------------------------------------------------

def greedy_study(problem: ParametricProblem, train, r: int, k: int, k_prime: int = 100,
                 kind: str = "gaussian", seed: int = 0) -> dict:
    """Classical and sketched greedy runs of ``r`` iterations; the final
    bases are scored with the exact residual over the training set."""
    train = np.atleast_2d(train)
    b_norm = rhs_dual_norms(problem, train).max()
    st_c = greedy(problem, train, mode="classical", i_max=r)
    theta = embedding_for_space(kind, int(k), problem.space, derive_seed(seed, 0))
    st_s = greedy(problem, train, mode="sketched", theta=theta, k_prime=k_prime,
                  gamma_seed=derive_seed(seed, 1) % (1 << 31), i_max=r)
    out = {"classical_trace": np.array(st_c.trace) / b_norm, "sketched_trace": np.array(st_s.trace) / b_norm,
           "classical_selected": st_c.selected, "sketched_selected": st_s.selected}
    U_c = st_c.basis
    a_c, _ = solve_rom_many(build_classical_rom(problem, U_c), train)
    out["classical_final"] = float(DenseResidual(problem, U_c).norms(a_c, train).max() / b_norm)
    sk, T = orthogonalize(st_s.sketch)
    U_s = np.column_stack(st_s.snapshots) @ T
    a_s, _ = solve_rom_many(build_sketched_rom(sk), train)
    out["sketched_final"] = float(DenseResidual(problem, U_s).norms(a_s, train).max() / b_norm)
    return out


def isometry_greedy(problem: ParametricProblem, train, r: int) -> dict:
    """Classical greedy versus sketched greedy with an exact isometry and no
    second-level compression."""
    st_c = greedy(problem, train, mode="classical", i_max=r)
    st_s = greedy(problem, train, mode="sketched", theta=exact_isometry(problem.space), k_prime=None, i_max=r)
    return {"classical": st_c.selected, "sketched": st_s.selected,
            "classical_trace": np.array(st_c.trace), "sketched_trace": np.array(st_s.trace)}


# ---------------------------------------------------------------------------
# POD
# ---------------------------------------------------------------------------

def pod_study(problem: ParametricProblem, U_m, r: int, ks, reps: int = 5, kind: str = "gaussian",
              seed: int = 0) -> dict:
    """Sketched POD versus k: indicator ``Delta_POD`` and true mean-square
    U-error of the resulting basis, with the optimal error for reference."""
    space = problem.space
    _, opt, _ = classical_pod(U_m, space, r)
    QU = space.Q @ U_m
    m = U_m.shape[1]
    out = {"optimal": opt, "delta_pod": {}, "true": {}}
    for k in ks:
        dp, tr = [], []
        for rep in range(reps):
            theta = embedding_for_space(kind, int(k), space, derive_seed(seed, k, rep))
            res = sketched_pod_from_matrix(theta.apply(U_m), r)
            Z, _ = np.linalg.qr(QU @ res.T_r)
            tr.append(float(np.linalg.norm(QU - Z @ (Z.conj().T @ QU)) ** 2 / m))
            dp.append(res.delta_pod)
        out["delta_pod"][int(k)] = np.array(dp)
        out["true"][int(k)] = np.array(tr)
    return out


def pod_rows(res: dict) -> list:
    rows = []
    for k in res["delta_pod"]:
        for p in QUANTILES:
            rows.append({"k": k, "p": p, "delta_pod": float(np.quantile(res["delta_pod"][k], p)),
                         "true_mse": float(np.quantile(res["true"][k], p)), "optimal_mse": res["optimal"]})
    return rows


def pod_r_sweep(problem: ParametricProblem, U_m, rs, k: int, reps: int = 5, kind: str = "gaussian",
                seed: int = 0) -> dict:
    """Sketched POD versus r at fixed k; same quantities as :func:`pod_study`."""
    space = problem.space
    QU = space.Q @ U_m
    m = U_m.shape[1]
    out = {"optimal": {}, "delta_pod": {}, "true": {}}
    sketches = [embedding_for_space(kind, int(k), space, derive_seed(seed, k, rep)).apply(U_m)
                for rep in range(reps)]
    for r in rs:
        out["optimal"][int(r)] = classical_pod(U_m, space, int(r))[1]
        dp, tr = [], []
        for Ub in sketches:
            res = sketched_pod_from_matrix(Ub, int(r))
            Z, _ = np.linalg.qr(QU @ res.T_r)
            tr.append(float(np.linalg.norm(QU - Z @ (Z.conj().T @ QU)) ** 2 / m))
            dp.append(res.delta_pod)
        out["delta_pod"][int(r)] = np.array(dp)
        out["true"][int(r)] = np.array(tr)
    return out


def pod_r_rows(res: dict, k: int) -> list:
    rows = []
    for r in res["delta_pod"]:
        for p in QUANTILES:
            rows.append({"r": r, "k": k, "p": p, "delta_pod": float(np.quantile(res["delta_pod"][r], p)),
                         "true_mse": float(np.quantile(res["true"][r], p)), "optimal_mse": res["optimal"][r]})
    return rows
