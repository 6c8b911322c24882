import json

import numpy as np
import pytest

import sketchrom.rom as rom
from sketchrom.benchmarks import compliant_variant
from sketchrom.core_la import AffineDecomposition, InnerProductSpace, ParamDomain, ParametricProblem, const, solve_full
from sketchrom.embeddings import (EmbeddingSpec, embedding_for_space, exact_isometry, sample_embedding,
                                  verify_epsilon_embedding)
from sketchrom.rom import (ReducedSolveError, build_classical_rom, build_coarse_dual, build_sketched_rom,
                           compare_models, export_model, full_continuity_constant, output_quantity,
                           primal_dual_correct, quasi_optimality_constants, solve_rom, solve_rom_many)
from sketchrom.sketch import build_sketch, orthogonalize

from _problems import random_problem, random_spd


def _inf_sup(problem, mu):
    """Extreme singular values of ``A(mu)`` between U and its dual, from ``Q^{-H} A Q^{-1}``."""
    Qi = np.linalg.inv(problem.space.Q)
    s = np.linalg.svd(Qi.conj().T @ problem.A.evaluate(mu) @ Qi, compute_uv=False)
    return s[-1], s[0]


def _orth_basis(problem, r, seed=0):
    rng = np.random.default_rng(seed)
    mus = problem.domain.sample(r, seed=seed)
    U = np.column_stack([solve_full(problem, mu) for mu in mus])
    U = U + 1e-3 * rng.standard_normal(U.shape)
    W, _ = problem.space.orthonormalize(U)
    return W


def _single_operator_problem(R, A):
    n = R.shape[0]
    dec = AffineDecomposition([A], [const(1.0)], 1)
    b = AffineDecomposition([np.ones(n)], [const(1.0)], 1)
    return ParametricProblem(dec, b, b, InnerProductSpace(R), ParamDomain.box([0.0], [1.0]))


# --- construction ----------------------------------------------------------------------

def test_full_basis_reproduces_solution(rand_problem):
    pr = rand_problem
    mu = pr.domain.sample(1, seed=3)[0]
    model = build_classical_rom(pr, np.eye(pr.n))
    np.testing.assert_allclose(solve_rom(model, mu), solve_full(pr, mu), rtol=1e-9, atol=1e-11)


def test_single_unit_vector(rand_problem):
    pr = rand_problem
    mu = pr.domain.sample(1, seed=3)[0]
    model = build_classical_rom(pr, np.eye(pr.n)[:, 0])
    A, b = pr.A.evaluate(mu), pr.b.evaluate(mu)
    assert model.r == 1
    np.testing.assert_allclose(model.Ar.evaluate(mu), [[A[0, 0]]], rtol=1e-14)
    np.testing.assert_allclose(solve_rom(model, mu), [b[0] / A[0, 0]], rtol=1e-13)


def test_galerkin_triple_product(rand_problem, rng):
    pr = rand_problem
    U = rng.standard_normal((pr.n, 5))
    mu = pr.domain.sample(1, seed=4)[0]
    model = build_classical_rom(pr, U)
    np.testing.assert_allclose(model.Ar.evaluate(mu), U.T @ pr.A.evaluate(mu) @ U, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(model.br.evaluate(mu), U.T @ pr.b.evaluate(mu), rtol=1e-12, atol=1e-12)


def test_rank_deficient_basis(rand_problem, rng):
    U = rng.standard_normal((rand_problem.n, 2))
    with pytest.raises(ValueError, match="rank"):
        build_classical_rom(rand_problem, np.column_stack([U, U[:, 0]]))


def test_exact_isometry_gives_classical_model(rand_problem):
    pr = rand_problem
    U = _orth_basis(pr, 4)
    sk_model = build_sketched_rom(build_sketch(pr, exact_isometry(pr.space), U))
    cl_model = build_classical_rom(pr, U)
    for mu in pr.domain.sample(5, seed=1):
        assert compare_models(sk_model, cl_model, mu) < 1e-10
        np.testing.assert_allclose(solve_rom(sk_model, mu), solve_rom(cl_model, mu), rtol=1e-9, atol=1e-12)


def test_sketched_model_dense_formula(rand_problem):
    pr = rand_problem
    theta = sample_embedding(EmbeddingSpec("gaussian", 40, pr.n, 3))
    Th = theta.materialize()
    U = _orth_basis(pr, 4)
    model = build_sketched_rom(build_sketch(pr, theta, U))
    mu = pr.domain.sample(1, seed=4)[0]
    Rinv = np.linalg.inv(pr.space.R)
    A, b = pr.A.evaluate(mu), pr.b.evaluate(mu)
    np.testing.assert_allclose(model.Ar.evaluate(mu), (Th @ U).conj().T @ Th @ Rinv @ A @ U, rtol=1e-9, atol=1e-11)
    np.testing.assert_allclose(model.br.evaluate(mu), (Th @ U).conj().T @ Th @ Rinv @ b, rtol=1e-9, atol=1e-11)


def test_sketched_residual_orthogonality(rand_problem):
    pr = rand_problem
    theta = sample_embedding(EmbeddingSpec("psrht", 32, pr.n, 3))
    sk = build_sketch(pr, theta, _orth_basis(pr, 4))
    model = build_sketched_rom(sk)
    mu = pr.domain.sample(1, seed=6)[0]
    a = solve_rom(model, mu)
    res = sk.residual_vectors(a, mu)
    assert np.abs(sk.Ub_sk.conj().T @ res).max() < 1e-10 * np.linalg.norm(res)


def test_output_quantity(rand_problem, rng):
    pr = rand_problem
    U = rng.standard_normal((pr.n, 3))
    a = rng.standard_normal(3)
    mu = pr.domain.sample(1, seed=0)[0]
    model = build_classical_rom(pr, U)
    assert abs(output_quantity(model, a, mu) - pr.output(U @ a, mu)) < 1e-12 * np.abs(U @ a).sum()


def test_singular_reduced_system():
    R = np.eye(4)
    A = np.diag([0.0, 1.0, 1.0, 1.0])
    pr = _single_operator_problem(R, A)
    model = build_classical_rom(pr, np.eye(4)[:, :2])
    with pytest.raises(ReducedSolveError):
        solve_rom(model, [0.5])
    out, failed = solve_rom_many(model, [[0.2], [0.4]])
    assert failed == [0, 1] and np.all(np.isnan(out))


def test_solve_many_matches_single(rand_problem):
    pr = rand_problem
    model = build_classical_rom(pr, _orth_basis(pr, 4))
    mus = pr.domain.sample(6, seed=2)
    out, failed = solve_rom_many(model, mus)
    assert failed == []
    for mu, a in zip(mus, out):
        np.testing.assert_allclose(a, solve_rom(model, mu), rtol=1e-10, atol=1e-13)


def test_export_json(rand_problem, tmp_path):
    pr = rand_problem
    model = build_classical_rom(pr, _orth_basis(pr, 3))
    path = tmp_path / "model.json"
    export_model(model, str(path))
    data = json.loads(path.read_text())
    assert data["r"] == 3 and data["kind"] == "classical"
    f0 = data["Ar"]["factors"][0]
    arr = np.array(f0["re"]) + 1j * np.array(f0["im"]) if isinstance(f0, dict) else np.array(f0)
    np.testing.assert_array_equal(arr, model.Ar.factors[0])


# --- primal-dual correction ----------------------------------------------------------

def test_compliant_correction_is_implicit(small_thermal):
    pr = compliant_variant(small_thermal)
    du = pr.dual()
    U = _orth_basis(pr, 3)
    mu = pr.domain.sample(1, seed=9)[0]
    m, m_du = build_classical_rom(pr, U), build_classical_rom(du, U)
    a, a_du = solve_rom(m, mu), solve_rom(m_du, mu)
    np.testing.assert_allclose(a_du, -a, rtol=1e-10)
    s_r = output_quantity(m, a, mu)
    s_pd = primal_dual_correct((m, a), (m_du, a_du), mu, "classical")
    assert abs(s_pd - s_r) <= 1e-12 * abs(s_r)
    # output error equals the energy norm of the error
    e = solve_full(pr, mu) - U @ a
    energy = e @ (pr.A.evaluate(mu) @ e)
    s = pr.output(solve_full(pr, mu), mu)
    assert s - s_r >= 0
    assert abs((s - s_r) - energy) <= 1e-8 * abs(s)


def test_compliant_sketched_correction(small_thermal):
    pr = compliant_variant(small_thermal)
    theta = embedding_for_space("gaussian", 60, pr.space, 2)
    U = _orth_basis(pr, 3)
    m = build_sketched_rom(build_sketch(pr, theta, U))
    m_du = build_sketched_rom(build_sketch(pr.dual(), theta, U))
    mu = pr.domain.sample(1, seed=9)[0]
    a, a_du = solve_rom(m, mu), solve_rom(m_du, mu)
    s_r = output_quantity(m, a, mu)
    s_spd = primal_dual_correct((m, a), (m_du, a_du), mu, "sketched")
    assert abs(s_spd - s_r) <= 1e-10 * abs(s_r)


def test_exact_dual_makes_output_exact(rand_problem):
    pr = rand_problem
    mu = pr.domain.sample(1, seed=2)[0]
    U = _orth_basis(pr, 3)
    u_du = solve_full(pr.dual(), mu)
    m, m_du = build_classical_rom(pr, U), build_classical_rom(pr.dual(), u_du)
    a, a_du = solve_rom(m, mu), solve_rom(m_du, mu)
    s = pr.output(solve_full(pr, mu), mu)
    s_pd = primal_dual_correct((m, a), (m_du, a_du), mu, "classical")
    assert abs(s - s_pd) <= 1e-9 * abs(s)


def _primal_dual_setup(pr, theta, r=3, r_du=3, mu_seed=1):
    U, U_du = _orth_basis(pr, r, seed=0), _orth_basis(pr.dual(), r_du, seed=1)
    mu = pr.domain.sample(1, seed=mu_seed)[0]
    cl = build_classical_rom(pr, U), build_classical_rom(pr.dual(), U_du)
    sk = build_sketched_rom(build_sketch(pr, theta, U)), build_sketched_rom(build_sketch(pr.dual(), theta, U_du))
    return U, U_du, mu, cl, sk


def test_correction_error_bound(rand_problem):
    pr = rand_problem
    U, U_du, mu, (m, m_du), _ = _primal_dual_setup(pr, exact_isometry(pr.space))
    a, a_du = solve_rom(m, mu), solve_rom(m_du, mu)
    A, b, l = pr.A.evaluate(mu), pr.b.evaluate(mu), pr.l.evaluate(mu)
    r = b - A @ (U @ a)
    r_du = -l - A.conj().T @ (U_du @ a_du)
    eta, _ = _inf_sup(pr, mu)
    s = pr.output(solve_full(pr, mu), mu)
    s_pd = primal_dual_correct((m, a), (m_du, a_du), mu, "classical")
    bound = pr.space.dual_norm(r_du) * pr.space.dual_norm(r) / eta
    assert abs(s - s_pd) <= bound * (1 + 1e-10)


@pytest.mark.parametrize("seed", range(4))
def test_sketched_correction_error_bound(seed):
    pr = random_problem(60, "real", seed=seed)
    theta = embedding_for_space("gaussian", 30, pr.space, seed)
    U, U_du, mu, (m, m_du), (ms, ms_du) = _primal_dual_setup(pr, theta)
    a, a_du = solve_rom(m, mu), solve_rom(m_du, mu)
    sp_pd = primal_dual_correct((ms, a), (ms_du, a_du), mu, "sketched")
    A, b, l = pr.A.evaluate(mu), pr.b.evaluate(mu), pr.l.evaluate(mu)
    r = b - A @ (U @ a)
    r_du = -l - A.conj().T @ (U_du @ a_du)
    eps = verify_epsilon_embedding(theta, np.column_stack([U_du @ a_du, pr.space.solve(r)]))
    assert eps < 1
    eta, _ = _inf_sup(pr, mu)
    s = pr.output(solve_full(pr, mu), mu)
    dn = pr.space.dual_norm
    bound = dn(r) / eta * ((1 + eps) * dn(r_du) + eps * dn(l))
    assert abs(s - sp_pd) <= bound * (1 + 1e-10)


def test_sketched_correction_dense_formula(rand_problem):
    pr = rand_problem
    theta = sample_embedding(EmbeddingSpec("gaussian", 30, pr.n, 5))
    Th = theta.materialize()
    U, U_du, mu, _, (ms, ms_du) = _primal_dual_setup(pr, theta)
    a, a_du = np.ones(3), np.arange(1.0, 4.0)
    r = pr.b.evaluate(mu) - pr.A.evaluate(mu) @ (U @ a)
    expect = output_quantity(ms, a, mu) - np.vdot(Th @ U_du @ a_du, Th @ np.linalg.solve(pr.space.R, r))
    got = primal_dual_correct((ms, a), (ms_du, a_du), mu, "sketched")
    assert abs(got - expect) <= 1e-10 * max(abs(expect), 1)


def test_improved_correction_with_full_coarse_space(rand_problem):
    """With the coarse space equal to the dual space the sketched remainder
    vanishes and the exact correction is recovered."""
    pr = rand_problem
    theta = sample_embedding(EmbeddingSpec("gaussian", 30, pr.n, 5))
    U, U_du, mu, _, (ms, ms_du) = _primal_dual_setup(pr, theta)
    a, a_du = solve_rom(ms, mu), solve_rom(ms_du, mu)
    coarse = build_coarse_dual(pr, U_du, U_du, U).sketched(theta)
    got = primal_dual_correct((ms, a), (ms_du, a_du), mu, "improved", coarse)
    r = pr.b.evaluate(mu) - pr.A.evaluate(mu) @ (U @ a)
    expect = output_quantity(ms, a, mu) - np.vdot(U_du @ a_du, r)
    assert abs(got - expect) <= 1e-9 * max(abs(expect), 1)


def test_improved_correction_dense_formula(rand_problem):
    pr = rand_problem
    theta = sample_embedding(EmbeddingSpec("gaussian", 30, pr.n, 5))
    Th = theta.materialize()
    U, U_du, mu, _, (ms, ms_du) = _primal_dual_setup(pr, theta, r_du=4)
    a, a_du = solve_rom(ms, mu), solve_rom(ms_du, mu)
    W = U_du[:, :2]
    coarse = build_coarse_dual(pr, W, U_du, U).sketched(theta)
    R = pr.space.R
    u_du = U_du @ a_du
    w = W @ np.linalg.solve(W.conj().T @ R @ W, W.conj().T @ R @ u_du)
    r = pr.b.evaluate(mu) - pr.A.evaluate(mu) @ (U @ a)
    expect = (output_quantity(ms, a, mu) - np.vdot(w, r)
              - np.vdot(Th @ (u_du - w), Th @ np.linalg.solve(R, r)))
    got = primal_dual_correct((ms, a), (ms_du, a_du), mu, "improved", coarse)
    assert abs(got - expect) <= 1e-9 * max(abs(expect), 1)


def test_correction_argument_errors(rand_problem):
    pr = rand_problem
    t1 = sample_embedding(EmbeddingSpec("gaussian", 30, pr.n, 5))
    t2 = sample_embedding(EmbeddingSpec("gaussian", 30, pr.n, 6))
    U, U_du, mu, (m, m_du), (ms, ms_du) = _primal_dual_setup(pr, t1)
    a = np.ones(3)
    with pytest.raises(ValueError):
        primal_dual_correct((ms, a), (ms_du, a), mu, "classical")
    with pytest.raises(ValueError):
        primal_dual_correct((m, a), (m_du, a), mu, "sketched")
    with pytest.raises(ValueError):
        primal_dual_correct((ms, a), (ms_du, a), mu, "improved")
    with pytest.raises(ValueError):
        primal_dual_correct((ms, a), (ms_du, a), mu, "other")
    other = build_sketched_rom(build_sketch(pr.dual(), t2, U_du))
    with pytest.raises(ValueError, match="different embeddings"):
        primal_dual_correct((ms, a), (other, a), mu, "sketched")


# --- quasi-optimality constants -----------------------------------------------------

def test_identity_operator_constants(rng):
    R = random_spd(40, rng)
    pr = _single_operator_problem(R, R)
    U = rng.standard_normal((40, 4))
    u = solve_full(pr, [0.5])
    rep = quasi_optimality_constants(pr, U, [0.5], u=u)
    assert abs(rep.alpha_r - 1) < 1e-10 and abs(rep.beta_r - 1) < 1e-10 and abs(rep.a_r - 1) < 1e-8


def test_eigenvector_basis_has_unit_a_r(rng):
    B = rng.standard_normal((30, 30))
    A = B + B.T + 30 * np.eye(30)
    pr = _single_operator_problem(np.eye(30), A)
    _, V = np.linalg.eigh(A)
    rep = quasi_optimality_constants(pr, V[:, [0, 5, 17]], [0.0])
    assert abs(rep.a_r - 1) < 1e-8


def test_a_r_dense_definition(rand_problem, rng):
    pr = rand_problem
    U = _orth_basis(pr, 3)
    mu = pr.domain.sample(1, seed=0)[0]
    rep = quasi_optimality_constants(pr, U, mu)
    # brute force ratio over random directions never exceeds a_r
    A = pr.A.evaluate(mu)
    W, _ = pr.space.orthonormalize(U)
    ratios = []
    for _ in range(300):
        c = rng.standard_normal(3)
        if pr.field == "complex":
            c = c + 1j * rng.standard_normal(3)
        Aw = A @ (W @ c)
        ratios.append(pr.space.dual_norm(Aw) / np.linalg.norm(W.conj().T @ Aw))
    assert max(ratios) <= rep.a_r * (1 + 1e-10)
    assert max(ratios) >= 0.7 * rep.a_r


def test_full_continuity_constant_dense(rand_problem):
    pr = rand_problem
    mu = pr.domain.sample(1, seed=1)[0]
    _, beta = _inf_sup(pr, mu)
    assert abs(full_continuity_constant(pr, mu) / beta - 1) < 1e-6


def test_full_continuity_constant_hermitian(small_thermal):
    pr = small_thermal
    mu = pr.domain.sample(1, seed=1)[0]
    _, beta = _inf_sup(pr, mu)
    assert abs(full_continuity_constant(pr, mu) / beta - 1) < 1e-8


@pytest.mark.parametrize("seed", range(3))
def test_classical_bounds(seed):
    pr = random_problem(60, "complex", seed=seed)
    U = _orth_basis(pr, 4, seed=seed)
    mu = pr.domain.sample(1, seed=seed + 10)[0]
    u = solve_full(pr, mu)
    rep = quasi_optimality_constants(pr, U, mu, u=u)
    assert rep.cond_Ar <= rep.beta_r / rep.alpha_r * (1 + 1e-10)
    a = solve_rom(build_classical_rom(pr, U), mu)
    err = pr.space.norm(u - U @ a)
    proj_err = pr.space.norm(u - U @ (U.conj().T @ pr.space.apply_R(u)))
    assert err <= (1 + rep.beta_r / rep.alpha_r) * proj_err * (1 + 1e-10)
    _, beta_full = _inf_sup(pr, mu)
    assert rep.beta_r <= beta_full * (1 + 1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_sketched_bounds(seed):
    pr = random_problem(60, "real", seed=seed)
    theta = embedding_for_space("gaussian", 40, pr.space, seed)
    U0 = _orth_basis(pr, 4, seed=seed)
    sk, T = orthogonalize(build_sketch(pr, theta, U0))
    U = U0 @ T
    mu = pr.domain.sample(1, seed=seed + 10)[0]
    u = solve_full(pr, mu)
    rep = quasi_optimality_constants(pr, U, mu, theta=theta, u=u)
    eps_U = verify_epsilon_embedding(theta, U)
    assert eps_U < 1
    cond = np.linalg.cond(build_sketched_rom(sk).Ar.evaluate(mu))
    assert cond <= np.sqrt((1 + eps_U) / (1 - eps_U)) * rep.beta_r_sk / rep.alpha_r_sk * (1 + 1e-10)
    assert abs(rep.cond_Ar_sk / cond - 1) < 1e-8
    a = solve_rom(build_sketched_rom(sk), mu)
    err = pr.space.norm(u - U @ a)
    W, _ = pr.space.orthonormalize(U)
    proj_err = pr.space.norm(u - W @ (W.conj().T @ pr.space.apply_R(u)))
    assert err <= (1 + rep.beta_r_sk / rep.alpha_r_sk) * proj_err * (1 + 1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_sketched_constants_bracketed(seed):
    pr = random_problem(60, "real", seed=seed)
    theta = embedding_for_space("gaussian", 2000, pr.space, seed)
    U = _orth_basis(pr, 4, seed=seed)
    mu = pr.domain.sample(1, seed=seed + 10)[0]
    u = solve_full(pr, mu)
    rep = quasi_optimality_constants(pr, U, mu, theta=theta, u=u, with_eps=True, full_beta=True)
    eps = rep.eps_Y
    assert eps * rep.a_r < 1
    assert rep.alpha_r_sk >= (1 - eps * rep.a_r) * rep.alpha_r / np.sqrt(1 + eps) * (1 - 1e-10)
    assert rep.beta_r_sk <= (rep.beta_r + eps * rep.beta_full) / np.sqrt(1 - eps) * (1 + 1e-10)


def test_sketched_alpha_dense_definition(rand_problem, rng):
    pr = rand_problem
    theta = embedding_for_space("gaussian", 50, pr.space, 1)
    U = _orth_basis(pr, 3)
    mu = pr.domain.sample(1, seed=0)[0]
    rep = quasi_optimality_constants(pr, U, mu, theta=theta)
    W, _ = pr.space.orthonormalize(U)
    P, _ = np.linalg.qr(theta.apply(W))
    A = pr.A.evaluate(mu)
    vals = []
    for _ in range(300):
        c = rng.standard_normal(3)
        x = W @ c
        vals.append(np.linalg.norm(P.conj().T @ theta.apply(pr.space.solve(A @ x))) / pr.space.norm(x))
    assert min(vals) >= rep.alpha_r_sk * (1 - 1e-10)


def test_diagnostics_refuse_large_problems(monkeypatch, rand_problem):
    monkeypatch.setattr(rom, "DENSE_DIAGNOSTIC_CAP", 10)
    with pytest.raises(ValueError, match="desk scale"):
        quasi_optimality_constants(rand_problem, np.eye(rand_problem.n)[:, :2], [0.1, 0.1])

