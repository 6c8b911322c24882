import math

import numpy as np
import pytest
import scipy.linalg

from sketchrom.basis_gen import (ResidencyTracker, classical_pod, greedy, greedy_embedding_size, pod_indicator,
                                 pod_quasi_optimality_check, pod_with_rom_sketch, sketched_pod,
                                 sketched_pod_from_matrix, snapshot_stream, streaming_pod_driver)
from sketchrom.core_la import InnerProductSpace, solve_full
from sketchrom.embeddings import (EmbeddingSpec, embedding_for_space, exact_isometry, gaussian_rademacher_bound,
                                  sample_embedding)
from sketchrom.error_est import DenseResidual
from sketchrom.rom import build_classical_rom, solve_rom_many
from sketchrom.sketch import build_sketch

from _problems import random_problem, random_spd


@pytest.fixture(scope="module")
def thermal_snapshots(small_thermal):
    mus = small_thermal.domain.sample(20, seed=11)
    return mus, np.column_stack([solve_full(small_thermal, mu) for mu in mus])


# --- greedy ---------------------------------------------------------------------------

def test_infinite_tolerance_stops_immediately(small_thermal):
    st = greedy(small_thermal, small_thermal.domain.sample(5, seed=0), tau=np.inf)
    assert st.iteration == 0 and st.basis.shape == (small_thermal.n, 0) and len(st.trace) == 1


def test_exact_isometry_reproduces_classical_selection_3_points():
    pr = random_problem(50, seed=4, m_A=2)
    train = np.array([[0.1], [0.5], [0.9]])
    cl = greedy(pr, train, i_max=3)
    sk = greedy(pr, train, mode="sketched", theta=exact_isometry(pr.space), k_prime=None, i_max=3)
    assert cl.selected == sk.selected
    np.testing.assert_allclose(sk.trace[:3], cl.trace[:3], rtol=1e-6)
    # once the training set is exhausted the expansion sits at its round-off floor
    assert sk.trace[3] < 1e-12 * sk.trace[0] < cl.trace[3]


def test_exact_isometry_reproduces_classical_selection(small_thermal):
    train = small_thermal.domain.sample(40, seed=2)
    cl = greedy(small_thermal, train, i_max=8)
    sk = greedy(small_thermal, train, mode="sketched", theta=exact_isometry(small_thermal.space),
                k_prime=None, i_max=8)
    assert cl.selected == sk.selected


def test_classical_indicator_is_galerkin_residual(small_thermal):
    pr = small_thermal
    train = pr.domain.sample(15, seed=3)
    st = greedy(pr, train, i_max=4)
    coords, _ = solve_rom_many(build_classical_rom(pr, st.basis), train)
    vals = DenseResidual(pr, st.basis).norms(coords, train)
    assert abs(st.trace[-1] / vals.max() - 1) < 1e-6
    assert st.selected[0] == 0
    np.testing.assert_allclose(st.basis.T @ pr.space.apply_R(st.basis), np.eye(4), atol=1e-12)


def test_sketched_greedy_reproducible(small_thermal):
    pr = small_thermal
    train = pr.domain.sample(20, seed=3)
    runs = [greedy(pr, train, mode="sketched", theta=embedding_for_space("psrht", 64, pr.space, 5),
                   k_prime=10, gamma_seed=7, i_max=5) for _ in range(2)]
    assert runs[0].selected == runs[1].selected
    assert runs[0].trace == runs[1].trace
    assert runs[0].gamma_seeds == list(range(7, 13))


def test_sketched_greedy_needs_embedding(small_thermal):
    with pytest.raises(ValueError):
        greedy(small_thermal, small_thermal.domain.sample(3, seed=0), mode="sketched")
    with pytest.raises(ValueError):
        greedy(small_thermal, small_thermal.domain.sample(3, seed=0), mode="other")


def test_greedy_stops_when_tolerance_reached(small_thermal):
    pr = small_thermal
    train = pr.domain.sample(20, seed=3)
    full = greedy(pr, train, i_max=10)
    tau = full.trace[4] * 0.999999
    st = greedy(pr, train, tau=tau, i_max=10)
    assert st.trace[-1] < tau and all(t >= tau for t in st.trace[:-1])


def test_embedding_size_reduces_to_plain_bound():
    assert greedy_embedding_size(1, 1, 0.5, 1e-3) == gaussian_rademacher_bound(0.5, 1e-3, 3)


def test_embedding_size_log_growth():
    assert greedy_embedding_size(10 ** 4, 50, 0.5, 1e-6) < 3 * greedy_embedding_size(10 ** 2, 50, 0.5, 1e-6)


def test_embedding_size_exceeds_half_dimension_bound():
    m, r, delta = 100, 10, 1e-6
    delta_p = math.exp(math.log(delta) - math.log(m) - math.log(math.comb(m, r)))
    assert greedy_embedding_size(m, r, 0.5, delta) > gaussian_rademacher_bound(0.5, delta_p, r)
    assert greedy_embedding_size(m, r, 0.5, delta) == gaussian_rademacher_bound(0.5, delta_p, 2 * r + 1)


def test_embedding_size_huge_binomial_is_finite():
    assert greedy_embedding_size(10 ** 6, 500, 0.5, 1e-6) < 10 ** 8


def test_embedding_size_errors():
    with pytest.raises(ValueError):
        greedy_embedding_size(3, 4, 0.5, 0.1)


# --- classical POD ----------------------------------------------------------------------

def test_repeated_column_has_zero_error(rng):
    space = InnerProductSpace(random_spd(30, rng))
    u = rng.standard_normal(30)
    U_r, delta, _ = classical_pod(np.column_stack([u] * 4), space, 1)
    assert delta <= 1e-25 * space.norm(u) ** 2
    assert abs(space.norm(U_r[:, 0]) - 1) < 1e-12


def test_identity_inner_product_is_plain_svd(rng):
    U_m = rng.standard_normal((40, 12))
    U_r, delta, sv = classical_pod(U_m, InnerProductSpace(np.eye(40)), 4)
    C, s, _ = np.linalg.svd(U_m, full_matrices=False)
    np.testing.assert_allclose(sv, s, rtol=1e-12)
    assert abs(delta - np.sum(s[4:] ** 2) / 12) <= 1e-12 * delta
    assert np.max(scipy.linalg.subspace_angles(U_r, C[:, :4])) < 1e-10


def test_pod_error_sandwich(rng):
    """Mean-square projection error of the POD basis lies between the optimal
    rank-r approximation error and that of any other rank-r matrix."""
    space = InnerProductSpace(random_spd(40, rng))
    U_m = rng.standard_normal((40, 5)) @ rng.standard_normal((5, 15)) + 0.05 * rng.standard_normal((40, 15))
    r, m = 3, 15
    U_r, delta, sv = classical_pod(U_m, space, r)
    QU = space.Q @ U_m
    W, _ = space.orthonormalize(U_r)
    proj = np.sum(space.norm(U_m - W @ (W.T @ space.apply_R(U_m))) ** 2) / m
    best = np.sum(sv[r:] ** 2) / m
    assert best * (1 - 1e-10) <= proj <= delta * (1 + 1e-10)
    for _ in range(20):
        B = rng.standard_normal((40, r)) @ rng.standard_normal((r, m))
        assert proj <= np.linalg.norm(QU - B) ** 2 / m


def test_classical_pod_rank_truncation(rng):
    space = InnerProductSpace(np.eye(20))
    U_m = rng.standard_normal((20, 2)) @ rng.standard_normal((2, 6))
    with pytest.warns(UserWarning, match="rank"):
        U_r, delta, _ = classical_pod(U_m, space, 4)
    assert U_r.shape[1] == 2


# --- sketched POD --------------------------------------------------------------------

def test_full_rank_gives_zero_indicator(rng):
    Ub = rng.standard_normal((30, 6))
    res = sketched_pod_from_matrix(Ub, 6)
    assert res.delta_pod == 0.0
    assert np.all(np.diff(res.eigenvalues) <= 0) and res.eigenvalues[-1] >= 0


def test_indicator_is_tail_eigenvalue_sum(rng):
    Ub = rng.standard_normal((30, 10)) * np.linspace(3, 0.1, 10)
    res = sketched_pod_from_matrix(Ub, 4)
    lam = np.linalg.eigvalsh(Ub.T @ Ub)[::-1]
    assert abs(res.delta_pod - lam[4:].sum() / 10) <= 1e-12 * lam[4:].sum() / 10
    assert abs(pod_indicator(Ub, res.T_r) / res.delta_pod - 1) < 1e-10


def test_sketched_pod_optimal_among_competitors(rng):
    Ub = rng.standard_normal((40, 12)) @ np.diag(np.logspace(0, -3, 12))
    res = sketched_pod_from_matrix(Ub, 4)
    best = pod_indicator(Ub, res.T_r)
    for _ in range(50):
        assert best <= pod_indicator(Ub, rng.standard_normal((12, 4))) * (1 + 1e-12)


def test_exact_isometry_matches_classical_subspace(small_thermal, thermal_snapshots):
    _, U_m = thermal_snapshots
    space = small_thermal.space
    r = 5
    res = sketched_pod_from_matrix(exact_isometry(space).apply(U_m), r)
    _, _, Vh = np.linalg.svd(space.Q @ U_m, full_matrices=False)
    lam = res.eigenvalues
    assert (lam[r - 1] - lam[r]) / lam[0] > 1e-6
    assert np.max(scipy.linalg.subspace_angles(res.T_r, Vh[:r].T)) <= 1e-8


def test_sketched_pod_truncates(rng):
    Ub = rng.standard_normal((20, 2)) @ rng.standard_normal((2, 6))
    with pytest.warns(UserWarning, match="rank"):
        res = sketched_pod_from_matrix(Ub, 4)
    assert res.r == 2 and res.T_r.shape == (6, 2)


# --- streaming ---------------------------------------------------------------------

def test_streaming_shards_bit_identical(small_thermal, thermal_snapshots):
    pr = small_thermal
    _, U_m = thermal_snapshots
    theta = sample_embedding(EmbeddingSpec("gaussian", 60, pr.n, 9))
    cols = [U_m[:, j].copy() for j in range(20)]
    single = streaming_pod_driver(pr, [iter(cols)], theta, 5)
    sharded = streaming_pod_driver(pr, [iter(cols[i:i + 5]) for i in range(0, 20, 5)], theta, 5)
    assert np.array_equal(single.T_r, sharded.T_r)
    assert np.array_equal(single.eigenvalues, sharded.eigenvalues)
    assert single.delta_pod == sharded.delta_pod


def test_single_shard_equals_sketched_pod(small_thermal, thermal_snapshots):
    pr = small_thermal
    _, U_m = thermal_snapshots
    theta = sample_embedding(EmbeddingSpec("rademacher", 60, pr.n, 9))
    a = streaming_pod_driver(pr, [iter(U_m.T)], theta, 4)
    b = sketched_pod(build_sketch(pr, theta, U_m), 4)
    np.testing.assert_allclose(a.eigenvalues, b.eigenvalues, rtol=1e-10)
    assert np.max(scipy.linalg.subspace_angles(a.T_r, b.T_r)) < 1e-8


def test_streaming_residency_and_apply_counts(small_thermal):
    pr = small_thermal
    mus = pr.domain.sample(12, seed=4)
    theta = sample_embedding(EmbeddingSpec("gaussian", 40, pr.n, 1))
    tracker = ResidencyTracker()
    shards = [snapshot_stream(pr, mus[i:i + 3]) for i in range(0, 12, 3)]
    streaming_pod_driver(pr, shards, theta, 3, tracker)
    assert tracker.seen == 12 and tracker.peak == 1
    assert theta.apply_count == 12 * (pr.A.m + 1) + 4 * pr.b.m


def test_streaming_seed_mismatch(small_thermal, thermal_snapshots):
    pr = small_thermal
    _, U_m = thermal_snapshots
    thetas = [sample_embedding(EmbeddingSpec("gaussian", 40, pr.n, s)) for s in (1, 2)]
    with pytest.raises(ValueError, match="different embeddings"):
        streaming_pod_driver(pr, [iter(U_m[:, :2].T), iter(U_m[:, 2:4].T)], thetas, 2)
    with pytest.raises(ValueError):
        streaming_pod_driver(pr, [iter(U_m.T)], thetas, 2)


def test_two_sketch_pod(small_thermal, thermal_snapshots):
    pr = small_thermal
    _, U_m = thermal_snapshots
    ta = sample_embedding(EmbeddingSpec("gaussian", 60, pr.n, 1))
    tb = sample_embedding(EmbeddingSpec("gaussian", 60, pr.n, 2))
    pod, sk = pod_with_rom_sketch(pr, iter(U_m.T), ta, tb, 4)
    assert sk.emb_id == tb.emb_id and sk.r == 4
    np.testing.assert_allclose(sk.Ub_sk, tb.apply(U_m @ pod.T_r), rtol=1e-10, atol=1e-12)
    with pytest.raises(ValueError):
        pod_with_rom_sketch(pr, iter(U_m.T), ta, ta, 4)


# --- POD quality -----------------------------------------------------------------------

def test_exact_isometry_is_optimal(small_thermal, thermal_snapshots):
    _, U_m = thermal_snapshots
    rep = pod_quasi_optimality_check(U_m, small_thermal.space, exact_isometry(small_thermal.space), 5)
    assert rep.eps_Um < 1e-10
    assert abs(rep.true_mse / rep.optimal_mse - 1) < 1e-6
    assert rep.holds_Um and rep.holds_Y


@pytest.mark.parametrize("seed", range(3))
def test_quality_chain_dense(seed):
    rng = np.random.default_rng(seed)
    space = InnerProductSpace(random_spd(80, rng))
    U_m = rng.standard_normal((80, 6)) @ rng.standard_normal((6, 30)) + 0.01 * rng.standard_normal((80, 30))
    theta = embedding_for_space("gaussian", 400, space, seed)
    rep = pod_quasi_optimality_check(U_m, space, theta, 4)
    assert rep.eps_Um < 1
    assert rep.true_mse <= rep.delta_pod / (1 - rep.eps_Um)
    assert rep.holds_Um and rep.holds_Y
    assert rep.numerical_rank == 30
