"""Reduced basis generation: weak greedy (classical and sketched) and POD
(classical and sketched method of snapshots), with a sharded streaming
driver for the sketched POD."""
from __future__ import annotations

import math
import warnings
import weakref
from dataclasses import dataclass, field as dc_field
from typing import Iterable, Sequence

import numpy as np
import scipy.linalg

from .core_la import InnerProductSpace, ParametricProblem, gram_eigendecomposition, solve_full
from .embeddings import Embedding, gaussian_rademacher_bound, verify_epsilon_embedding
from .error_est import ClassicalResidualData, build_two_level, sketched_residual_norms
from .rom import build_classical_rom, build_sketched_rom, solve_rom_many
from .sketch import ThetaSketch, append, empty_sketch, merge, orthogonalize, sketch_snapshot, transform

I_MAX = 200


# ---------------------------------------------------------------------------
# greedy
# ---------------------------------------------------------------------------

@dataclass
class GreedyState:
    mode: str
    selected: list = dc_field(default_factory=list)
    trace: list = dc_field(default_factory=list)
    tau: float = 0.0
    basis: np.ndarray | None = None
    sketch: ThetaSketch | None = None
    snapshots: list = dc_field(default_factory=list)
    failures: dict = dc_field(default_factory=dict)
    gamma_seeds: list = dc_field(default_factory=list)

    @property
    def iteration(self) -> int:
        return len(self.selected)

    @property
    def r(self) -> int:
        return len(self.selected)


def _classical_indicators(problem, U, data, train):
    if U.shape[1] == 0:
        vals, _ = data.norms(np.zeros((len(train), 0)), train)
        return vals, []
    model = build_classical_rom(problem, U)
    coords, failed = solve_rom_many(model, train)
    vals, _ = data.norms(np.nan_to_num(coords), train)
    vals[failed] = np.inf
    return vals, failed


def _sketched_indicators(sketch, train, k_prime, seed):
    if sketch.r == 0:
        two = build_two_level(sketch, k_prime, seed) if k_prime else sketch
        return sketched_residual_norms(two, np.zeros((len(train), 0)), train), []
    sk_o, _ = orthogonalize(sketch)
    model = build_sketched_rom(sk_o)
    coords, failed = solve_rom_many(model, train)
    two = build_two_level(sk_o, k_prime, seed) if k_prime else sk_o
    vals = sketched_residual_norms(two, np.nan_to_num(coords), train)
    vals[failed] = np.inf
    return vals, failed


def greedy(problem: ParametricProblem, train, tau: float = 0.0, mode: str = "classical",
           theta: Embedding | None = None, k_prime: int | None = 100, gamma_seed: int = 0,
           i_max: int = I_MAX, keep_snapshots: bool = True, eta=1.0) -> GreedyState:
    """Weak greedy selection over a finite training set.

    Classical mode uses the quadratic-expansion residual norm of the
    Galerkin solution. Sketched mode keeps only the sketch, solves the
    sketched Galerkin system and evaluates the indicator with a fresh
    ``Gamma`` per iteration (seed ``gamma_seed + iteration``); ``k_prime=None``
    uses the sketch itself. The first parameter is training point 0; ties in
    the argmax go to the smallest index.
    """
    train = np.atleast_2d(np.asarray(train, dtype=float))
    if mode not in ("classical", "sketched"):
        raise ValueError("mode must be 'classical' or 'sketched'")
    if mode == "sketched" and theta is None:
        raise ValueError("sketched greedy needs an embedding")
    st = GreedyState(mode, tau=tau)
    dt = problem.dtype
    if mode == "classical":
        U = np.zeros((problem.n, 0), dt)
        data = ClassicalResidualData(problem)
        vals, _ = _classical_indicators(problem, U, data, train)
    else:
        sketch = empty_sketch(problem, theta)
        st.gamma_seeds.append(gamma_seed)
        vals, _ = _sketched_indicators(sketch, train, k_prime, gamma_seed)
    vals = vals / eta
    st.trace.append(float(np.max(vals)))
    nxt = 0
    while st.trace[-1] >= tau and st.iteration < i_max:
        mu = train[nxt]
        u = solve_full(problem, mu)
        st.selected.append(int(nxt))
        if keep_snapshots:
            st.snapshots.append(u)
        if mode == "classical":
            # two passes of Gram-Schmidt in the U inner product
            v = u.astype(dt)
            for _ in range(2):
                if U.shape[1]:
                    v = v - U @ (U.conj().T @ problem.space.apply_R(v))
            nv = problem.space.norm(v)
            if nv <= 1e-14 * problem.space.norm(u):
                warnings.warn("snapshot already in the reduced space; stopping")
                break
            v = v / nv
            U = np.column_stack([U, v])
            data.extend(v)
            vals, failed = _classical_indicators(problem, U, data, train)
        else:
            sketch = append(sketch, sketch_snapshot(problem, theta, u))
            seed = gamma_seed + st.iteration
            st.gamma_seeds.append(seed)
            vals, failed = _sketched_indicators(sketch, train, k_prime, seed)
        if failed:
            st.failures[st.iteration] = [int(i) for i in failed]
        vals = vals / eta
        st.trace.append(float(np.max(vals)))
        nxt = int(np.argmax(vals))
    if mode == "classical":
        st.basis = U
    else:
        st.sketch = sketch
    return st


def greedy_embedding_size(m: int, r: int, eps: float, delta: float, field: str = "real") -> int:
    """Rows guaranteeing the sketched greedy selection over ``m`` training
    points for ``r`` iterations: the Gaussian bound at
    ``delta' = delta / (m C(m, r))`` and ``d = 2r + 1``."""
    if r > m or r < 1:
        raise ValueError("need 1 <= r <= m")
    log_binom = math.lgamma(m + 1) - math.lgamma(r + 1) - math.lgamma(m - r + 1)
    log_inv_delta = -math.log(delta) + math.log(m) + log_binom
    if not 0 < eps < 0.572:
        raise ValueError("eps must lie in (0, 0.572)")
    c = {"real": 6.9, "complex": 13.8}[field]
    return math.ceil(7.87 / eps ** 2 * (c * (2 * r + 1) + log_inv_delta))


# ---------------------------------------------------------------------------
# POD
# ---------------------------------------------------------------------------

def classical_pod(U_m, space: InnerProductSpace, r: int):
    """POD in the U-norm through the SVD of ``Q U_m``.

    Returns the U-orthonormal basis, the mean squared truncation error
    ``(1/m) sum_{i>r} sigma_i^2`` and the singular values.
    """
    U_m = np.asarray(U_m)
    m = U_m.shape[1]
    QU = space.Q @ U_m
    C, sv, _ = np.linalg.svd(QU, full_matrices=False)
    rank = int(np.sum(sv > 1e-12 * sv[0])) if sv.size and sv[0] > 0 else 0
    if r > rank:
        warnings.warn(f"requested r={r} exceeds numerical rank {rank}; truncating")
        r = rank
    delta = float(np.sum(sv[r:] ** 2) / m)
    U_r = space.solve(space.Q.conj().T @ C[:, :r]) if r else np.zeros((U_m.shape[0], 0), U_m.dtype)
    return U_r, delta, sv


@dataclass
class PodResult:
    T_r: np.ndarray
    eigenvalues: np.ndarray
    delta_pod: float
    r: int
    sketch: ThetaSketch | None = None


def sketched_pod_from_matrix(Ub, r: int) -> PodResult:
    """Method of snapshots on the sketched snapshot matrix ``Theta U_m``."""
    m = Ub.shape[1]
    lam, V = gram_eigendecomposition(Ub.conj().T @ Ub)
    rank = int(np.sum(lam > 1e-12 * lam[0])) if lam[0] > 0 else 0
    if r > rank:
        warnings.warn(f"requested r={r} exceeds numerical rank {rank}; truncating")
        r = rank
    # the rank cutoff only limits r; the indicator sums the whole tail
    tail = float(np.sum(lam[r:]) / m)
    return PodResult(V[:, :r], lam[:rank], tail, r)


def sketched_pod(sketch: ThetaSketch, r: int) -> PodResult:
    res = sketched_pod_from_matrix(sketch.Ub_sk, r)
    res.sketch = sketch
    return res


def pod_indicator(Ub, T) -> float:
    """``(1/m) sum ||u_i - P^Theta_V u_i||_Theta^2`` for ``V = range(U_m T)``."""
    m = Ub.shape[1]
    if T.shape[1] == 0:
        return float(np.linalg.norm(Ub) ** 2 / m)
    Z, _ = np.linalg.qr(Ub @ T)
    res = Ub - Z @ (Z.conj().T @ Ub)
    return float(np.linalg.norm(res) ** 2 / m)


class ResidencyTracker:
    """Counts how many full-length snapshot vectors are alive at once."""

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.seen = 0

    def register(self, vec) -> None:
        self.live += 1
        self.seen += 1
        self.peak = max(self.peak, self.live)
        weakref.finalize(vec, self._release)

    def _release(self):
        self.live -= 1


def streaming_pod_driver(problem: ParametricProblem, shards: Sequence[Iterable], theta, r: int,
                         tracker: ResidencyTracker | None = None) -> PodResult:
    """Sketch each shard independently, merge left to right, then run the
    sketched method of snapshots.

    ``theta`` is either one embedding shared by all workers or a list with
    one per shard; all must describe the same operator. Snapshots are taken
    one at a time from each shard iterable and dropped after sketching.
    """
    thetas = list(theta) if isinstance(theta, (list, tuple)) else [theta] * len(shards)
    if len(thetas) != len(shards):
        raise ValueError("need one embedding per shard")
    ids = {t.emb_id for t in thetas}
    if len(ids) != 1:
        raise ValueError(f"shards use different embeddings: {sorted(ids)}")
    partial = []
    for src, th in zip(shards, thetas):
        sk = empty_sketch(problem, th)
        for u in src:
            if tracker is not None:
                tracker.register(u)
            sk = append(sk, sketch_snapshot(problem, th, u))
            del u
        partial.append(sk)
    total = partial[0]
    for sk in partial[1:]:
        total = merge(total, sk)
    return sketched_pod(total, r)


def pod_with_rom_sketch(problem: ParametricProblem, snapshots: Iterable, theta_pod: Embedding,
                        theta_rom: Embedding, r: int):
    """Sketched POD with an independent second sketch for the reduced model.

    One pass over the snapshots fills two sketches. The method of snapshots
    runs on the first; the second, transformed by ``T_r``, is the sketch of
    the POD basis used for Galerkin projection and error estimation, so the
    embedding that certifies the reduced model did not select the basis.
    Returns ``(PodResult, ThetaSketch)``.
    """
    if theta_pod.emb_id == theta_rom.emb_id:
        raise ValueError("the two sketches must use independent embeddings")
    sk_a, sk_b = empty_sketch(problem, theta_pod), empty_sketch(problem, theta_rom)
    for u in snapshots:
        sk_a = append(sk_a, sketch_snapshot(problem, theta_pod, u))
        sk_b = append(sk_b, sketch_snapshot(problem, theta_rom, u))
    pod = sketched_pod(sk_a, r)
    return pod, transform(sk_b, pod.T_r)


def snapshot_stream(problem: ParametricProblem, mus) -> Iterable[np.ndarray]:
    """Yield full solutions one parameter at a time."""
    for mu in np.atleast_2d(mus):
        yield solve_full(problem, mu)


# ---------------------------------------------------------------------------
# POD quality check
# ---------------------------------------------------------------------------

@dataclass
class PodQualityReport:
    true_mse: float
    delta_pod: float
    optimal_mse: float
    eps_Um: float
    chain_Um: tuple
    holds_Um: bool
    eps_Y: float
    delta_Y: float
    chain_Y: tuple
    holds_Y: bool
    numerical_rank: int


def _mse(space, U_m, basis) -> float:
    QU = space.Q @ U_m
    if basis.shape[1] == 0:
        return float(np.linalg.norm(QU) ** 2 / U_m.shape[1])
    Z, _ = np.linalg.qr(space.Q @ basis)
    res = QU - Z @ (Z.conj().T @ QU)
    return float(np.linalg.norm(res) ** 2 / U_m.shape[1])


def _projection_residuals(space, U_m, basis):
    Z, _ = np.linalg.qr(space.Q @ basis)
    W = space.solve(space.Q.conj().T @ Z)
    return U_m - W @ (Z.conj().T @ (space.Q @ U_m))


def pod_quasi_optimality_check(U_m, space: InnerProductSpace, theta: Embedding, r: int,
                               rank_tol: float = 1e-10) -> PodQualityReport:
    """Evaluate both POD quality chains with measured embedding constants.

    ``eps_Um`` is measured on the numerically dominant part of ``range(U_m)``
    (singular values of ``Q U_m`` above ``rank_tol`` times the largest).
    The second chain uses ``Y = U*_{2r}`` with eps measured on ``Y`` and on
    every one-dimensional residual span it requires.
    """
    U_m = np.asarray(U_m)
    m = U_m.shape[1]
    Ub = theta.apply(U_m)
    pod = sketched_pod_from_matrix(Ub, r)
    true_mse = _mse(space, U_m, U_m @ pod.T_r)
    U_opt, opt, sv = classical_pod(U_m, space, r)
    nrank = int(np.sum(sv > rank_tol * sv[0]))
    eps_m = verify_epsilon_embedding(theta, U_m, rank_tol=rank_tol)
    d = pod.delta_pod
    if eps_m < 1:
        c1, c2 = d / (1 - eps_m), (1 + eps_m) / (1 - eps_m) * opt
        chain_m = (true_mse, c1, c2)
        holds_m = true_mse <= c1 * (1 + 1e-10) and c1 <= c2 * (1 + 1e-10)
    else:
        chain_m, holds_m = (true_mse, math.inf, math.inf), False
    Y, dY, _ = classical_pod(U_m, space, min(2 * r, nrank))
    eps_list = [verify_epsilon_embedding(theta, Y)]
    for basis in (Y, U_opt):
        R = _projection_residuals(space, U_m, basis)
        nr = space.norm(R)
        keep = nr > 1e-14 * max(nr.max(), 1e-300)
        if keep.any():
            Rk = R[:, keep] / nr[keep]
            img = theta.apply(Rk)
            eps_list.append(float(np.abs(np.linalg.norm(img, axis=0) ** 2 - 1).max()))
    eps_y = max(eps_list)
    if eps_y < 1:
        g = 2 * (1 + eps_y) / (1 - eps_y) + 1
        c1 = 2 / (1 - eps_y) * d + g * dY
        c2 = 2 * (1 + eps_y) / (1 - eps_y) * opt + g * dY
        chain_y = (true_mse, c1, c2)
        holds_y = true_mse <= c1 * (1 + 1e-10) and c1 <= c2 * (1 + 1e-10)
    else:
        chain_y, holds_y = (true_mse, math.inf, math.inf), False
    return PodQualityReport(true_mse, d, opt, eps_m, chain_m, holds_m, eps_y, dY, chain_y, holds_y, nrank)
