"""Residual-based error indicators.

Three ways to evaluate ``||b(mu) - A(mu) U_r a||_{U'}``:

* the classical quadratic expansion in ``a`` (cheap online, loses about half
  the digits to cancellation),
* the sketched norm ``||V^Theta(mu) a - b^Theta(mu)||``,
* a two-level variant that compresses the sketch once more with a small
  Gaussian matrix.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core_la import AffineDecomposition, ParametricProblem, conj, product
from .embeddings import Embedding, EmbeddingSpec, sample_embedding
from .sketch import ThetaSketch


def _pair_coeffs(left, right):
    return [product(conj(ci), cj) for ci in left for cj in right]


class ClassicalResidualData:
    """Affine terms of ``||r||^2 = a^H M a + 2 Re(a^H m) + m_0``.

    ``M = U^H A^H R^{-1} A U``, ``m = -U^H A^H R^{-1} b`` and
    ``m_0 = b^H R^{-1} b``; each has ``m_A^2``, ``m_A m_b`` and ``m_b^2``
    terms. Keeps ``A_i U`` and ``R^{-1} A_i U`` so the basis can grow.
    """

    def __init__(self, problem: ParametricProblem, U=None):
        self.problem = problem
        dt = problem.dtype
        n = problem.n
        self._AU = [np.zeros((n, 0), dt) for _ in problem.A.factors]
        self._Z = [np.zeros((n, 0), dt) for _ in problem.A.factors]
        B = np.column_stack([np.asarray(f, dtype=dt) for f in problem.b.factors])
        self._B = B
        self._Rb = problem.space.solve(B)
        self._Rb = self._Rb.reshape(n, -1)
        self.clamp_count = 0
        self._refresh()
        if U is not None:
            self.extend(U)

    @property
    def r(self) -> int:
        return self._AU[0].shape[1]

    def extend(self, V) -> "ClassicalResidualData":
        """Add basis columns in place."""
        V = np.asarray(V, dtype=self.problem.dtype)
        if V.ndim == 1:
            V = V[:, None]
        for i, f in enumerate(self.problem.A.factors):
            AV = np.asarray(f @ V)
            self._AU[i] = np.column_stack([self._AU[i], AV])
            self._Z[i] = np.column_stack([self._Z[i], self.problem.space.solve(AV).reshape(AV.shape)])
        self._refresh()
        return self

    def _refresh(self):
        pr = self.problem
        p = pr.param_dim
        mA, mb = pr.A.m, pr.b.m
        self.M = AffineDecomposition(
            [self._AU[i].conj().T @ self._Z[j] for i in range(mA) for j in range(mA)],
            _pair_coeffs(pr.A.coeffs, pr.A.coeffs), p)
        self.m_vec = AffineDecomposition(
            [-(self._AU[i].conj().T @ self._Rb[:, j]) for i in range(mA) for j in range(mb)],
            _pair_coeffs(pr.A.coeffs, pr.b.coeffs), p)
        self.m_scal = AffineDecomposition(
            [np.array(np.vdot(self._B[:, i], self._Rb[:, j])) for i in range(mb) for j in range(mb)],
            _pair_coeffs(pr.b.coeffs, pr.b.coeffs), p)

    def squared_norms(self, A_coords, mus) -> np.ndarray:
        """Unclamped quadratic form for a batch of (coordinates, parameter) pairs."""
        mus = np.atleast_2d(mus)
        A_coords = np.atleast_2d(A_coords)
        cM = self.M.coefficients(mus)
        cm = self.m_vec.coefficients(mus)
        c0 = self.m_scal.coefficients(mus)
        r = self.r
        if r == 0:
            return np.real(c0 @ self.m_scal.stacked())
        Mf = self.M.stacked()
        mf = self.m_vec.stacked()
        Ma = np.einsum("pt,tij,pj->pi", cM, Mf, A_coords)
        quad = np.einsum("pi,pi->p", A_coords.conj(), Ma)
        lin = np.einsum("pi,pt,ti->p", A_coords.conj(), cm, mf)
        return np.real(quad) + 2 * np.real(lin) + np.real(c0 @ self.m_scal.stacked())

    def norms(self, A_coords, mus):
        """Square roots with negative values clamped to zero. Returns the
        norms and a boolean clamp flag per entry."""
        sq = self.squared_norms(A_coords, mus)
        flag = sq < 0
        self.clamp_count += int(flag.sum())
        return np.sqrt(np.maximum(sq, 0.0)), flag


def classical_residual_norm(data: ClassicalResidualData, a, mu) -> float:
    vals, _ = data.norms(np.asarray(a)[None], np.asarray(mu)[None])
    return float(vals[0])


@dataclass
class TwoLevelSketch:
    V_sk: AffineDecomposition
    b_sk: AffineDecomposition
    gamma_spec: EmbeddingSpec

    @property
    def k(self) -> int:
        return self.V_sk.shape[0]


def build_two_level(sketch: ThetaSketch, k_prime: int, seed: int = 0) -> TwoLevelSketch:
    """Compress the sketch with a Gaussian ``Gamma`` of size ``k' x k``."""
    if k_prime < 1:
        raise ValueError("k' must be positive")
    spec = EmbeddingSpec("gaussian", int(k_prime), sketch.k, int(seed))
    gamma = sample_embedding(spec)
    G = gamma.materialize()
    return TwoLevelSketch(sketch.V_sk.map(lambda F: G @ F), sketch.b_sk.map(lambda f: G @ f), spec)


def sketched_residual_norm(sk, a, mu) -> float:
    """``||V(mu) a - b(mu)||_2`` for a ThetaSketch or TwoLevelSketch."""
    return float(np.linalg.norm(sk.V_sk.evaluate(mu) @ a - sk.b_sk.evaluate(mu)))


def sketched_residual_norms(sk, A_coords, mus) -> np.ndarray:
    """Batched version of :func:`sketched_residual_norm`."""
    mus = np.atleast_2d(mus)
    A_coords = np.atleast_2d(A_coords)
    cV = sk.V_sk.coefficients(mus)
    cb = sk.b_sk.coefficients(mus)
    bb = cb @ sk.b_sk.stacked()
    if A_coords.shape[1] == 0:
        return np.linalg.norm(bb, axis=1)
    VA = np.einsum("tkr,pr->ptk", sk.V_sk.stacked(), A_coords)
    res = np.einsum("pt,ptk->pk", cV, VA) - bb
    return np.linalg.norm(res, axis=1)


def error_indicator(norm_value, eta=1.0):
    """``Delta = ||r||_{U'} / eta``."""
    eta = np.asarray(eta, dtype=float)
    if np.any(eta <= 0):
        raise ValueError("eta must be positive")
    return np.asarray(norm_value) / eta if np.ndim(norm_value) else float(norm_value / eta)


class DenseResidual:
    """Residual norms evaluated without the quadratic expansion.

    Precomputes ``Q R^{-1} A_i U`` and ``Q R^{-1} b_i`` so that
    ``||r||_{U'} = ||Q R^{-1} r||_2`` is a plain vector norm.
    """

    def __init__(self, problem: ParametricProblem, U):
        self.problem = problem
        U = np.asarray(U, dtype=problem.dtype)
        if U.ndim == 1:
            U = U[:, None]
        Q = problem.space.Q
        solve = problem.space.solve
        self.r = U.shape[1]
        self.QZ = np.stack([Q @ solve(np.asarray(f @ U)).reshape(U.shape) for f in problem.A.factors])
        B = np.column_stack([np.asarray(f, dtype=problem.dtype) for f in problem.b.factors])
        self.Qb = (Q @ solve(B).reshape(B.shape)).T

    def riesz(self, A_coords, mus) -> np.ndarray:
        """Rows are ``Q R^{-1} r`` for each pair."""
        mus = np.atleast_2d(mus)
        A_coords = np.atleast_2d(A_coords)
        cA = self.problem.A.coefficients(mus)
        cb = self.problem.b.coefficients(mus)
        out = cb @ self.Qb
        for t in range(self.QZ.shape[0]):
            out -= cA[:, t:t + 1] * (A_coords @ self.QZ[t].T)
        return out

    def norms(self, A_coords, mus) -> np.ndarray:
        return np.linalg.norm(self.riesz(A_coords, mus), axis=1)


def rhs_dual_norms(problem: ParametricProblem, mus) -> np.ndarray:
    dr = DenseResidual(problem, np.zeros((problem.n, 0), dtype=problem.dtype))
    return dr.norms(np.zeros((len(np.atleast_2d(mus)), 0)), mus)


def write_indicator_csv(path, classical, sketched, twolevel, clamp_flags) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mu_index", "delta_classical", "delta_sketched", "delta_twolevel", "clamp_flag"])
        for i, row in enumerate(zip(classical, sketched, twolevel, clamp_flags)):
            w.writerow([i, *(repr(float(x)) for x in row[:3]), int(bool(row[3]))])
