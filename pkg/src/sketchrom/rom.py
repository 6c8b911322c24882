"""Reduced models built by Galerkin or sketched Galerkin projection, output
corrections using a dual reduced model, and quasi-optimality diagnostics."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .core_la import AffineDecomposition, ParametricProblem, conj
from .embeddings import Embedding
from .sketch import ThetaSketch

DENSE_DIAGNOSTIC_CAP = 20000


class ReducedSolveError(np.linalg.LinAlgError):
    """Raised when the reduced matrix is singular at a parameter."""

    def __init__(self, mu, detail=""):
        self.mu = np.asarray(mu)
        super().__init__(f"reduced system singular at mu={self.mu.tolist()} {detail}".strip())


@dataclass
class ReducedModel:
    """``A_r(mu) a = b_r(mu)`` with output ``s_r = l_r(mu) a``.

    ``lr`` stores the rows ``l_i^H U_r`` with conjugated coefficients so that
    ``s_r(mu) = lr.evaluate(mu) @ a``.
    """

    Ar: AffineDecomposition
    br: AffineDecomposition
    lr: AffineDecomposition
    kind: str
    basis_ref: object
    problem: ParametricProblem | None = None
    compliant: bool = False

    @property
    def r(self) -> int:
        return self.Ar.shape[0]

    def to_json(self) -> dict:
        def enc(dec):
            return {"coeffs": [c.to_json() for c in dec.coeffs],
                    "factors": [_encode_array(f) for f in dec.factors]}
        return {"kind": self.kind, "r": self.r, "param_dim": self.Ar.param_dim,
                "compliant": self.compliant, "Ar": enc(self.Ar), "br": enc(self.br), "lr": enc(self.lr)}


def _encode_array(a):
    a = np.asarray(a)
    if np.iscomplexobj(a):
        return {"re": a.real.tolist(), "im": a.imag.tolist()}
    return a.tolist()


def export_model(model: ReducedModel, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh)


def _check_rank(problem: ParametricProblem, U):
    sv = np.linalg.svd(problem.space.Q @ U, compute_uv=False)
    if sv.size == 0 or sv[-1] <= 1e-12 * sv[0]:
        raise ValueError("reduced basis is numerically rank deficient")


def build_classical_rom(problem: ParametricProblem, U) -> ReducedModel:
    """Galerkin projection onto ``range(U)``."""
    U = np.asarray(U)
    if U.ndim == 1:
        U = U[:, None]
    _check_rank(problem, U)
    Uh = U.conj().T
    p = problem.param_dim
    Ar = AffineDecomposition([Uh @ (f @ U) for f in problem.A.factors], problem.A.coeffs, p)
    br = AffineDecomposition([Uh @ f for f in problem.b.factors], problem.b.coeffs, p)
    lr = AffineDecomposition([f.conj() @ U for f in problem.l.factors], [conj(c) for c in problem.l.coeffs], p)
    return ReducedModel(Ar, br, lr, "classical", U, problem, problem.compliant)


def build_sketched_rom(sketch: ThetaSketch) -> ReducedModel:
    """Sketched Galerkin projection from sketch data only."""
    if sketch.r == 0:
        raise ValueError("sketch is empty")
    Uh = sketch.Ub_sk.conj().T
    Ar = sketch.V_sk.map(lambda F: Uh @ F)
    br = sketch.b_sk.map(lambda f: Uh @ f)
    return ReducedModel(Ar, br, sketch.l_r, "sketched", sketch)


def solve_rom(model: ReducedModel, mu) -> np.ndarray:
    A = model.Ar.evaluate(mu)
    b = model.br.evaluate(mu)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            lu, piv = scipy.linalg.lu_factor(A, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise ReducedSolveError(mu, str(exc)) from exc
    d = np.abs(np.diag(lu))
    if d.min() <= np.finfo(float).eps * max(d.max(), np.finfo(float).tiny):
        raise ReducedSolveError(mu, "(zero pivot)")
    return scipy.linalg.lu_solve((lu, piv), b)


def solve_rom_many(model: ReducedModel, mus):
    """Batched reduced solves; failed parameters give NaN rows and are
    listed in the second return value."""
    mus = np.atleast_2d(mus)
    A = model.Ar.evaluate_many(mus)
    b = model.br.evaluate_many(mus)
    out = np.full(b.shape, np.nan, dtype=np.result_type(A.dtype, b.dtype))
    failed = []
    try:
        out[:] = np.linalg.solve(A, b[..., None])[..., 0]
        bad = ~np.all(np.isfinite(out), axis=1)
        failed = list(np.flatnonzero(bad))
    except np.linalg.LinAlgError:
        for i in range(len(mus)):
            try:
                out[i] = np.linalg.solve(A[i], b[i])
            except np.linalg.LinAlgError:
                failed.append(i)
    return out, failed


def output_quantity(model: ReducedModel, a, mu):
    return model.lr.evaluate(mu) @ a


# ---------------------------------------------------------------------------
# primal-dual correction
# ---------------------------------------------------------------------------

@dataclass
class CoarseDual:
    """Coarse dual space ``W = range(W)`` used by the improved correction.

    Holds the exact products ``W^H b_i`` and ``W^H A_i U_r`` and the matrix
    mapping dual coordinates to the coordinates of the U-orthogonal projection
    onto ``W``. ``W_sk`` is the sketch ``Theta W`` (set by :meth:`sketched`).
    """

    Wb: AffineDecomposition
    WAU: AffineDecomposition
    proj: np.ndarray
    W: np.ndarray
    W_sk: np.ndarray | None = None
    emb_id: str = ""

    def sketched(self, theta: Embedding) -> "CoarseDual":
        return CoarseDual(self.Wb, self.WAU, self.proj, self.W, theta.apply(self.W), theta.emb_id)


def build_coarse_dual(problem: ParametricProblem, W, U_du, U_r) -> CoarseDual:
    W = np.asarray(W)
    Wh = W.conj().T
    p = problem.param_dim
    G = Wh @ problem.space.apply_R(W)
    proj = np.linalg.solve(G, Wh @ problem.space.apply_R(U_du))
    Wb = AffineDecomposition([Wh @ f for f in problem.b.factors], problem.b.coeffs, p)
    WAU = AffineDecomposition([Wh @ (f @ U_r) for f in problem.A.factors], problem.A.coeffs, p)
    return CoarseDual(Wb, WAU, proj, W)


def primal_dual_correct(primal, dual, mu, variant: str = "sketched", coarse: CoarseDual | None = None):
    """Corrected output estimate.

    ``primal`` and ``dual`` are ``(model, coordinates)`` pairs. ``classical``
    uses the exact residual, ``sketched`` replaces the correction by its
    sketched inner product, ``improved`` splits the dual solution into its
    projection on a coarse space (exact) and a remainder (sketched).
    """
    model, a = primal
    model_du, a_du = dual
    s_r = output_quantity(model, a, mu)
    if variant == "classical":
        if model.kind != "classical" or model_du.kind != "classical":
            raise ValueError("classical correction needs classical models")
        prob = model.problem
        u_r = model.basis_ref @ a
        u_du = model_du.basis_ref @ a_du
        res = prob.b.evaluate(mu) - prob.A.evaluate(mu) @ u_r
        return s_r - np.vdot(u_du, res)
    if model.kind != "sketched" or model_du.kind != "sketched":
        raise ValueError("sketched corrections need sketched models")
    sk, sk_du = model.basis_ref, model_du.basis_ref
    if sk.emb_id != sk_du.emb_id:
        raise ValueError("primal and dual sketches use different embeddings")
    res_sk = sk.b_sk.evaluate(mu) - sk.V_sk.evaluate(mu) @ a
    udu_sk = sk_du.Ub_sk @ a_du
    if variant == "sketched":
        return s_r - np.vdot(udu_sk, res_sk)
    if variant == "improved":
        if coarse is None or coarse.W_sk is None:
            raise ValueError("improved correction needs a sketched coarse dual space")
        if coarse.emb_id != sk.emb_id:
            raise ValueError("coarse dual space was sketched with a different embedding")
        c = coarse.proj @ a_du
        exact = np.vdot(c, coarse.Wb.evaluate(mu) - coarse.WAU.evaluate(mu) @ a)
        rest = np.vdot(udu_sk - coarse.W_sk @ c, res_sk)
        return s_r - exact - rest
    raise ValueError(f"unknown correction variant {variant!r}")


# ---------------------------------------------------------------------------
# quasi-optimality diagnostics
# ---------------------------------------------------------------------------

@dataclass
class QuasiOptimalityReport:
    alpha_r: float
    beta_r: float | None
    a_r: float
    cond_Ar: float
    alpha_r_sk: float | None = None
    beta_r_sk: float | None = None
    cond_Ar_sk: float | None = None
    eps_Y: float | None = None
    beta_full: float | None = None
    extra: dict = dc_field(default_factory=dict)


def _svals(M):
    return scipy.linalg.svdvals(M)


def full_continuity_constant(problem: ParametricProblem, mu) -> float:
    """``max ||A(mu) x||_{U'} / ||x||_U`` by a Lanczos iteration."""
    A = problem.A.evaluate(mu)
    space = problem.space
    n = problem.n
    Rinv = spla.LinearOperator((n, n), dtype=A.dtype, matvec=space.solve)
    D = A - A.conj().T
    asym = abs(D).max() if sp.issparse(D) else np.abs(D).max()
    if asym <= 1e-12 * (abs(A).max() if sp.issparse(A) else np.abs(A).max()):
        # Hermitian: the constant is the largest |eigenvalue| of the pencil (A, R)
        w = spla.eigsh(A, k=1, M=space.R, Minv=Rinv, which="LM", return_eigenvectors=False, tol=1e-10)
        return float(abs(w[0]))
    op = spla.LinearOperator((n, n), dtype=A.dtype,
                             matvec=lambda x: A.conj().T @ space.solve(A @ x))
    w = spla.eigsh(op, k=1, M=space.R, Minv=Rinv, which="LA", return_eigenvectors=False, tol=1e-8)
    return float(np.sqrt(max(w[0].real, 0.0)))


class QuasiOptimality:
    """Galerkin constants for a fixed space ``range(U_r)`` at many parameters.

    Dual norms restricted to ``U_r`` are realized with a U-orthonormal basis
    ``W``, so ``||y||_{U_r'} = ||W^H y||``. Sketched analogues use an
    orthonormal basis of ``Theta W``. ``A_i W`` and ``R^{-1} A_i W`` are
    computed once; sketches of them are cached per embedding.
    """

    def __init__(self, problem: ParametricProblem, U_r):
        if problem.n > DENSE_DIAGNOSTIC_CAP:
            raise ValueError("quasi-optimality constants are a diagnostic only at desk scale")
        self.problem = problem
        space = problem.space
        self.W, _ = space.orthonormalize(U_r)
        self.AW = [np.asarray(f @ self.W) for f in problem.A.factors]
        self.Y = [space.solve(x).reshape(x.shape) for x in self.AW]
        self._sk = {}

    def _sketched(self, theta: Embedding):
        if theta.emb_id not in self._sk:
            Qz, Rz = np.linalg.qr(theta.apply(self.W))
            self._sk[theta.emb_id] = (Qz, Rz, [Qz.conj().T @ theta.apply(y) for y in self.Y])
        return self._sk[theta.emb_id]

    def report(self, mu, theta: Embedding | None = None, u=None, with_eps: bool = False,
               full_beta: bool = False) -> QuasiOptimalityReport:
        pr = self.problem
        space = pr.space
        c = pr.A.coefficients(mu)
        W = self.W
        AW = sum(ci * x for ci, x in zip(c, self.AW))
        Y = sum(ci * x for ci, x in zip(c, self.Y))
        WAW = W.conj().T @ AW
        s = _svals(WAW)
        G1 = AW.conj().T @ Y
        G1 = (G1 + G1.conj().T) / 2
        G2 = WAW.conj().T @ WAW
        ar = float(np.sqrt(max(scipy.linalg.eigh(G1, G2, eigvals_only=True)[-1], 0.0)))
        beta = None
        extra_A = extra_Y = None
        if u is not None:
            u = np.asarray(u)
            v = u - W @ (W.conj().T @ space.apply_R(u))
            v = v - W @ (W.conj().T @ space.apply_R(v))
            nv = space.norm(v)
            if nv > 1e-12 * space.norm(u):
                v = v / nv
                extra_A = pr.A.evaluate(mu) @ v
                extra_Y = space.solve(extra_A)
                beta = float(_svals(W.conj().T @ np.column_stack([AW, extra_A]))[0])
            else:
                beta = float(s[0])
        rep = QuasiOptimalityReport(float(s[-1]), beta, ar, float(s[0] / s[-1]))
        if full_beta:
            rep.beta_full = full_continuity_constant(pr, mu)
        if theta is not None:
            Qz, Rz, QY = self._sketched(theta)
            Ms = sum(ci * x for ci, x in zip(c, QY))
            ss = _svals(Ms)
            rep.alpha_r_sk = float(ss[-1])
            if u is not None:
                cols = [Ms] if extra_Y is None else [Ms, Qz.conj().T @ theta.apply(extra_Y)[:, None]]
                rep.beta_r_sk = float(_svals(np.column_stack(cols))[0])
            sa = _svals(Ms @ np.linalg.inv(Rz))
            rep.cond_Ar_sk = float(sa[0] / sa[-1])
            if with_eps:
                from .embeddings import verify_epsilon_embedding
                rb = space.solve(pr.b.evaluate(mu))
                rep.eps_Y = verify_epsilon_embedding(theta, np.column_stack([W, Y, rb]), rank_tol=1e-13)
        return rep


def quasi_optimality_constants(problem: ParametricProblem, U_r, mu, theta: Embedding | None = None,
                               u=None, with_eps: bool = False, full_beta: bool = False) -> QuasiOptimalityReport:
    """Galerkin constants at ``mu`` for ``range(U_r)``; ``beta_r`` needs the
    full solution ``u`` and is ``None`` otherwise."""
    return QuasiOptimality(problem, U_r).report(mu, theta, u, with_eps, full_beta)


def compare_models(m1: ReducedModel, m2: ReducedModel, mu) -> float:
    """Largest relative difference between the reduced matrices at ``mu``."""
    A1, A2 = m1.Ar.evaluate(mu), m2.Ar.evaluate(mu)
    return float(np.abs(A1 - A2).max() / max(np.abs(A1).max(), np.finfo(float).tiny))
