"""Linear algebra substrate: affine decompositions, inner-product spaces and
parametric problems, plus Matrix Market / JSON problem I/O.

Scalars may be real or complex. Inner products are conjugate-linear in the
first argument, ``<x, y> = x^H y``.
"""
from __future__ import annotations

import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field as dc_field
from typing import Callable, Sequence

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

DENSE_CUTOFF = 512
SOLVE_RTOL = 1e-10
HERMITIAN_TOL = 1e-12


class SingularSystemError(np.linalg.LinAlgError):
    """Raised when a full-order solve fails or misses its residual target."""


# ---------------------------------------------------------------------------
# coefficient functions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Coefficient:
    """Symbolic scalar function of the parameter vector.

    ``kind`` is one of ``const``, ``coord``, ``product`` or ``conj``. Calling
    the object on ``mu`` of shape ``(p,)`` returns a scalar; on ``(P, p)`` it
    returns an array of length ``P``.
    """

    kind: str
    value: complex = 1.0
    index: int = -1
    terms: tuple = ()

    def __call__(self, mu):
        mu = np.asarray(mu)
        batch = mu.shape[:-1]
        if self.kind == "const":
            v = self.value
            if isinstance(v, complex) and v.imag == 0:
                v = v.real
            return np.full(batch, v) if batch else v
        if self.kind == "coord":
            return mu[..., self.index]
        if self.kind == "product":
            out = self.terms[0](mu)
            for t in self.terms[1:]:
                out = out * t(mu)
            return out
        if self.kind == "conj":
            return np.conj(self.terms[0](mu))
        raise ValueError(f"unknown coefficient kind {self.kind!r}")

    @property
    def max_index(self) -> int:
        if self.kind == "coord":
            return self.index
        return max((t.max_index for t in self.terms), default=-1)

    def to_json(self) -> dict:
        if self.kind == "const":
            v = complex(self.value)
            return {"type": "const", "value": [v.real, v.imag] if v.imag else v.real}
        if self.kind == "coord":
            return {"type": "coord", "index": self.index}
        return {"type": self.kind, "terms": [t.to_json() for t in self.terms]}

    @classmethod
    def from_json(cls, d: dict) -> "Coefficient":
        t = d["type"]
        if t == "const":
            v = d["value"]
            return const(complex(v[0], v[1]) if isinstance(v, list) else v)
        if t == "coord":
            return coord(d["index"])
        terms = tuple(cls.from_json(x) for x in d["terms"])
        return cls(t, terms=terms)


def const(value) -> Coefficient:
    return Coefficient("const", value=value)


def coord(i: int) -> Coefficient:
    return Coefficient("coord", index=int(i))


def product(*terms: Coefficient) -> Coefficient:
    return Coefficient("product", terms=tuple(terms))


def conj(c: Coefficient) -> Coefficient:
    if c.kind == "const":
        return const(np.conj(c.value))
    if c.kind == "coord":
        # parameters are real
        return c
    return Coefficient("conj", terms=(c,))


# ---------------------------------------------------------------------------
# affine decompositions
# ---------------------------------------------------------------------------

def _is_sparse(a) -> bool:
    return sp.issparse(a)


class AffineDecomposition:
    """Parameter-separable object ``sum_i phi_i(mu) M_i``.

    Factors may be sparse matrices, dense arrays or vectors; all share one
    shape.
    """

    def __init__(self, factors: Sequence, coeffs: Sequence[Callable], param_dim: int):
        factors = list(factors)
        coeffs = list(coeffs)
        if len(factors) != len(coeffs):
            raise ValueError("number of factors and coefficient functions differ")
        if not factors:
            raise ValueError("an affine decomposition needs at least one term")
        shape = factors[0].shape
        for f in factors:
            if f.shape != shape:
                raise ValueError(f"factor shapes differ: {f.shape} vs {shape}")
        self.factors = factors
        self.coeffs = coeffs
        self.param_dim = int(param_dim)
        self.shape = shape

    def __len__(self) -> int:
        return len(self.factors)

    @property
    def m(self) -> int:
        return len(self.factors)

    @property
    def is_sparse(self) -> bool:
        return _is_sparse(self.factors[0])

    @property
    def dtype(self):
        return np.result_type(*[f.dtype for f in self.factors])

    def _check_mu(self, mu) -> np.ndarray:
        mu = np.asarray(mu, dtype=float)
        if mu.ndim == 0 or mu.shape[-1] != self.param_dim:
            raise ValueError(f"parameter has dimension {mu.shape[-1:]} but {self.param_dim} expected")
        return mu

    def coefficients(self, mu) -> np.ndarray:
        """Coefficient values, shape ``(m,)`` or ``(P, m)`` for batched ``mu``."""
        mu = self._check_mu(mu)
        vals = [np.broadcast_to(c(mu), mu.shape[:-1]) for c in self.coeffs]
        return np.stack(vals, axis=-1)

    def evaluate(self, mu):
        theta = self.coefficients(mu)
        if theta.ndim != 1:
            raise ValueError("evaluate takes a single parameter; use evaluate_many")
        out = None
        for c, f in zip(theta, self.factors):
            term = f * c
            out = term if out is None else out + term
        if _is_sparse(out):
            return out.tocsc()
        return out

    def stacked(self) -> np.ndarray:
        """Dense factors stacked along a leading axis."""
        if self.is_sparse:
            raise TypeError("stacked() needs dense factors")
        return np.stack([np.asarray(f) for f in self.factors])

    def evaluate_many(self, mus) -> np.ndarray:
        theta = np.atleast_2d(self.coefficients(mus))
        return np.tensordot(theta, self.stacked(), axes=(1, 0))

    def map(self, fn: Callable, coeffs: Sequence[Callable] | None = None) -> "AffineDecomposition":
        """Apply ``fn`` to every factor, keeping (or replacing) coefficients."""
        return AffineDecomposition([fn(f) for f in self.factors],
                                   self.coeffs if coeffs is None else coeffs,
                                   self.param_dim)


def evaluate_affine(dec: AffineDecomposition, mu):
    return dec.evaluate(mu)


# ---------------------------------------------------------------------------
# inner-product spaces
# ---------------------------------------------------------------------------

def _sparse_cholesky(R: sp.spmatrix) -> sp.csr_matrix:
    """Factor ``Q`` with ``Q^H Q = R`` from SuperLU in symmetric mode."""
    n = R.shape[0]
    lu = spla.splu(sp.csc_matrix(R), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                   options=dict(SymmetricMode=True))
    if not np.array_equal(lu.perm_r, lu.perm_c):
        raise np.linalg.LinAlgError("symmetric pivoting failed; matrix may not be positive definite")
    d = lu.U.diagonal()
    if np.any(np.abs(d.imag) > 1e-10 * np.abs(d).max()) or np.any(d.real <= 0):
        raise np.linalg.LinAlgError("inner-product matrix is not positive definite")
    d = np.sqrt(d.real)
    P = sp.csc_matrix((np.ones(n), (lu.perm_c, np.arange(n))), shape=(n, n))
    L = lu.L.tocsc()
    return (sp.diags(d) @ L.conj().T @ P).tocsr()


class InnerProductSpace:
    """Space ``K^n`` with the inner product ``<x, y>_U = <R_U x, y>``.

    ``Q`` is a factor with ``Q^H Q = R_U`` and may be rectangular.
    """

    def __init__(self, R, Q=None):
        n = R.shape[0]
        if R.shape != (n, n):
            raise ValueError("inner-product matrix must be square")
        self.n = n
        self.dense = n < DENSE_CUTOFF
        if self.dense:
            self.R = R.toarray() if _is_sparse(R) else np.asarray(R)
            herm_err = np.abs(self.R - self.R.conj().T).max()
            if herm_err > HERMITIAN_TOL * np.abs(self.R).max():
                raise ValueError("inner-product matrix is not self-adjoint")
            self._cho = scipy.linalg.cho_factor(self.R, lower=False)
            if Q is None:
                Q = np.triu(self._cho[0])
        else:
            self.R = sp.csc_matrix(R)
            herm_err = abs(self.R - self.R.conj().T).max()
            if herm_err > HERMITIAN_TOL * abs(self.R).max():
                raise ValueError("inner-product matrix is not self-adjoint")
            self._lu = spla.splu(self.R)
            if Q is None:
                Q = _sparse_cholesky(self.R)
        if Q.shape[1] != n:
            raise ValueError("factor Q must have n columns")
        self.Q = Q
        self.solve_count = 0
        self._fingerprint = None

    @classmethod
    def from_element_blocks(cls, R, dofs: Sequence[np.ndarray], blocks: Sequence[np.ndarray]):
        """Build ``Q`` by stacking factors of small positive semi-definite
        element matrices; ``dofs[e]`` maps local to global indices (negative
        entries are dropped)."""
        rows, cols, vals = [], [], []
        off = 0
        n = R.shape[0]
        for idx, Re in zip(dofs, blocks):
            idx = np.asarray(idx)
            keep = idx >= 0
            Re = np.asarray(Re)[np.ix_(keep, keep)]
            idx = idx[keep]
            if idx.size == 0:
                continue
            w, V = np.linalg.eigh(Re)
            pos = w > 1e-14 * max(abs(w).max(), 1e-300)
            Qe = np.sqrt(w[pos])[:, None] * V[:, pos].conj().T
            nr = Qe.shape[0]
            r_i, c_i = np.meshgrid(np.arange(nr) + off, idx, indexing="ij")
            rows.append(r_i.ravel())
            cols.append(c_i.ravel())
            vals.append(Qe.ravel())
            off += nr
        Q = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(off, n))
        return cls(R, Q=Q)

    @property
    def dim(self) -> int:
        return self.n

    @property
    def fingerprint(self) -> str:
        if self._fingerprint is None:
            h = hashlib.sha1()
            if self.dense:
                h.update(np.ascontiguousarray(self.R).tobytes())
            else:
                h.update(self.R.indptr.tobytes())
                h.update(self.R.indices.tobytes())
                h.update(self.R.data.tobytes())
            h.update(str(self.Q.shape).encode())
            self._fingerprint = h.hexdigest()[:16]
        return self._fingerprint

    def apply_R(self, x):
        return self.R @ x

    def solve(self, v):
        """Return ``R_U^{-1} v`` (vector or column block)."""
        v = np.asarray(v)
        self.solve_count += 1 if v.ndim == 1 else v.shape[1]
        if self.dense:
            return scipy.linalg.cho_solve(self._cho, v)
        if np.iscomplexobj(v) and not np.iscomplexobj(self.R.data):
            return self._lu.solve(np.ascontiguousarray(v.real)) + 1j * self._lu.solve(np.ascontiguousarray(v.imag))
        return self._lu.solve(v)

    def inner(self, x, y):
        return np.vdot(self.R @ x, y)

    def norm(self, x):
        """U-norm of a vector, or of every column of a block."""
        x = np.asarray(x)
        Qx = self.Q @ x
        return np.linalg.norm(Qx, axis=0)

    def dual_norm(self, y):
        """Dual norm ``sqrt(<y, R_U^{-1} y>)``, column-wise for blocks."""
        y = np.asarray(y)
        z = self.solve(y)
        val = np.real(np.sum(np.conj(y) * z, axis=0))
        return np.sqrt(np.maximum(val, 0.0))

    def orthonormalize(self, V, rtol: float = 1e-12):
        """U-orthonormal basis of ``range(V)`` with ``W = V T``; returns ``(W, T)``."""
        V = np.asarray(V)
        if V.ndim == 1:
            V = V[:, None]
        Z, Rz = np.linalg.qr(self.Q @ V)
        diag = np.abs(np.diag(Rz))
        if diag.size and diag.min() <= rtol * diag.max():
            raise ValueError("basis is numerically rank deficient")
        T = scipy.linalg.solve_triangular(Rz, np.eye(Rz.shape[0]))
        W = V @ T
        return W, T


# ---------------------------------------------------------------------------
# parametric problems
# ---------------------------------------------------------------------------

LAWS = ("uniform", "loguniform")


@dataclass(frozen=True)
class ParamDomain:
    lower: tuple
    upper: tuple
    law: tuple

    def __post_init__(self):
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.shape != hi.shape or len(self.law) != lo.size:
            raise ValueError("bounds and laws must have equal length")
        if np.any(hi < lo):
            raise ValueError("upper bound below lower bound")
        for law, a in zip(self.law, lo):
            if law not in LAWS:
                raise ValueError(f"unknown sampling law {law!r}")
            if law == "loguniform" and a <= 0:
                raise ValueError("log-uniform coordinates need positive bounds")

    @classmethod
    def box(cls, lower, upper, law="uniform") -> "ParamDomain":
        lower = tuple(float(x) for x in np.atleast_1d(lower))
        upper = tuple(float(x) for x in np.atleast_1d(upper))
        if isinstance(law, str):
            law = (law,) * len(lower)
        return cls(lower, upper, tuple(law))

    @property
    def dim(self) -> int:
        return len(self.lower)

    def sample(self, count: int, seed=None) -> np.ndarray:
        rng = np.random.default_rng(seed)
        u = rng.random((count, self.dim))
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        out = np.empty_like(u)
        for j, law in enumerate(self.law):
            if law == "uniform":
                out[:, j] = lo[j] + u[:, j] * (hi[j] - lo[j])
            else:
                out[:, j] = np.exp(np.log(lo[j]) + u[:, j] * (np.log(hi[j]) - np.log(lo[j])))
        return out

    def to_json(self) -> dict:
        return {"lower": list(self.lower), "upper": list(self.upper), "law": list(self.law)}

    @classmethod
    def from_json(cls, d) -> "ParamDomain":
        return cls(tuple(d["lower"]), tuple(d["upper"]), tuple(d["law"]))


@dataclass
class ParametricProblem:
    """``A(mu) u = b(mu)`` with output ``s(mu) = <l(mu), u(mu)>``."""

    A: AffineDecomposition
    b: AffineDecomposition
    l: AffineDecomposition
    space: InnerProductSpace
    domain: ParamDomain
    field: str = "real"
    compliant: bool = False
    name: str = ""
    meta: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        n = self.space.n
        if self.A.shape != (n, n):
            raise ValueError("operator shape does not match the space dimension")
        if self.b.shape != (n,) or self.l.shape != (n,):
            raise ValueError("right-hand side and output vectors must have length n")
        if self.field not in ("real", "complex"):
            raise ValueError("field must be 'real' or 'complex'")

    @property
    def n(self) -> int:
        return self.space.n

    @property
    def param_dim(self) -> int:
        return self.domain.dim

    @property
    def dtype(self):
        return np.complex128 if self.field == "complex" else np.float64

    def output(self, u, mu):
        return np.vdot(self.l.evaluate(mu), u)

    def dual(self) -> "ParametricProblem":
        """Adjoint problem ``A(mu)^H u_du = -l(mu)``."""
        A = AffineDecomposition([f.conj().T.tocsc() if _is_sparse(f) else f.conj().T for f in self.A.factors],
                                [conj(c) for c in self.A.coeffs], self.A.param_dim)
        b = self.l.map(lambda f: -f)
        return ParametricProblem(A, b, self.b, self.space, self.domain, self.field,
                                 self.compliant, self.name + "-dual", dict(self.meta))


def _factorize(A):
    if _is_sparse(A) and A.shape[0] >= DENSE_CUTOFF:
        lu = spla.splu(sp.csc_matrix(A))
        return lu.solve, lambda: float(np.abs(lu.U.diagonal()).min() / np.abs(lu.U.diagonal()).max())
    Ad = A.toarray() if _is_sparse(A) else np.asarray(A)
    lu = scipy.linalg.lu_factor(Ad, check_finite=True)
    d = np.abs(np.diag(lu[0]))
    return (lambda v: scipy.linalg.lu_solve(lu, v)), (lambda: float(d.min() / d.max()))


def solve_full(problem: ParametricProblem, mu, rtol: float = SOLVE_RTOL) -> np.ndarray:
    """Direct solve of the full-order system at ``mu``."""
    A = problem.A.evaluate(mu)
    b = problem.b.evaluate(mu)
    if problem.field == "complex":
        b = b.astype(complex)
    try:
        with warnings.catch_warnings(), np.errstate(all="ignore"):
            # singularity is diagnosed below from the residual
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            solve, pivot_ratio = _factorize(A)
            u = solve(b)
            res = np.linalg.norm(A @ u - b) / max(np.linalg.norm(b), np.finfo(float).tiny)
    except (RuntimeError, np.linalg.LinAlgError, ValueError) as exc:
        raise SingularSystemError(f"factorization failed at mu={np.asarray(mu).tolist()}: {exc}") from exc
    if not np.all(np.isfinite(u)) or res > rtol:
        raise SingularSystemError(
            f"solve at mu={np.asarray(mu).tolist()} left relative residual {res:.3e} "
            f"(pivot ratio {pivot_ratio():.3e})")
    return u


def gram_eigendecomposition(G, tol: float = HERMITIAN_TOL):
    """Eigenpairs of a Hermitian PSD matrix, eigenvalues descending and
    clipped at zero."""
    G = np.asarray(G)
    scale = max(np.abs(G).max(), np.finfo(float).tiny)
    if np.abs(G - G.conj().T).max() > tol * scale:
        raise ValueError("Gram matrix is not Hermitian")
    w, V = np.linalg.eigh(G)
    w, V = w[::-1], V[:, ::-1]
    return np.maximum(w, 0.0), V


# ---------------------------------------------------------------------------
# Matrix Market + JSON descriptor
# ---------------------------------------------------------------------------

def _write_factor(path, f):
    if _is_sparse(f):
        scipy.io.mmwrite(path, sp.coo_matrix(f))
    else:
        scipy.io.mmwrite(path, np.asarray(f).reshape(f.shape[0], -1))


def _read_factor(path, vector: bool):
    m = scipy.io.mmread(path)
    if vector:
        return np.asarray(m.toarray() if sp.issparse(m) else m).ravel()
    return sp.csc_matrix(m)


def write_problem(problem: ParametricProblem, directory: str) -> str:
    """Write factors as ``.mtx`` plus ``problem.json``; returns the JSON path."""
    os.makedirs(directory, exist_ok=True)
    desc = {"name": problem.name, "field": problem.field, "n": problem.n,
            "compliant": problem.compliant, "param_domain": problem.domain.to_json(),
            "meta": problem.meta}
    for key in ("A", "b", "l"):
        dec = getattr(problem, key)
        terms = []
        for i, (f, c) in enumerate(zip(dec.factors, dec.coeffs)):
            fname = f"{key}_{i}.mtx"
            _write_factor(os.path.join(directory, fname), f)
            terms.append({"file": fname, "coeff": c.to_json()})
        desc[key] = terms
    _write_factor(os.path.join(directory, "R_U.mtx"), sp.csc_matrix(problem.space.R))
    desc["R_U"] = "R_U.mtx"
    if sp.issparse(problem.space.Q) and problem.space.Q.shape[0] != problem.n:
        _write_factor(os.path.join(directory, "Q.mtx"), problem.space.Q)
        desc["Q"] = "Q.mtx"
    path = os.path.join(directory, "problem.json")
    with open(path, "w") as fh:
        json.dump(desc, fh, indent=2)
    return path


def read_problem(path: str) -> ParametricProblem:
    """Load a problem from a descriptor file or its directory."""
    if os.path.isdir(path):
        path = os.path.join(path, "problem.json")
    base = os.path.dirname(os.path.abspath(path))
    with open(path) as fh:
        desc = json.load(fh)
    domain = ParamDomain.from_json(desc["param_domain"])
    p = domain.dim
    decs = {}
    for key in ("A", "b", "l"):
        factors = [_read_factor(os.path.join(base, t["file"]), vector=key != "A") for t in desc[key]]
        coeffs = [Coefficient.from_json(t["coeff"]) for t in desc[key]]
        decs[key] = AffineDecomposition(factors, coeffs, p)
    R = _read_factor(os.path.join(base, desc["R_U"]), vector=False)
    if np.iscomplexobj(R.data) and np.abs(R.data.imag).max() == 0:
        R = R.real
    Q = _read_factor(os.path.join(base, desc["Q"]), vector=False).tocsr() if "Q" in desc else None
    space = InnerProductSpace(R, Q=Q)
    return ParametricProblem(decs["A"], decs["b"], decs["l"], space, domain, desc["field"],
                             desc.get("compliant", False), desc.get("name", ""), desc.get("meta", {}))
