"""Sketched reduced bases.

A :class:`ThetaSketch` stores ``Theta U_r``, the affine factors of
``Theta R_U^{-1} A(mu) U_r`` and ``Theta R_U^{-1} b(mu)``, and the output rows
``l(mu)^H U_r``. Snapshot columns are grouped by affine term so that merging
two sketches is a plain concatenation.
"""
from __future__ import annotations

import io
import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .core_la import AffineDecomposition, Coefficient, ParametricProblem, conj
from .embeddings import Embedding, EmbeddingSpec

MAGIC = b"THSK"
VERSION = 1
RANK_RTOL = 1e-12


@dataclass
class SketchColumn:
    """Sketch of one snapshot ``u``: ``Theta u``, ``Theta R^{-1} A_i u`` and ``l_i^H u``."""

    u_sk: np.ndarray
    V_cols: list
    l_vals: np.ndarray


class ThetaSketch:
    def __init__(self, Ub_sk, V_sk: AffineDecomposition, b_sk: AffineDecomposition,
                 l_r: AffineDecomposition, emb_id: str, field: str = "real", emb_spec: dict | None = None):
        self.Ub_sk = Ub_sk
        self.V_sk = V_sk
        self.b_sk = b_sk
        self.l_r = l_r
        self.emb_id = emb_id
        self.field = field
        self.emb_spec = emb_spec or {}
        r = Ub_sk.shape[1]
        if V_sk.shape != (Ub_sk.shape[0], r) or l_r.shape != (r,):
            raise ValueError("sketch factors disagree on the basis size")

    @property
    def k(self) -> int:
        return self.Ub_sk.shape[0]

    @property
    def r(self) -> int:
        return self.Ub_sk.shape[1]

    @property
    def m_A(self) -> int:
        return self.V_sk.m

    @property
    def m_b(self) -> int:
        return self.b_sk.m

    def with_columns(self, Ub, V_factors, l_factors) -> "ThetaSketch":
        V = AffineDecomposition(V_factors, self.V_sk.coeffs, self.V_sk.param_dim)
        L = AffineDecomposition(l_factors, self.l_r.coeffs, self.l_r.param_dim)
        return ThetaSketch(Ub, V, self.b_sk, L, self.emb_id, self.field, self.emb_spec)

    def residual_vectors(self, a, mu):
        """``V(mu) a - b(mu)`` for one parameter."""
        return self.V_sk.evaluate(mu) @ a - self.b_sk.evaluate(mu)


def _dtype(problem: ParametricProblem):
    return problem.dtype


def empty_sketch(problem: ParametricProblem, theta: Embedding) -> ThetaSketch:
    """Sketch with ``r = 0``; computes ``Theta R_U^{-1} b_i`` once."""
    if theta.n != problem.n:
        raise ValueError("embedding and problem dimensions differ")
    dt = _dtype(problem)
    B = np.column_stack([np.asarray(f, dtype=dt) for f in problem.b.factors])
    b_sk = theta.apply(problem.space.solve(B))
    bdec = AffineDecomposition(list(b_sk.T.copy()), problem.b.coeffs, problem.param_dim)
    k = theta.k
    V = AffineDecomposition([np.zeros((k, 0), dt) for _ in problem.A.factors], problem.A.coeffs,
                            problem.param_dim)
    L = AffineDecomposition([np.zeros(0, dt) for _ in problem.l.factors],
                            [conj(c) for c in problem.l.coeffs], problem.param_dim)
    return ThetaSketch(np.zeros((k, 0), dt), V, bdec, L, theta.emb_id, problem.field, theta.spec.to_json())


def sketch_snapshot(problem: ParametricProblem, theta: Embedding, u) -> SketchColumn:
    """Sketch a single snapshot: one R_U-solve per operator term and
    ``m_A + 1`` applications of ``theta``."""
    u = np.asarray(u)
    if u.shape != (problem.n,):
        raise ValueError(f"snapshot must have shape ({problem.n},)")
    dt = _dtype(problem)
    AU = np.column_stack([f @ u for f in problem.A.factors]).astype(dt, copy=False)
    Z = problem.space.solve(AU)
    sk = theta.apply(np.column_stack([u.astype(dt, copy=False), Z]))
    lv = np.array([np.vdot(f, u) for f in problem.l.factors], dtype=dt)
    return SketchColumn(sk[:, 0].copy(), [sk[:, i + 1].copy() for i in range(problem.A.m)], lv)


def sketch_block(problem: ParametricProblem, theta: Embedding, U) -> list:
    """Sketch the columns of ``U`` in one batch; same operation counts as
    sketching them one by one."""
    U = np.asarray(U)
    if U.ndim == 1:
        U = U[:, None]
    dt = _dtype(problem)
    U = U.astype(dt, copy=False)
    Ub = theta.apply(U)
    Vs = [theta.apply(problem.space.solve((f @ U).astype(dt, copy=False))) for f in problem.A.factors]
    Ls = np.array([f.conj() @ U for f in problem.l.factors], dtype=dt)
    return [SketchColumn(Ub[:, j], [V[:, j] for V in Vs], Ls[:, j]) for j in range(U.shape[1])]


def append(sketch: ThetaSketch, col: SketchColumn) -> ThetaSketch:
    if col.u_sk.shape != (sketch.k,) or len(col.V_cols) != sketch.m_A or len(col.l_vals) != sketch.l_r.m:
        raise ValueError("sketch column does not match the sketch layout")
    Ub = np.column_stack([sketch.Ub_sk, col.u_sk])
    V = [np.column_stack([F, c]) for F, c in zip(sketch.V_sk.factors, col.V_cols)]
    L = [np.append(F, v) for F, v in zip(sketch.l_r.factors, col.l_vals)]
    return sketch.with_columns(Ub, V, L)


def append_many(sketch: ThetaSketch, cols) -> ThetaSketch:
    cols = list(cols)
    if not cols:
        return sketch
    Ub = np.column_stack([sketch.Ub_sk] + [c.u_sk for c in cols])
    V = [np.column_stack([F] + [c.V_cols[i] for c in cols]) for i, F in enumerate(sketch.V_sk.factors)]
    L = [np.concatenate([F, [c.l_vals[i] for c in cols]]) for i, F in enumerate(sketch.l_r.factors)]
    return sketch.with_columns(Ub, V, L)


def build_sketch(problem: ParametricProblem, theta: Embedding, U) -> ThetaSketch:
    """Sketch of the basis ``U`` (columns processed in one batch)."""
    return append_many(empty_sketch(problem, theta), sketch_block(problem, theta, U))


class RieszCache:
    """Embedding-independent part of a sketch: ``R_U^{-1} A_i U`` and
    ``R_U^{-1} b_i``. Sketching the same basis under many embeddings then
    costs only embedding applications."""

    def __init__(self, problem: ParametricProblem, U):
        U = np.asarray(U, dtype=_dtype(problem))
        if U.ndim == 1:
            U = U[:, None]
        self.problem = problem
        self.U = U
        solve = problem.space.solve
        self.Z = [solve(np.asarray(f @ U)).reshape(U.shape) for f in problem.A.factors]
        B = np.column_stack([np.asarray(f, dtype=_dtype(problem)) for f in problem.b.factors])
        self.Rb = solve(B).reshape(B.shape)
        self.L = np.array([f.conj() @ U for f in problem.l.factors], dtype=_dtype(problem)).reshape(-1, U.shape[1])

    def sketch(self, theta: Embedding) -> ThetaSketch:
        pr = self.problem
        p = pr.param_dim
        b_sk = theta.apply(self.Rb)
        V = AffineDecomposition([theta.apply(Z) for Z in self.Z], pr.A.coeffs, p)
        return ThetaSketch(theta.apply(self.U), V,
                           AffineDecomposition(list(b_sk.T.copy()), pr.b.coeffs, p),
                           AffineDecomposition(list(self.L), [conj(c) for c in pr.l.coeffs], p),
                           theta.emb_id, pr.field, theta.spec.to_json())


def merge(s1: ThetaSketch, s2: ThetaSketch) -> ThetaSketch:
    """Column concatenation of two sketches taken with the same embedding."""
    if s1.emb_id != s2.emb_id:
        raise ValueError(f"cannot merge sketches from different embeddings ({s1.emb_id} vs {s2.emb_id})")
    if s1.m_A != s2.m_A or s1.l_r.m != s2.l_r.m or s1.k != s2.k:
        raise ValueError("sketches have different affine structure")
    Ub = np.column_stack([s1.Ub_sk, s2.Ub_sk])
    V = [np.column_stack([a, b]) for a, b in zip(s1.V_sk.factors, s2.V_sk.factors)]
    L = [np.concatenate([a, b]) for a, b in zip(s1.l_r.factors, s2.l_r.factors)]
    return s1.with_columns(Ub, V, L)


def transform(sketch: ThetaSketch, T) -> ThetaSketch:
    """Sketch of the basis ``U_r T``."""
    V = [F @ T for F in sketch.V_sk.factors]
    L = [F @ T for F in sketch.l_r.factors]
    return sketch.with_columns(sketch.Ub_sk @ T, V, L)


def orthogonalize(sketch: ThetaSketch, rtol: float = RANK_RTOL):
    """Make ``Theta U_r`` orthonormal; returns the new sketch and ``T_r``.

    Uses a QR factorization. If the sketched basis is numerically rank
    deficient the basis is truncated (with a warning) and ``T_r`` has fewer
    columns than rows.
    """
    if sketch.r == 0:
        return sketch, np.zeros((0, 0))
    sv = np.linalg.svd(sketch.Ub_sk, compute_uv=False)
    rank = int(np.sum(sv > rtol * sv[0])) if sv[0] > 0 else 0
    if rank < sketch.r:
        warnings.warn(f"sketched basis has numerical rank {rank} < {sketch.r}; truncating")
        _, s, Vh = np.linalg.svd(sketch.Ub_sk, full_matrices=False)
        T = Vh[:rank].conj().T / s[:rank]
    else:
        _, R = np.linalg.qr(sketch.Ub_sk)
        T = np.linalg.solve(R, np.eye(R.shape[0], dtype=R.dtype))
        T = np.triu(T)
    return transform(sketch, T), T


# ---------------------------------------------------------------------------
# binary container
# ---------------------------------------------------------------------------

def save_sketch(sketch: ThetaSketch, path_or_file) -> None:
    dt = np.complex128 if sketch.field == "complex" else np.float64
    header = {
        "field": sketch.field, "k": sketch.k, "r": sketch.r, "m_A": sketch.m_A, "m_b": sketch.m_b,
        "m_l": sketch.l_r.m, "param_dim": sketch.V_sk.param_dim, "emb_id": sketch.emb_id,
        "emb_spec": sketch.emb_spec,
        "coeff_A": [c.to_json() for c in sketch.V_sk.coeffs],
        "coeff_b": [c.to_json() for c in sketch.b_sk.coeffs],
        "coeff_l": [c.to_json() for c in sketch.l_r.coeffs],
    }
    hb = json.dumps(header).encode()
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "wb") if own else path_or_file
    try:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(hb)))
        fh.write(hb)
        arrays = [sketch.Ub_sk] + list(sketch.V_sk.factors) + list(sketch.b_sk.factors) + list(sketch.l_r.factors)
        for a in arrays:
            fh.write(np.asarray(a, dtype=dt).tobytes(order="F"))
    finally:
        if own:
            fh.close()


def read_header(fh) -> dict:
    if fh.read(4) != MAGIC:
        raise ValueError("not a sketch file")
    version, hlen = struct.unpack("<HI", fh.read(6))
    if version != VERSION:
        raise ValueError(f"unsupported sketch file version {version}")
    header = json.loads(fh.read(hlen).decode())
    header["version"] = version
    return header


def load_sketch(path_or_file) -> ThetaSketch:
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "rb") if own else path_or_file
    try:
        h = read_header(fh)
        dt = np.dtype(np.complex128 if h["field"] == "complex" else np.float64)
        k, r, p = h["k"], h["r"], h["param_dim"]

        def take(shape):
            count = int(np.prod(shape))
            buf = fh.read(count * dt.itemsize)
            return np.frombuffer(buf, dtype=dt).reshape(shape, order="F").copy()

        Ub = take((k, r))
        V = [take((k, r)) for _ in range(h["m_A"])]
        b = [take((k,)) for _ in range(h["m_b"])]
        L = [take((r,)) for _ in range(h["m_l"])]
    finally:
        if own:
            fh.close()
    cA = [Coefficient.from_json(c) for c in h["coeff_A"]]
    cb = [Coefficient.from_json(c) for c in h["coeff_b"]]
    cl = [Coefficient.from_json(c) for c in h["coeff_l"]]
    return ThetaSketch(Ub, AffineDecomposition(V, cA, p), AffineDecomposition(b, cb, p),
                       AffineDecomposition(L, cl, p), h["emb_id"], h["field"], h["emb_spec"])


def sketch_bytes(sketch: ThetaSketch) -> bytes:
    buf = io.BytesIO()
    save_sketch(sketch, buf)
    return buf.getvalue()


def embedding_spec_of(sketch: ThetaSketch) -> EmbeddingSpec:
    return EmbeddingSpec.from_json(sketch.emb_spec)
