"""Random sketching matrices: rescaled Gaussian, rescaled Rademacher and the
partial subsampled randomized Hadamard transform (P-SRHT).

Randomness comes from Philox, a counter-based generator. Columns are drawn in
blocks of ``BLOCK`` with the block index folded into the key, so any column
can be regenerated on its own.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core_la import InnerProductSpace

KINDS = ("gaussian", "rademacher", "psrht")
BLOCK = 256
CACHE_ENTRIES = 2 ** 25

_M64 = (1 << 64) - 1
_STREAM_COLUMNS, _STREAM_SIGNS, _STREAM_ROWS = 1, 2, 3

PAIR_TABLE = {1e-3: 200, 1e-6: 365, 1e-12: 697, 1e-18: 1029}


@dataclass(frozen=True)
class EmbeddingSpec:
    kind: str
    k: int
    n: int
    seed: int = 0
    field: str = "real"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        if self.k < 1 or self.n < 1:
            raise ValueError("embedding dimensions must be positive")
        if self.field != "real":
            raise ValueError("only real-valued embeddings are supported")
        if self.kind == "psrht" and self.k > next_pow2(self.n):
            raise ValueError(f"P-SRHT needs k <= {next_pow2(self.n)} (padded length)")

    def to_json(self) -> dict:
        return {"kind": self.kind, "k": self.k, "n": self.n, "seed": self.seed, "field": self.field}

    @classmethod
    def from_json(cls, d) -> "EmbeddingSpec":
        return cls(d["kind"], int(d["k"]), int(d["n"]), int(d["seed"]), d.get("field", "real"))


def next_pow2(n: int) -> int:
    return 1 << (int(n) - 1).bit_length()


def _generator(seed: int, stream: int, block: int = 0) -> np.random.Generator:
    key = (seed & _M64) | (((stream << 56) | block) << 64)
    return np.random.Generator(np.random.Philox(key=key))


def _box_muller(gen: np.random.Generator, count: int) -> np.ndarray:
    half = (count + 1) // 2
    u = gen.random((2, half))
    rad = np.sqrt(-2.0 * np.log1p(-u[0]))
    ang = 2.0 * np.pi * u[1]
    return np.concatenate([rad * np.cos(ang), rad * np.sin(ang)])[:count]


def fwht(x, inplace: bool = False) -> np.ndarray:
    """Unnormalized Walsh-Hadamard transform along axis 0.

    Uses the Sylvester ordering ``H_s = H_{s/2} kron H_2``.
    """
    x = np.asarray(x)
    s = x.shape[0]
    if s < 1 or s & (s - 1):
        raise ValueError("FWHT length must be a power of two")
    if not inplace:
        x = x.copy()
    if not np.issubdtype(x.dtype, np.inexact):
        x = x.astype(float)
    tail = x.shape[1:]
    h = 1
    while h < s:
        y = x.reshape((s // (2 * h), 2, h) + tail)
        a = y[:, 0].copy()
        y[:, 0] += y[:, 1]
        np.subtract(a, y[:, 1], out=y[:, 1])
        h *= 2
    return x


def hadamard(s: int) -> np.ndarray:
    """Dense Sylvester-Hadamard matrix built by the Kronecker recursion."""
    H = np.ones((1, 1))
    H2 = np.array([[1.0, 1.0], [1.0, -1.0]])
    while H.shape[0] < s:
        H = np.kron(H, H2)
    return H


class Embedding:
    """A sampled sketching operator, applied as a function.

    When built with :func:`compose_with_factor` it represents ``Theta = Omega Q``
    and acts on vectors of the inner-product space.
    """

    def __init__(self, spec: EmbeddingSpec, factor=None, factor_id: str = ""):
        self.spec = spec
        self.factor = factor
        self.factor_id = factor_id
        self.apply_count = 0
        self._dense = None
        if spec.kind == "psrht":
            self.s = next_pow2(spec.n)
            sg = _generator(spec.seed, _STREAM_SIGNS)
            self.signs = np.where(sg.integers(0, 2, self.s) == 0, 1.0, -1.0)
            rg = _generator(spec.seed, _STREAM_ROWS)
            self.rows = rg.permutation(self.s)[: spec.k]

    @property
    def k(self) -> int:
        return self.spec.k

    @property
    def n(self) -> int:
        """Input dimension (columns of Q when composed)."""
        return self.factor.shape[1] if self.factor is not None else self.spec.n

    @property
    def emb_id(self) -> str:
        s = self.spec
        tag = f"{s.kind}:k={s.k}:n={s.n}:seed={s.seed}"
        return tag + (f":Q={self.factor_id}" if self.factor is not None else "")

    # -- column generation -------------------------------------------------
    def column_block(self, b: int) -> np.ndarray:
        """Columns ``b*BLOCK`` to ``(b+1)*BLOCK`` of a Gaussian or Rademacher Omega."""
        k, n = self.spec.k, self.spec.n
        lo, hi = b * BLOCK, min((b + 1) * BLOCK, n)
        gen = _generator(self.spec.seed, _STREAM_COLUMNS, b)
        count = k * (hi - lo)
        if self.spec.kind == "gaussian":
            vals = _box_muller(gen, count)
        else:
            vals = np.where(gen.integers(0, 2, count) == 0, 1.0, -1.0)
        return vals.reshape(hi - lo, k).T / math.sqrt(k)

    def column(self, j: int) -> np.ndarray:
        """Column ``j`` of Omega, generated without earlier blocks."""
        if self.spec.kind == "psrht":
            e = np.zeros(self.spec.n)
            e[j] = 1.0
            return self._apply_omega(e)
        return self.column_block(j // BLOCK)[:, j % BLOCK]

    def _omega_dense(self):
        if self._dense is None:
            k, n = self.spec.k, self.spec.n
            nb = -(-n // BLOCK)
            M = np.hstack([self.column_block(b) for b in range(nb)])
            if k * n <= CACHE_ENTRIES:
                self._dense = M
            return M
        return self._dense

    def _apply_omega(self, X):
        spec = self.spec
        if spec.kind == "psrht":
            Z = np.zeros((self.s,) + X.shape[1:], dtype=np.result_type(X.dtype, float))
            Z[: spec.n] = X * self.signs[: spec.n].reshape((-1,) + (1,) * (X.ndim - 1))
            fwht(Z, inplace=True)
            return Z[self.rows] / math.sqrt(spec.k)
        if spec.k * spec.n <= CACHE_ENTRIES:
            return self._omega_dense() @ X
        out = None
        for b in range(-(-spec.n // BLOCK)):
            part = self.column_block(b) @ X[b * BLOCK:(b + 1) * BLOCK]
            out = part if out is None else out + part
        return out

    # -- public ------------------------------------------------------------
    def apply(self, X) -> np.ndarray:
        """Sketch a vector or the columns of a matrix."""
        X = np.asarray(X)
        if X.ndim not in (1, 2) or X.shape[0] != self.n:
            raise ValueError(f"expected {self.n} rows, got shape {X.shape}")
        self.apply_count += 1 if X.ndim == 1 else X.shape[1]
        if self.factor is not None:
            X = self.factor @ X
        return self._apply_omega(X)

    __call__ = apply

    def apply_omega(self, X) -> np.ndarray:
        """Apply only the l2 part, skipping the inner factor."""
        X = np.asarray(X)
        if X.shape[0] != self.spec.n:
            raise ValueError(f"expected {self.spec.n} rows, got shape {X.shape}")
        return self._apply_omega(X)

    def materialize(self) -> np.ndarray:
        """Dense Omega (without the inner factor)."""
        if self.spec.kind == "psrht":
            return self._apply_omega(np.eye(self.spec.n))
        return self._omega_dense().copy()


def sample_embedding(spec: EmbeddingSpec) -> Embedding:
    return Embedding(spec)


def apply_embedding(theta: Embedding, X) -> np.ndarray:
    return theta.apply(X)


def compose_with_factor(omega: Embedding, space: InnerProductSpace) -> Embedding:
    """Return ``Theta = Omega Q`` acting on the space."""
    if omega.factor is not None:
        raise ValueError("embedding is already composed with a factor")
    if omega.spec.n != space.Q.shape[0]:
        raise ValueError(f"Omega has {omega.spec.n} columns but Q has {space.Q.shape[0]} rows")
    return Embedding(omega.spec, factor=space.Q, factor_id=space.fingerprint)


def embedding_for_space(kind: str, k: int, space: InnerProductSpace, seed: int = 0) -> Embedding:
    """Sample Omega with as many columns as Q has rows and compose."""
    return compose_with_factor(sample_embedding(EmbeddingSpec(kind, k, space.Q.shape[0], seed)), space)


def exact_isometry(space: InnerProductSpace, seed: int = 0) -> Embedding:
    """P-SRHT keeping every row of the padded transform: an exact isometry."""
    s = space.Q.shape[0]
    return embedding_for_space("psrht", next_pow2(s), space, seed)


# ---------------------------------------------------------------------------
# size bounds
# ---------------------------------------------------------------------------

def gaussian_rademacher_bound(eps: float, delta: float, d: int, field: str = "real") -> int:
    """Rows sufficient for an (eps, delta, d) oblivious Gaussian/Rademacher embedding."""
    if not 0 < eps < 0.572:
        raise ValueError("eps must lie in (0, 0.572)")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if d < 1:
        raise ValueError("d must be at least 1")
    c = {"real": 6.9, "complex": 13.8}[field]
    return math.ceil(7.87 / eps ** 2 * (c * d + math.log(1.0 / delta)))


def psrht_bound(eps: float, delta: float, d: int, n: int) -> int:
    """Rows sufficient for an (eps, delta, d) oblivious P-SRHT embedding of K^n."""
    if not 0 < eps < 1:
        raise ValueError("eps must lie in (0, 1)")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if d < 1 or n < 1:
        raise ValueError("d and n must be positive")
    lead = 2.0 / (eps ** 2 - eps ** 3 / 3.0)
    mid = (math.sqrt(d) + math.sqrt(8.0 * math.log(6.0 * n / delta))) ** 2
    return math.ceil(lead * mid * math.log(3.0 * d / delta))


def pair_bound(delta: float, eps: float = 0.5) -> int:
    """Gaussian rows preserving one inner product (two vectors) up to eps with
    probability 1 - delta: ``2 (eps^2/2 - eps^3/3)^{-1} ln(4/delta)``."""
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return math.ceil(2.0 / (eps ** 2 / 2 - eps ** 3 / 3) * math.log(4.0 / delta))


def oblivious_pair_bound_table(delta: float) -> int:
    """Tabulated Gaussian row counts for (1/2, delta, 1) embeddings; other
    delta values fall back to :func:`pair_bound`."""
    for d, k in PAIR_TABLE.items():
        if math.isclose(delta, d, rel_tol=1e-9):
            return k
    return pair_bound(delta)


# ---------------------------------------------------------------------------
# verification
# ---------------------------------------------------------------------------

def _orthonormal_image(theta: Embedding, V, rank_tol: float | None):
    V = np.asarray(V)
    if V.ndim == 1:
        V = V[:, None]
    X = theta.factor @ V if theta.factor is not None else V
    if rank_tol is None:
        Z, R = np.linalg.qr(X)
        diag = np.abs(np.diag(R))
        if diag.size == 0 or diag.min() <= 1e-12 * diag.max():
            raise ValueError("subspace basis is numerically rank deficient")
        return Z
    U, sv, _ = np.linalg.svd(X, full_matrices=False)
    keep = sv > rank_tol * sv[0]
    return U[:, keep]


def embedding_singular_values(theta: Embedding, V, rank_tol: float | None = None) -> np.ndarray:
    """Singular values of ``Theta W`` for a U-orthonormal basis W of ``range(V)``,
    padded with zeros when ``k`` is smaller than the dimension."""
    Z = _orthonormal_image(theta, V, rank_tol)
    sv = scipy.linalg.svdvals(theta.apply_omega(Z))
    return np.concatenate([sv, np.zeros(Z.shape[1] - sv.size)])


def verify_epsilon_embedding(theta: Embedding, V, rank_tol: float | None = None) -> float:
    """Smallest eps such that ``theta`` is an eps-embedding of ``range(V)``.

    Computed as ``max |sigma_i(Theta W)^2 - 1|`` for a U-orthonormal basis W.
    With ``rank_tol`` the basis is truncated to its numerically dominant part
    instead of rejecting rank-deficient input.
    """
    sv = embedding_singular_values(theta, V, rank_tol)
    return float(np.abs(sv ** 2 - 1.0).max())
