"""Desk-scale parametric benchmarks with P1 finite elements on structured
simplicial meshes.

* Thermal block: ``-div(kappa grad T) = 0`` on the unit square or cube split
  into ``B^d`` blocks with constant conductivities ``kappa_i`` in
  ``[0.1, 10]`` (log-uniform). Unit flux enters through ``y = 0``, ``T = 0``
  on ``y = 1``, other faces insulated. Output: mean temperature over
  ``[0, 1/2]^d``. Affine terms: one stiffness matrix per block.
* Cloak: Helmholtz ``lap u + kappa^2 u = 0`` on the unit square with a
  square perfect scatterer (homogeneous Neumann) in the middle, surrounded by
  ``L`` square rings whose wavenumbers ``kappa_i`` in ``[k0, sqrt(2) k0]``
  (log-uniform) are the parameters. First-order absorbing conditions
  ``i k0 u + du/dn = g`` with ``g = 2 i k0`` on ``y = 0`` (incoming plane
  wave) and ``g = 0`` on the other sides. Output: mean of ``u`` over
  ``y = 0``. Affine terms: term 0 groups stiffness, background mass and the
  absorbing boundary (``K - k0^2 M_bg + i k0 B``, coefficient 1); terms
  ``1..L`` are ring mass matrices with coefficient ``-kappa_i^2``. So
  ``m_A = L + 1`` and ``m_b = 1``.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .core_la import (AffineDecomposition, InnerProductSpace, ParamDomain, ParametricProblem, const,
                      coord, product)

N_CAP = 20000


# ---------------------------------------------------------------------------
# meshes and P1 assembly
# ---------------------------------------------------------------------------

def structured_mesh(N: int, dim: int):
    """Nodes and simplices of the unit square/cube with ``N`` cells per axis.

    Squares are split into 2 triangles, cubes into 6 tetrahedra along the
    main diagonal.
    """
    ax = np.linspace(0.0, 1.0, N + 1)
    grids = np.meshgrid(*([ax] * dim), indexing="ij")
    nodes = np.column_stack([g.ravel() for g in grids])
    strides = np.array([(N + 1) ** (dim - 1 - a) for a in range(dim)])
    cells = np.array(list(itertools.product(range(N), repeat=dim)))
    base = cells @ strides
    elems = []
    for perm in itertools.permutations(range(dim)):
        idx = [base]
        cur = base.copy()
        for a in perm:
            cur = cur + strides[a]
            idx.append(cur)
        elems.append(np.column_stack(idx))
    return nodes, np.vstack(elems)


def _simplex_geometry(nodes, elems):
    X = nodes[elems]                       # (E, d+1, d)
    d = X.shape[2]
    M = np.concatenate([np.ones(X.shape[:2] + (1,)), X], axis=2)
    vol = np.abs(np.linalg.det(M)) / math.factorial(d)
    grads = np.linalg.inv(M)[:, 1:, :]     # (E, d, d+1)
    return vol, grads


def p1_stiffness(nodes, elems, weights=None, n=None):
    vol, G = _simplex_geometry(nodes, elems)
    Ke = np.einsum("e,eki,ekj->eij", vol if weights is None else vol * weights, G, G)
    return _assemble(elems, Ke, n or len(nodes)), Ke


def p1_mass(nodes, elems, weights=None, n=None):
    vol, _ = _simplex_geometry(nodes, elems)
    d1 = elems.shape[1]
    ref = (np.ones((d1, d1)) + np.eye(d1)) / (d1 * (d1 + 1))
    w = vol if weights is None else vol * weights
    Me = w[:, None, None] * ref
    return _assemble(elems, Me, n or len(nodes)), Me


def _assemble(elems, Ke, n):
    d1 = elems.shape[1]
    rows = np.repeat(elems, d1, axis=1).ravel()
    cols = np.tile(elems, (1, d1)).ravel()
    return sp.csc_matrix((Ke.ravel(), (rows, cols)), shape=(n, n))


def boundary_facets(elems, on_boundary):
    """Element faces whose nodes all satisfy ``on_boundary`` (a node mask)."""
    d1 = elems.shape[1]
    faces = []
    for drop in range(d1):
        f = np.delete(elems, drop, axis=1)
        faces.append(f[np.all(on_boundary[f], axis=1)])
    faces = np.vstack(faces)
    if len(faces) == 0:
        return faces
    return np.unique(np.sort(faces, axis=1), axis=0)


def facet_measure(nodes, faces):
    X = nodes[faces]
    E = X[:, 1:] - X[:, :1]
    gram = np.einsum("fia,fja->fij", E, E)
    k = faces.shape[1] - 1
    return np.sqrt(np.abs(np.linalg.det(gram))) / math.factorial(k)


def facet_load(nodes, faces, n):
    """``int phi_j`` over the given boundary facets."""
    meas = facet_measure(nodes, faces)
    v = np.zeros(n)
    np.add.at(v, faces.ravel(), np.repeat(meas / faces.shape[1], faces.shape[1]))
    return v


def facet_mass(nodes, faces, n):
    meas = facet_measure(nodes, faces)
    k1 = faces.shape[1]
    ref = (np.ones((k1, k1)) + np.eye(k1)) / (k1 * (k1 + 1))
    return _assemble(faces, meas[:, None, None] * ref, n)


def _restrict(M, free):
    return M[free][:, free].tocsc()


# ---------------------------------------------------------------------------
# thermal block
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ThermalBlockConfig:
    dim: int = 3
    res: int = 16
    blocks: int = 2
    kappa_min: float = 0.1
    kappa_max: float = 10.0
    cap: int = N_CAP
    factor: str = "cholesky"


def build_thermal_block(cfg: ThermalBlockConfig = ThermalBlockConfig()) -> ParametricProblem:
    if cfg.dim not in (2, 3):
        raise ValueError("dimension must be 2 or 3")
    if cfg.res % cfg.blocks:
        raise ValueError("resolution must be a multiple of the block count")
    nodes, elems = structured_mesh(cfg.res, cfg.dim)
    free = nodes[:, 1] < 1.0 - 1e-12
    n = int(free.sum())
    if n > cfg.cap:
        raise ValueError(f"thermal block has {n} unknowns, above the cap {cfg.cap}")
    idx = -np.ones(len(nodes), dtype=int)
    idx[free] = np.arange(n)
    cent = nodes[elems].mean(axis=1)
    bidx = np.minimum((cent * cfg.blocks).astype(int), cfg.blocks - 1)
    block = bidx @ np.array([cfg.blocks ** a for a in range(cfg.dim)])
    nb = cfg.blocks ** cfg.dim
    K_all, Ke = p1_stiffness(nodes, elems)
    factors = []
    for i in range(nb):
        sel = block == i
        Ki, _ = p1_stiffness(nodes, elems[sel], n=len(nodes))
        factors.append(_restrict(Ki, free))
    R = _restrict(K_all, free)
    bottom = np.abs(nodes[:, 1]) < 1e-12
    flux = facet_load(nodes, boundary_facets(elems, bottom), len(nodes))[free]
    vol, _ = _simplex_geometry(nodes, elems)
    in1 = np.all(cent < 0.5, axis=1)
    lvec = np.zeros(len(nodes))
    np.add.at(lvec, elems[in1].ravel(), np.repeat(vol[in1] / (cfg.dim + 1), cfg.dim + 1))
    lvec = lvec[free] / 0.5 ** cfg.dim
    if cfg.factor == "elements":
        space = InnerProductSpace.from_element_blocks(R, idx[elems], Ke)
    else:
        space = InnerProductSpace(R)
    p = nb
    A = AffineDecomposition(factors, [coord(i) for i in range(nb)], p)
    b = AffineDecomposition([flux], [const(1.0)], p)
    l = AffineDecomposition([lvec], [const(1.0)], p)
    dom = ParamDomain.box([cfg.kappa_min] * nb, [cfg.kappa_max] * nb, "loguniform")
    meta = {"benchmark": "thermal-block", "dim": cfg.dim, "res": cfg.res, "blocks": cfg.blocks}
    return ParametricProblem(A, b, l, space, dom, "real", False, "thermal-block", meta)


def compliant_variant(problem: ParametricProblem) -> ParametricProblem:
    """Same operator with the output functional replaced by the load."""
    return ParametricProblem(problem.A, problem.b, problem.b, problem.space, problem.domain,
                             problem.field, True, problem.name + "-compliant", dict(problem.meta))


# ---------------------------------------------------------------------------
# acoustic cloak
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CloakConfig:
    layers: int = 10
    kappa0: float = 20.0
    res: int = 64
    scatterer_cells: int = 8
    layer_cells: int = 2
    min_nodes_per_wavelength: float = 10.0
    cap: int = N_CAP


def build_cloak(cfg: CloakConfig = CloakConfig()) -> ParametricProblem:
    N = cfg.res
    h = 1.0 / N
    wavelength = 2 * math.pi / (math.sqrt(2) * cfg.kappa0)
    if wavelength / h < cfg.min_nodes_per_wavelength:
        raise ValueError(f"resolution gives {wavelength / h:.1f} nodes per shortest wavelength "
                         f"(needs {cfg.min_nodes_per_wavelength}); increase res")
    half_sc = cfg.scatterer_cells / 2
    outer = half_sc + cfg.layers * cfg.layer_cells
    if outer > N / 2 - 1:
        raise ValueError("cloak does not fit in the domain at this resolution")
    nodes, elems = structured_mesh(N, 2)
    cent = nodes[elems].mean(axis=1)
    dist = np.abs(cent - 0.5).max(axis=1) / h       # Chebyshev distance in cells
    inside = dist < half_sc
    elems = elems[~inside]
    dist = dist[~inside]
    used = np.unique(elems)
    n = len(used)
    if n > cfg.cap:
        raise ValueError(f"cloak has {n} unknowns, above the cap {cfg.cap}")
    remap = -np.ones(len(nodes), dtype=int)
    remap[used] = np.arange(n)
    nodes = nodes[used]
    elems = remap[elems]
    ring = np.floor((dist - half_sc) / cfg.layer_cells).astype(int)
    background = ring >= cfg.layers
    K, _ = p1_stiffness(nodes, elems)
    M_all, _ = p1_mass(nodes, elems)
    M_bg, _ = p1_mass(nodes, elems[background], n=n)
    y0 = np.abs(nodes[:, 1]) < 1e-12
    outer_nodes = y0 | (np.abs(nodes[:, 1] - 1) < 1e-12) | (np.abs(nodes[:, 0]) < 1e-12) | (np.abs(nodes[:, 0] - 1) < 1e-12)
    f_all = boundary_facets(elems, outer_nodes)
    # keep only facets on the outer square (drop edges that merely connect boundary nodes)
    Xf = nodes[f_all]
    on_side = np.zeros(len(f_all), dtype=bool)
    for a in range(2):
        for v in (0.0, 1.0):
            on_side |= np.all(np.abs(Xf[:, :, a] - v) < 1e-12, axis=1)
    f_all = f_all[on_side]
    B = facet_mass(nodes, f_all, n)
    f_in = boundary_facets(elems, y0)
    g_in = facet_load(nodes, f_in, n)
    k0 = cfg.kappa0
    term0 = (K - k0 ** 2 * M_bg + 1j * k0 * B).tocsc()
    factors = [term0]
    coeffs = [const(1.0)]
    for i in range(cfg.layers):
        Mi, _ = p1_mass(nodes, elems[ring == i], n=n)
        factors.append(Mi.astype(complex).tocsc())
        coeffs.append(product(const(-1.0), coord(i), coord(i)))
    p = cfg.layers
    A = AffineDecomposition(factors, coeffs, p)
    b = AffineDecomposition([2j * k0 * g_in], [const(1.0)], p)
    l = AffineDecomposition([g_in / g_in.sum()], [const(1.0)], p)
    space = InnerProductSpace((K + k0 ** 2 * M_all).tocsc())
    dom = ParamDomain.box([k0] * p, [math.sqrt(2) * k0] * p, "loguniform")
    meta = {"benchmark": "cloak", "layers": cfg.layers, "kappa0": k0, "res": N,
            "scatterer_cells": cfg.scatterer_cells, "layer_cells": cfg.layer_cells}
    return ParametricProblem(A, b, l, space, dom, "complex", False, "cloak", meta)
