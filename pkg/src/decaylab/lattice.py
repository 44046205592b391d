"""Grids and discrete operators: magnetic Schrodinger, Dirichlet exterior,
radial sectors, conjugated (Carleman) operators, semiclassical Sobolev norms.

Two grid families are supported.  Cartesian boxes [-L, L]^d carry interior
nodes x_i = -L + (i+1) h with h = 2L/(n+1) and homogeneous Dirichlet data one
spacing beyond the end nodes.  Radial grids live on (0, R] with staggered
nodes r_j = (j + 1/2) h so the centrifugal singularity never sits on a node;
Dirichlet conditions at r = 0 and r = R are realized by odd-reflection ghosts.

The magnetic operator is assembled from covariant (Peierls-phase) forward
differences.  Each lattice link x -> x + h e_j carries the unitary phase
exp(i h b_j(x + h e_j / 2)), and P = sum_j D_j^* D_j + V.  This guarantees a
Hermitian matrix and P >= 0 whenever V >= 0, which the estimates assume
throughout.  The literal expansion -Delta + i div(b .) + i b.grad + V + |b|^2
is also assembled (centered differences) as a cross-check; the two agree to
O(h)|b| on smooth vectors.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .errors import (ConstraintViolation, DisconnectedExterior, DomainMismatch,
                     SizeExceeded)
from .weights import FieldSpec, bracket


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Grid:
    """Uniform grid; mode 'cartesian' on [-L, L]^d or 'radial' on (0, R].

    For radial grids ``d_eff`` is the effective ambient dimension entering
    centrifugal terms; the array itself is one dimensional.  ``obstacle_mask``
    marks removed nodes (case b); all-False in case a.
    """

    mode: str
    d: int
    n: int                      # nodes per axis
    extent: float               # L (cartesian half-width) or R (radial)
    d_eff: int = 0
    boundary: str = "dirichlet"  # cartesian only; 'periodic' for test boxes
    obstacle_mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.mode not in ("cartesian", "radial"):
            raise ConstraintViolation(f"unknown grid mode {self.mode!r}")
        if self.mode == "cartesian" and self.d not in (1, 2, 3):
            raise ConstraintViolation("cartesian grids support d in {1,2,3}")
        if self.mode == "radial" and self.d != 1:
            raise ConstraintViolation("radial grids are one dimensional")
        if self.n < 2 or self.extent <= 0:
            raise ConstraintViolation("need n >= 2 and positive extent")
        object.__setattr__(self, "d_eff", self.d_eff or self.d)

    # -- geometry ---------------------------------------------------------

    @property
    def h(self) -> float:
        if self.mode == "radial":
            return self.extent / self.n
        if self.boundary == "periodic":
            return 2.0 * self.extent / self.n
        return 2.0 * self.extent / (self.n + 1)

    @property
    def size(self) -> int:
        return self.n ** self.d

    def axis_coords(self) -> np.ndarray:
        if self.mode == "radial":
            return (np.arange(self.n) + 0.5) * self.h
        if self.boundary == "periodic":
            return -self.extent + np.arange(self.n) * self.h
        return -self.extent + (np.arange(self.n) + 1) * self.h

    def points(self) -> np.ndarray:
        """(N, d) node coordinates in flat C order (or (N,) radii)."""
        ax = self.axis_coords()
        if self.d == 1:
            return ax
        grids = np.meshgrid(*([ax] * self.d), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=-1)

    def radii(self) -> np.ndarray:
        pts = self.points()
        if pts.ndim == 1:
            return np.abs(pts)
        return np.linalg.norm(pts, axis=-1)

    @property
    def n_exterior(self) -> int:
        if self.obstacle_mask is None:
            return self.size
        return int(np.count_nonzero(~self.obstacle_mask))

    def keep_indices(self) -> np.ndarray:
        if self.obstacle_mask is None:
            return np.arange(self.size)
        return np.flatnonzero(~self.obstacle_mask)

    def embed(self, u_ext: np.ndarray) -> np.ndarray:
        """Zero-extend an exterior vector onto the full grid."""
        if self.obstacle_mask is None:
            return u_ext
        out = np.zeros(self.size, dtype=complex)
        out[self.keep_indices()] = u_ext
        return out

    def restrict(self, u_full: np.ndarray) -> np.ndarray:
        if self.obstacle_mask is None:
            return u_full
        return u_full[self.keep_indices()]

    def with_obstacle(self, mask: np.ndarray) -> "Grid":
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (self.size,):
            raise ConstraintViolation("obstacle mask must be flat with one entry per node")
        return Grid(self.mode, self.d, self.n, self.extent, self.d_eff,
                    self.boundary, mask)

    # -- difference operators ----------------------------------------------

    def forward_differences(self, restrict_exterior: bool = False) -> list[sp.csr_matrix]:
        """One rectangular link-difference matrix per axis.

        Rows enumerate lattice links including the half-links to the Dirichlet
        boundary, so that sum_j D_j^T D_j is exactly the (2d+1)-point
        Laplacian.  Periodic boxes wrap instead.
        """
        mats = [self._axis_difference(j) for j in range(self.d)]
        if restrict_exterior and self.obstacle_mask is not None:
            keep = self.keep_indices()
            mats = [m[:, keep].tocsr() for m in mats]
        return mats

    def _axis_difference(self, axis: int) -> sp.csr_matrix:
        n, d, h = self.n, self.d, self.h
        shape = (n,) * d
        stride = int(np.prod(shape[axis + 1:], dtype=int)) if axis < d - 1 else 1
        idx = np.arange(self.size).reshape(shape)
        periodic = self.mode == "cartesian" and self.boundary == "periodic"

        rows, cols, vals = [], [], []
        row = 0
        lines = np.moveaxis(idx, axis, -1).reshape(-1, n)
        for line in lines:
            if periodic:
                for k in range(n):
                    rows += [row, row]
                    cols += [int(line[(k + 1) % n]), int(line[k])]
                    vals += [1.0 / h, -1.0 / h]
                    row += 1
            else:
                # boundary half-link into the first node
                rows.append(row); cols.append(int(line[0])); vals.append(1.0 / h)
                row += 1
                for k in range(n - 1):
                    rows += [row, row]
                    cols += [int(line[k + 1]), int(line[k])]
                    vals += [1.0 / h, -1.0 / h]
                    row += 1
                rows.append(row); cols.append(int(line[-1])); vals.append(-1.0 / h)
                row += 1
        return sp.csr_matrix((vals, (rows, cols)), shape=(row, self.size))

    def link_midpoints(self, axis: int) -> np.ndarray:
        """Coordinates of the link midpoints matching `_axis_difference` rows."""
        n, d, h = self.n, self.d, self.h
        ax = self.axis_coords()
        if d == 1:
            base = ax[None, :]
        else:
            pts = self.points().reshape((n,) * d + (d,))
            base = np.moveaxis(pts, axis, -2).reshape(-1, n, d)
        periodic = self.mode == "cartesian" and self.boundary == "periodic"
        out = []
        for line in base:
            coords = line if d > 1 else np.stack([line], axis=-1)
            if periodic:
                mids = coords.copy()
                mids[:, -1 if d == 1 else axis] += 0.5 * h
                out.append(mids)
            else:
                first = coords[0].copy()
                first[axis if d > 1 else 0] -= 0.5 * h
                inner = 0.5 * (coords[1:] + coords[:-1])
                last = coords[-1].copy()
                last[axis if d > 1 else 0] += 0.5 * h
                out.append(np.vstack([first[None, :], inner, last[None, :]]))
        mids = np.vstack(out)
        return mids[:, 0] if d == 1 else mids


def cartesian_grid(d: int, L: float, n: int, boundary: str = "dirichlet") -> Grid:
    return Grid("cartesian", d, n, L, d, boundary)


def radial_grid(R: float, n: int, d_eff: int = 3) -> Grid:
    return Grid("radial", 1, n, R, d_eff)


def disc_obstacle(grid: Grid, radius: float, center=None) -> np.ndarray:
    pts = grid.points()
    if pts.ndim == 1:
        pts = pts[:, None]
    c = np.zeros(pts.shape[1]) if center is None else np.asarray(center, dtype=float)
    return np.linalg.norm(pts - c, axis=-1) < radius


# ---------------------------------------------------------------------------
# Discrete operators
# ---------------------------------------------------------------------------

@dataclass
class DiscreteOperator:
    """Sparse matrix realization of one of the lab's operators."""

    matrix: sp.csr_matrix
    grid: Grid
    kind: str
    d_eff: int
    is_hermitian: bool = True
    fields: Optional[FieldSpec] = None
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    def hermiticity_defect(self) -> float:
        diff = (self.matrix - self.matrix.conjugate().T).tocoo()
        top = np.max(np.abs(diff.data)) if diff.nnz else 0.0
        scale = np.max(np.abs(self.matrix.tocoo().data))
        return float(top / scale) if scale else 0.0

    def to_dense(self) -> np.ndarray:
        return self.matrix.toarray()

    def export_matrix_market(self, path) -> None:
        from scipy.io import mmwrite
        mmwrite(str(path), self.matrix.tocoo())


def _diag(values) -> sp.csr_matrix:
    return sp.diags(np.asarray(values, dtype=complex)).tocsr()


def free_laplacian(grid: Grid, restrict_exterior: bool = False) -> sp.csr_matrix:
    diffs = grid.forward_differences(restrict_exterior=restrict_exterior)
    n = diffs[0].shape[1]
    K = sp.csr_matrix((n, n), dtype=complex)
    for D in diffs:
        K = K + (D.conjugate().T @ D)
    return K.tocsr()


def assemble_magnetic(grid: Grid, fields: FieldSpec) -> DiscreteOperator:
    """(i grad + b)^2 + V via Peierls-phase covariant differences.

    Case a only: the grid must be obstacle-free.  For b = 0 this reduces
    exactly to the standard stencil Laplacian plus V.
    """
    if grid.obstacle_mask is not None and grid.obstacle_mask.any():
        raise ConstraintViolation("magnetic assembly requires an obstacle-free grid")
    pts = grid.points()
    try:
        v = np.asarray(fields.V(pts), dtype=float)
    except Exception as exc:
        raise DomainMismatch(f"V not evaluable on grid: {exc}") from exc
    if v.shape != (grid.size,):
        raise DomainMismatch("V must return one value per node")

    n = grid.size
    M = sp.csr_matrix((n, n), dtype=complex)
    for axis in range(grid.d):
        D = grid._axis_difference(axis).astype(complex).tolil()
        if fields.b is not None:
            mids = grid.link_midpoints(axis)
            bvals = np.asarray(fields.b(mids), dtype=float)
            if bvals.ndim == 1 and grid.d == 1:
                baxis = bvals
            else:
                baxis = bvals[:, axis]
            # e^{-i h b} on the link head makes D approximate d/dx - i b,
            # so D^* D expands to (i d/dx + b)^2 with the paper's sign
            phase = np.exp(-1j * grid.h * baxis)
            # scale the +1/h (head) entry of each link row by the link phase
            D = D.tocoo()
            head = D.data.real > 0
            D.data[head] = D.data[head] * phase[D.row[head]]
            D = D.tocsr()
        else:
            D = D.tocsr()
        M = M + D.conjugate().T @ D
    M = M + _diag(v)
    return DiscreteOperator(M.tocsr(), grid, "P_magnetic" if fields.b is not None else "P_free",
                            grid.d_eff, True, fields)


def assemble_magnetic_literal(grid: Grid, fields: FieldSpec) -> DiscreteOperator:
    """-Delta + i div(b .) + i b.grad + (V + |b|^2) with centered differences.

    Cross-check operator only: not guaranteed nonnegative at finite h.
    """
    pts = grid.points()
    n = grid.size
    K = free_laplacian(grid)
    M = K.astype(complex)
    if fields.b is not None:
        bvals = np.asarray(fields.b(pts), dtype=float)
        if bvals.ndim == 1:
            bvals = bvals[:, None]
        for axis in range(grid.d):
            C = _centered_difference(grid, axis)
            bdiag = _diag(bvals[:, axis])
            M = M + 1j * (C @ bdiag) + 1j * (bdiag @ C)
    vt = np.asarray(fields.vtilde(pts), dtype=float)
    M = M + _diag(vt)
    return DiscreteOperator(M.tocsr(), grid, "P_literal", grid.d_eff, False, fields)


def _centered_difference(grid: Grid, axis: int) -> sp.csr_matrix:
    """(u(x+h) - u(x-h)) / 2h with Dirichlet zero ghosts (square matrix)."""
    n, d = grid.n, grid.d
    idx = np.arange(grid.size).reshape((n,) * d)
    lines = np.moveaxis(idx, axis, -1).reshape(-1, n)
    rows, cols, vals = [], [], []
    inv = 1.0 / (2.0 * grid.h)
    for line in lines:
        for k in range(n):
            if k + 1 < n:
                rows.append(int(line[k])); cols.append(int(line[k + 1])); vals.append(inv)
            if k - 1 >= 0:
                rows.append(int(line[k])); cols.append(int(line[k - 1])); vals.append(-inv)
    return sp.csr_matrix((vals, (rows, cols)), shape=(grid.size, grid.size), dtype=complex)


def assemble_dirichlet_exterior(grid: Grid, obstacle: np.ndarray,
                                V: Callable[[np.ndarray], np.ndarray]) -> DiscreteOperator:
    """Dirichlet realization of -Delta + V outside a masked obstacle.

    Masked rows and columns are removed; the exterior must stay connected.
    """
    mask = np.asarray(obstacle, dtype=bool)
    gmask = grid.with_obstacle(mask)
    if not mask.any():
        free = assemble_magnetic(grid, FieldSpec(V=V, b=None, tag="short_range",
                                                 rho_decay=2.0))
        free.kind = "P_dirichlet_exterior"
        return free
    _check_exterior_connected(gmask)
    K = free_laplacian(gmask, restrict_exterior=True)
    pts = grid.points()
    v = np.asarray(V(pts), dtype=float)[gmask.keep_indices()]
    M = (K + _diag(v)).tocsr()
    return DiscreteOperator(M, gmask, "P_dirichlet_exterior", grid.d_eff, True)


def _check_exterior_connected(grid: Grid) -> None:
    keep = grid.keep_indices()
    pos = -np.ones(grid.size, dtype=int)
    pos[keep] = np.arange(len(keep))
    n, d = grid.n, grid.d
    idx = np.arange(grid.size).reshape((n,) * d)
    rows, cols = [], []
    for axis in range(d):
        lines = np.moveaxis(idx, axis, -1).reshape(-1, n)
        a = lines[:, :-1].ravel()
        b = lines[:, 1:].ravel()
        ok = (pos[a] >= 0) & (pos[b] >= 0)
        rows += list(pos[a[ok]])
        cols += list(pos[b[ok]])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(keep), len(keep)))
    ncomp, _ = connected_components(adj, directed=False)
    if ncomp != 1:
        raise DisconnectedExterior(f"exterior splits into {ncomp} components")


def assemble_radial_sector(nu: int, d_eff: int, V_radial: Optional[Callable],
                           grid_r: Grid) -> DiscreteOperator:
    """-d^2/dr^2 + [nu(nu+d_eff-2) + (d_eff-1)(d_eff-3)/4] / r^2 + V(r).

    Half-line reduction of the radial operator in the r^((d-1)/2)-conjugated
    picture, Dirichlet at r = 0 and r = R via odd-reflection ghosts.
    """
    if grid_r.mode != "radial":
        raise ConstraintViolation("radial sector needs a radial grid")
    if nu < 0:
        raise ConstraintViolation("harmonic index nu must be >= 0")
    r = grid_r.axis_coords()
    h = grid_r.h
    n = grid_r.n
    main = np.full(n, 2.0 / h**2)
    main[0] += 1.0 / h**2   # odd reflection about r = 0
    main[-1] += 1.0 / h**2  # odd reflection about r = R
    off = np.full(n - 1, -1.0 / h**2)
    K = sp.diags([off, main, off], [-1, 0, 1]).tocsr()
    cd = (d_eff - 1) * (d_eff - 3) / 4.0
    cent = (nu * (nu + d_eff - 2) + cd) / r**2
    v = np.zeros(n) if V_radial is None else np.asarray(V_radial(r), dtype=float)
    M = (K + _diag(cent + v)).tocsr()
    op = DiscreteOperator(M, grid_r, "radial_sector", d_eff, True)
    op.meta["nu"] = nu
    return op


def conjugated_operator(grid, p, tau: float, p_exp: float = 0.0,
                        phi_prime: Optional[Callable] = None,
                        phi_prime2: Optional[Callable] = None) -> DiscreteOperator:
    """-Delta + Q_p with Q_p = 2 tau grad(phi_p).grad - tau^2 |grad phi_p|^2 + tau Lap(phi_p).

    On radial grids this is the half-line picture, where the conjugation
    absorbs the (d-1)/r first-order term and Lap(phi_p) reduces to phi_p''.
    Passing tau = 0 (or custom zero profiles) recovers the plain Laplacian.
    Not Hermitian: the first-order transport term is real and unsymmetrized.
    """
    from .weights import eval_phi_p_prime, eval_phi_p_prime2

    if phi_prime is None:
        phi_prime = lambda r: eval_phi_p_prime(r, p, tau, p_exp) if tau > 0 else np.zeros_like(r)
        phi_prime2 = lambda r: eval_phi_p_prime2(r, p, tau, p_exp) if tau > 0 else np.zeros_like(r)

    if grid.mode == "radial":
        base = assemble_radial_sector(0, 3, None, grid).matrix  # plain -d^2/dr^2
        r = grid.axis_coords()
        fp = np.asarray(phi_prime(r), dtype=float)
        fpp = np.asarray(phi_prime2(r), dtype=float)
        C = _centered_difference_radial(grid)
        M = base + 2.0 * tau * (_diag(fp) @ C) + _diag(-tau**2 * fp**2 + tau * fpp)
    else:
        base = free_laplacian(grid)
        pts = grid.points()
        r = grid.radii()
        rs = np.maximum(r, 1e-12)
        fp = np.asarray(phi_prime(r), dtype=float)
        fpp = np.asarray(phi_prime2(r), dtype=float)
        M = base.astype(complex)
        if pts.ndim == 1:
            pts = pts[:, None]
        for axis in range(grid.d):
            direction = pts[:, axis] / rs
            C = _centered_difference(grid, axis)
            M = M + 2.0 * tau * (_diag(fp * direction) @ C)
        lap_phi = fpp + (grid.d - 1) / rs * fp
        M = M + _diag(-tau**2 * fp**2 + tau * lap_phi)
    op = DiscreteOperator(M.tocsr(), grid, "P_conjugated", grid.d_eff, is_hermitian=(tau == 0.0))
    op.meta.update(tau=tau, p_exp=p_exp)
    return op


def _centered_difference_radial(grid: Grid) -> sp.csr_matrix:
    """Centered d/dr on the staggered radial grid with odd-reflection ghosts."""
    n, h = grid.n, grid.h
    rows, cols, vals = [], [], []
    inv = 1.0 / (2.0 * h)
    for k in range(n):
        if k + 1 < n:
            rows.append(k); cols.append(k + 1); vals.append(inv)
        else:
            rows.append(k); cols.append(k); vals.append(-inv)  # ghost = -u_n
        if k - 1 >= 0:
            rows.append(k); cols.append(k - 1); vals.append(-inv)
        else:
            rows.append(k); cols.append(k); vals.append(inv)   # ghost = -u_1
    # merge duplicate (k, k) entries by construction of coo -> csr
    return sp.csr_matrix((vals, (rows, cols)), shape=(n, n), dtype=complex)


# ---------------------------------------------------------------------------
# Semiclassical Sobolev norms
# ---------------------------------------------------------------------------

class SemiclassicalNorm:
    """H^{+1}_h and H^{-1}_h norms built on the grid's free Dirichlet Laplacian.

    ||f||_{H^1_h}^2 = ||f||^2 + h^2 ||grad f||^2 = <(1 + h^2 K) f, f>, and the
    dual norm is realized by a symmetric solve with the same matrix, matching
    ||f||_{H^s_h} ~ ||(1 - h^2 Delta)^{s/2} f||.
    """

    def __init__(self, grid: Grid, restrict_exterior: bool = False):
        self.grid = grid
        self.K = free_laplacian(grid, restrict_exterior=restrict_exterior).real
        self._solvers: dict[float, object] = {}

    def _solver(self, h_semi: float):
        key = round(float(h_semi), 14)
        if key not in self._solvers:
            import scipy.sparse.linalg as spla
            A = (sp.identity(self.K.shape[0]) + h_semi**2 * self.K).astype(complex).tocsc()
            self._solvers[key] = spla.splu(A)
        return self._solvers[key]

    def norm(self, f: np.ndarray, h_semi: float, order: int) -> float:
        f = np.asarray(f, dtype=complex)
        if order == 1:
            quad = np.real(np.vdot(f, f)) + h_semi**2 * np.real(np.vdot(f, self.K @ f))
            return float(np.sqrt(max(quad, 0.0)))
        if order == -1:
            u = self._solver(h_semi).solve(f)
            return float(np.sqrt(max(np.real(np.vdot(f, u)), 0.0)))
        raise ConstraintViolation("order must be +1 or -1")

    def apply_sqrt(self, f: np.ndarray, h_semi: float, power: int) -> np.ndarray:
        """Apply (1 + h^2 K)^{power/2}, power in {-1, +1}, via tridiagonal eigenbasis.

        Only available for one-dimensional grids (used by the Lemma 2.3
        operator-norm experiments); dense grids go through `norm` instead.
        """
        lam, vecs = self._eig_1d()
        w = (1.0 + h_semi**2 * lam) ** (0.5 * power)
        return vecs @ (w * (vecs.T @ f))

    def _eig_1d(self):
        if not hasattr(self, "_eig_cache"):
            if self.grid.d != 1:
                raise SizeExceeded("apply_sqrt supports 1D grids only")
            from scipy.linalg import eigh_tridiagonal
            Kd = self.K.toarray()
            lam, vecs = eigh_tridiagonal(np.real(np.diag(Kd)),
                                         np.real(np.diag(Kd, 1)))
            self._eig_cache = (lam, vecs)
        return self._eig_cache


def sobolev_norm(grid: Grid, f: np.ndarray, h_semi: float, order: int,
                 _cache={}) -> float:
    """Module-level convenience wrapper with a per-grid norm cache."""
    key = id(grid)
    if key not in _cache:
        _cache[key] = SemiclassicalNorm(grid)
    return _cache[key].norm(f, h_semi, order)
