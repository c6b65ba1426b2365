"""Plane-stress bilinear quadrilateral finite elements on a structured grid.

Node ``n = j * (nx + 1) + i`` sits at ``(i * dx, j * dy)``; element
``e = j * nx + i`` spans nodes ``(i, j), (i+1, j), (i+1, j+1), (i, j+1)``
(counterclockwise). Density-like element arrays are stored with shape
``(ny, nx)`` where row ``j`` is the ``j``-th row from the bottom.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

POISSON = 0.3
_GAUSS = np.array([-1.0, 1.0]) / np.sqrt(3.0)
# element-local node coordinates in the reference square
_XI = np.array([-1.0, 1.0, 1.0, -1.0])
_ETA = np.array([-1.0, -1.0, 1.0, 1.0])


class FemError(RuntimeError):
    """Base class for solver failures."""


class SingularSystemError(FemError):
    """Raised when the fixed DOFs leave a rigid-body mode unconstrained."""

    def __init__(self, mode: str):
        super().__init__(f"stiffness matrix is singular after constraints: "
                         f"unconstrained rigid-body mode '{mode}'")
        self.mode = mode


class ConvergenceError(FemError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (relative residual {residual:.3e})")
        self.residual = residual


@dataclass(frozen=True)
class QuadMesh:
    nx: int
    ny: int
    lx: float = 1.0
    ly: float = 1.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError(f"mesh needs nx, ny >= 1, got {self.nx}x{self.ny}")
        if self.lx <= 0 or self.ly <= 0:
            raise ValueError("mesh extents must be positive")

    @property
    def dx(self) -> float:
        return self.lx / self.nx

    @property
    def dy(self) -> float:
        return self.ly / self.ny

    @property
    def n_nodes(self) -> int:
        return (self.nx + 1) * (self.ny + 1)

    @property
    def n_dofs(self) -> int:
        return 2 * self.n_nodes

    @property
    def n_elements(self) -> int:
        return self.nx * self.ny

    @property
    def element_area(self) -> float:
        return self.dx * self.dy

    @cached_property
    def nodes(self) -> np.ndarray:
        """Node coordinates, shape ``(n_nodes, 2)``."""
        j, i = np.divmod(np.arange(self.n_nodes), self.nx + 1)
        return np.column_stack([i * self.dx, j * self.dy])

    @cached_property
    def connectivity(self) -> np.ndarray:
        """Element to node map, shape ``(n_elements, 4)``, counterclockwise."""
        j, i = np.divmod(np.arange(self.n_elements), self.nx)
        n0 = j * (self.nx + 1) + i
        return np.column_stack([n0, n0 + 1, n0 + self.nx + 2, n0 + self.nx + 1])

    @cached_property
    def edofs(self) -> np.ndarray:
        """Element DOF map, shape ``(n_elements, 8)``: ``[u0, v0, u1, v1, ...]``."""
        c = self.connectivity
        return np.stack([2 * c, 2 * c + 1], axis=2).reshape(-1, 8)

    @cached_property
    def centroids(self) -> np.ndarray:
        j, i = np.divmod(np.arange(self.n_elements), self.nx)
        return np.column_stack([(i + 0.5) * self.dx, (j + 0.5) * self.dy])

    def node_index(self, i, j):
        return np.asarray(j) * (self.nx + 1) + np.asarray(i)


def elasticity_matrix(modulus: float = 1.0, nu: float = POISSON) -> np.ndarray:
    """Plane-stress constitutive matrix acting on ``[exx, eyy, gxy]``."""
    return modulus / (1.0 - nu**2) * np.array([[1.0, nu, 0.0],
                                               [nu, 1.0, 0.0],
                                               [0.0, 0.0, (1.0 - nu) / 2.0]])


def strain_displacement(xi: float, eta: float, dx: float, dy: float) -> np.ndarray:
    """B matrix (3x8) of the rectangular bilinear element at ``(xi, eta)``."""
    dn_dxi = 0.25 * _XI * (1.0 + eta * _ETA)
    dn_deta = 0.25 * _ETA * (1.0 + xi * _XI)
    dn_dx = dn_dxi * 2.0 / dx
    dn_dy = dn_deta * 2.0 / dy
    B = np.zeros((3, 8))
    B[0, 0::2] = dn_dx
    B[1, 1::2] = dn_dy
    B[2, 0::2] = dn_dy
    B[2, 1::2] = dn_dx
    return B


def element_stiffness(dx: float = 1.0, dy: float = 1.0, nu: float = POISSON) -> np.ndarray:
    """Unit-modulus, unit-thickness element matrix by 2x2 Gauss quadrature."""
    D = elasticity_matrix(1.0, nu)
    detj = dx * dy / 4.0
    ke = np.zeros((8, 8))
    for xi in _GAUSS:
        for eta in _GAUSS:
            B = strain_displacement(xi, eta, dx, dy)
            ke += B.T @ D @ B * detj
    return 0.5 * (ke + ke.T)


@dataclass(frozen=True, eq=False)
class FemProblem:
    mesh: QuadMesh
    modulus: np.ndarray
    thickness: np.ndarray
    load: np.ndarray
    fixed_dofs: np.ndarray
    nu: float = POISSON

    def __post_init__(self):
        n = self.mesh.n_elements
        for name in ("modulus", "thickness"):
            arr = np.asarray(getattr(self, name), dtype=float).ravel()
            if arr.shape != (n,):
                raise ValueError(f"{name} must have {n} entries, got {arr.size}")
            if not np.all(arr > 0):
                raise ValueError(f"{name} must be strictly positive")
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        load = np.asarray(self.load, dtype=float).ravel()
        if load.shape != (self.mesh.n_dofs,):
            raise ValueError("load vector length must equal the DOF count")
        fixed = np.unique(np.asarray(self.fixed_dofs, dtype=np.int64))
        if fixed.size == 0:
            raise SingularSystemError("translation-x")
        load.flags.writeable = False
        fixed.flags.writeable = False
        object.__setattr__(self, "load", load)
        object.__setattr__(self, "fixed_dofs", fixed)

    @property
    def free_dofs(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.mesh.n_dofs), self.fixed_dofs)


@dataclass(frozen=True, eq=False)
class FemSolution:
    displacement: np.ndarray
    von_mises: np.ndarray
    compliance: float
    residual: float = field(default=0.0)


def check_constraints(mesh: QuadMesh, fixed_dofs) -> None:
    """Raise :class:`SingularSystemError` if a rigid-body mode is left free."""
    fixed = np.asarray(fixed_dofs, dtype=np.int64)
    xy = mesh.nodes
    rigid = np.zeros((mesh.n_dofs, 3))
    rigid[0::2, 0] = 1.0
    rigid[1::2, 1] = 1.0
    rigid[0::2, 2] = -(xy[:, 1] - xy[:, 1].mean())
    rigid[1::2, 2] = xy[:, 0] - xy[:, 0].mean()
    restricted = rigid[fixed]
    if restricted.size:
        _, s, vt = np.linalg.svd(restricted, full_matrices=True)
        s = np.concatenate([s, np.zeros(3 - s.size)])
        scale = max(np.linalg.norm(rigid[:, 2]), 1.0)
        null = vt[s <= 1e-12 * scale]
        if null.shape[0] == 0:
            return
    else:
        null = np.eye(3)
    # report a pure translation when one lies in the null space, else a rotation
    for k, name in enumerate(("translation-x", "translation-y")):
        if np.linalg.norm(null[:, k]) > 1.0 - 1e-8:
            raise SingularSystemError(name)
    raise SingularSystemError("rotation")


def assemble_stiffness(problem: FemProblem) -> sp.csr_matrix:
    """Global stiffness ``K = sum_e E_e t_e K_e`` as a CSR matrix."""
    mesh = problem.mesh
    check_constraints(mesh, problem.fixed_dofs)
    ke = element_stiffness(mesh.dx, mesh.dy, problem.nu)
    scale = problem.modulus * problem.thickness
    edofs = mesh.edofs
    rows = np.repeat(edofs, 8, axis=1).ravel()
    cols = np.tile(edofs, (1, 8)).ravel()
    vals = (scale[:, None, None] * ke[None]).ravel()
    K = sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n_dofs, mesh.n_dofs)).tocsr()
    # duplicate summation order is unspecified; averaging with the transpose is exact
    return ((K + K.T) * 0.5).tocsr()


class _BandedCholesky:
    def __init__(self, A: sp.spmatrix):
        A = sp.csr_matrix(A)
        coo = sp.triu(A).tocoo()
        n = A.shape[0]
        bw = int(np.max(coo.col - coo.row)) if coo.nnz else 0
        ab = np.zeros((bw + 1, n))
        ab[bw + coo.row - coo.col, coo.col] = coo.data
        try:
            self._cb = scipy.linalg.cholesky_banded(ab, lower=False)
        except np.linalg.LinAlgError as exc:
            raise FemError(f"Cholesky factorization failed: {exc}") from exc

    def __call__(self, b: np.ndarray) -> np.ndarray:
        return scipy.linalg.cho_solve_banded((self._cb, False), b)


class _JacobiCG:
    def __init__(self, A: sp.spmatrix, tol: float):
        self.A = sp.csr_matrix(A)
        self.tol = tol
        diag = self.A.diagonal()
        if np.any(diag <= 0):
            raise FemError("non-positive diagonal entry; matrix is not SPD")
        self.M = sp.diags(1.0 / diag)

    def __call__(self, b: np.ndarray) -> np.ndarray:
        x, info = spla.cg(self.A, b, rtol=self.tol * 1e-2, atol=0.0,
                          maxiter=20 * self.A.shape[0], M=self.M)
        if info != 0:
            res = np.linalg.norm(self.A @ x - b) / max(np.linalg.norm(b), 1e-300)
            raise ConvergenceError("conjugate gradient did not converge", res)
        return x


class StaticSolver:
    """Factorization of ``K_ff`` reusable for several right-hand sides.

    ``method`` is ``"cholesky"`` (banded LAPACK), ``"cg"`` (Jacobi
    preconditioned) or ``"auto"`` which picks Cholesky below ``max_direct``
    free DOFs.
    """

    def __init__(self, K, fixed_dofs, method: str = "auto", tol: float = 1e-9,
                 max_direct: int = 70_000):
        K = sp.csr_matrix(K)
        n = K.shape[0]
        self.n = n
        self.tol = tol
        self.fixed = np.unique(np.asarray(fixed_dofs, dtype=np.int64))
        self.free = np.setdiff1d(np.arange(n), self.fixed)
        self.Kff = K[self.free][:, self.free]
        if method == "auto":
            method = "cholesky" if self.free.size <= max_direct else "cg"
        if method == "cholesky":
            self._solve = _BandedCholesky(self.Kff)
        elif method == "cg":
            self._solve = _JacobiCG(self.Kff, tol)
        else:
            raise ValueError(f"unknown solver method {method!r}")
        self.method = method

    def solve(self, F: np.ndarray) -> np.ndarray:
        F = np.asarray(F, dtype=float)
        U = np.zeros(self.n)
        Ff = F[self.free]
        norm = np.linalg.norm(Ff)
        if norm == 0.0:
            return U
        Uf = self._solve(Ff)
        res = np.linalg.norm(self.Kff @ Uf - Ff) / norm
        if not np.isfinite(res) or res > self.tol:
            raise ConvergenceError("linear solve failed residual check", res)
        U[self.free] = Uf
        return U


def solve_static(K, F, fixed_dofs, method: str = "auto") -> np.ndarray:
    """Solve ``K U = F`` with ``U = 0`` on ``fixed_dofs``."""
    return StaticSolver(K, fixed_dofs, method=method).solve(F)


def element_stress(U: np.ndarray, mesh: QuadMesh, modulus, nu: float = POISSON) -> np.ndarray:
    """Centroid stresses ``[sxx, syy, sxy]`` per element, shape ``(N, 3)``."""
    B0 = strain_displacement(0.0, 0.0, mesh.dx, mesh.dy)
    strain = U[mesh.edofs] @ B0.T
    D = elasticity_matrix(1.0, nu)
    return np.asarray(modulus, dtype=float).reshape(-1, 1) * (strain @ D.T)


def von_mises_from_stress(stress: np.ndarray) -> np.ndarray:
    sx, sy, txy = stress[..., 0], stress[..., 1], stress[..., 2]
    return np.sqrt(np.maximum(sx**2 - sx * sy + sy**2 + 3.0 * txy**2, 0.0))


def von_mises(U: np.ndarray, problem: FemProblem) -> np.ndarray:
    return von_mises_from_stress(element_stress(U, problem.mesh, problem.modulus, problem.nu))


def element_von_mises(U: np.ndarray, problem: FemProblem, e: int) -> float:
    B0 = strain_displacement(0.0, 0.0, problem.mesh.dx, problem.mesh.dy)
    stress = problem.modulus[e] * elasticity_matrix(1.0, problem.nu) @ B0 @ U[problem.mesh.edofs[e]]
    return float(von_mises_from_stress(stress))


def compliance(U: np.ndarray, K) -> float:
    return float(U @ (K @ U))


def solve(problem: FemProblem, method: str = "auto") -> FemSolution:
    K = assemble_stiffness(problem)
    solver = StaticSolver(K, problem.fixed_dofs, method=method)
    U = solver.solve(problem.load)
    return FemSolution(displacement=U, von_mises=von_mises(U, problem),
                       compliance=compliance(U, K))


def cantilever_bc(mesh: QuadMesh, load_fraction: float = 0.1, total_load: float = 1.0):
    """Left edge clamped, downward edge load on the lower part of the right edge.

    The load acts on the bottom ``max(1, round(load_fraction * ny))`` element
    edges of the right boundary with consistent (trapezoidal) nodal weights.
    Returns ``(F, fixed_dofs)``.
    """
    left = mesh.node_index(0, np.arange(mesh.ny + 1))
    fixed = np.sort(np.concatenate([2 * left, 2 * left + 1]))
    n_edges = max(1, int(round(load_fraction * mesh.ny)))
    n_edges = min(n_edges, mesh.ny)
    weights = np.zeros(n_edges + 1)
    weights[:-1] += 0.5
    weights[1:] += 0.5
    weights *= total_load / n_edges
    nodes = mesh.node_index(mesh.nx, np.arange(n_edges + 1))
    F = np.zeros(mesh.n_dofs)
    F[2 * nodes + 1] = -weights
    return F, fixed
