"""Design-domain mapping of curved quad patches to the unit square, grid
resampling between the two, and Helmholtz smoothing of pixel fields.

Boundary layout of the parameter square::

    Γ2: v = 1  (u from 0 to 1)
    Γ1: u = 0  (v from 0 to 1)       Γ3: u = 1  (v from 0 to 1)
    Γ4: v = 0  (u from 0 to 1)

Each boundary polyline is parameterized by normalized arc length starting
at its corner on Γ4 (for Γ1, Γ3) or on Γ1 (for Γ2, Γ4).
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator, RegularGridInterpolator


class MappingError(ValueError):
    pass


@dataclass
class SurfacePatchMesh:
    """Quad mesh of a surface patch with its four boundary polylines.

    ``boundaries[k]`` lists node indices of Γ(k+1) in parameter order.
    """

    nodes: np.ndarray
    quads: np.ndarray
    boundaries: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        if self.nodes.ndim != 2 or self.nodes.shape[1] not in (2, 3):
            raise MappingError("nodes must be an (n, 2) or (n, 3) array")
        if self.nodes.shape[1] == 2:
            self.nodes = np.column_stack([self.nodes, np.zeros(len(self.nodes))])
        self.quads = np.asarray(self.quads, dtype=int).reshape(-1, 4)
        if self.quads.size and (self.quads.min() < 0 or self.quads.max() >= len(self.nodes)):
            raise MappingError("quad connectivity references missing nodes")
        if len(self.boundaries) != 4:
            raise MappingError("exactly four boundary polylines are required")
        self.boundaries = tuple(np.asarray(b, dtype=int) for b in self.boundaries)

    @property
    def triangles(self) -> np.ndarray:
        q = self.quads
        return np.vstack([q[:, [0, 1, 2]], q[:, [0, 2, 3]]])


def read_mesh(path: str | os.PathLike) -> SurfacePatchMesh:
    """Read the plain-text patch format.

    Layout (``#`` starts a comment)::

        n_nodes
        x y z          (n_nodes lines)
        n_quads
        a b c d        (n_quads lines, counterclockwise)
        Γ1 node indices on one line
        Γ2 ...
        Γ3 ...
        Γ4 ...
    """
    with open(path) as fh:
        lines = [ln.split("#", 1)[0].strip() for ln in fh]
    lines = [ln for ln in lines if ln]
    try:
        n = int(lines[0])
        nodes = np.array([[float(t) for t in ln.split()] for ln in lines[1:1 + n]])
        m = int(lines[1 + n])
        quads = np.array([[int(t) for t in ln.split()] for ln in lines[2 + n:2 + n + m]], dtype=int)
        bnd = [np.array([int(t) for t in ln.split()]) for ln in lines[2 + n + m:6 + n + m]]
    except (ValueError, IndexError) as exc:
        raise MappingError(f"malformed mesh file {path}: {exc}") from exc
    if len(bnd) != 4 or nodes.shape[0] != n or quads.shape != (m, 4):
        raise MappingError(f"malformed mesh file {path}")
    return SurfacePatchMesh(nodes, quads, tuple(bnd))


def write_mesh(path: str | os.PathLike, mesh: SurfacePatchMesh) -> None:
    with open(path, "w") as fh:
        fh.write(f"{len(mesh.nodes)}\n")
        for x in mesh.nodes:
            fh.write(" ".join(repr(float(c)) for c in x) + "\n")
        fh.write(f"{len(mesh.quads)}\n")
        for q in mesh.quads:
            fh.write(" ".join(str(int(i)) for i in q) + "\n")
        for b in mesh.boundaries:
            fh.write(" ".join(str(int(i)) for i in b) + "\n")


def grid_patch(nu: int, nv: int, surface=None) -> SurfacePatchMesh:
    """Structured patch over ``(s, t) ∈ [0,1]²`` mapped through ``surface(s, t) -> xyz``.

    With ``surface=None`` the patch is the flat unit square.
    """
    s, t = np.meshgrid(np.linspace(0, 1, nu + 1), np.linspace(0, 1, nv + 1))
    if surface is None:
        xyz = np.stack([s, t, np.zeros_like(s)], axis=-1)
    else:
        xyz = np.stack(surface(s, t), axis=-1)
    idx = np.arange((nu + 1) * (nv + 1)).reshape(nv + 1, nu + 1)
    quads = np.column_stack([idx[:-1, :-1].ravel(), idx[:-1, 1:].ravel(),
                             idx[1:, 1:].ravel(), idx[1:, :-1].ravel()])
    bnd = (idx[:, 0], idx[-1, :], idx[:, -1], idx[0, :])
    return SurfacePatchMesh(xyz.reshape(-1, 3), quads, bnd)


def quarter_cylinder(nu: int, nv: int, radius: float = 1.0, length: float = 1.0) -> SurfacePatchMesh:
    def surface(s, t):
        theta = 0.5 * np.pi * s
        return radius * np.cos(theta), radius * np.sin(theta), length * t
    return grid_patch(nu, nv, surface)


def cotangent_laplacian(nodes: np.ndarray, triangles: np.ndarray) -> sp.csr_matrix:
    """Stiffness matrix of linear elements on a triangulated surface.

    ``L = D - W`` with ``W_ij = (cot α_ij + cot β_ij) / 2``; the discrete
    Dirichlet energy of a nodal map ``u`` is ``u @ L @ u / 2``.
    """
    n = len(nodes)
    rows, cols, vals = [], [], []
    for k in range(3):
        i, j, o = triangles[:, (k + 1) % 3], triangles[:, (k + 2) % 3], triangles[:, k]
        a = nodes[i] - nodes[o]
        b = nodes[j] - nodes[o]
        cross = np.linalg.norm(np.cross(a, b), axis=1)
        if np.any(cross <= 0):
            raise MappingError("degenerate (zero-area) triangle in mesh")
        w = 0.5 * np.einsum("ij,ij->i", a, b) / cross
        rows += [i, j]
        cols += [j, i]
        vals += [-w, -w]
    off = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                        shape=(n, n)).tocsr()
    return (off - sp.diags(np.asarray(off.sum(axis=1)).ravel())).tocsr()


def _check_disk(mesh: SurfacePatchMesh) -> None:
    q = mesh.quads
    edges = np.sort(np.concatenate([q[:, [0, 1]], q[:, [1, 2]], q[:, [2, 3]], q[:, [3, 0]]]), axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    used = np.unique(q)
    if used.size != len(mesh.nodes):
        raise MappingError("mesh has nodes not referenced by any quad")
    if np.any(counts > 2):
        raise MappingError("non-manifold edge (shared by more than two quads)")
    euler = used.size - len(uniq) + len(q)
    if euler != 1:
        raise MappingError(f"mesh is not a topological disk (Euler characteristic {euler})")
    boundary_nodes = np.unique(uniq[counts == 1])
    listed = np.unique(np.concatenate(mesh.boundaries))
    if not np.array_equal(boundary_nodes, listed):
        raise MappingError("boundary polylines do not cover exactly the mesh boundary")


def _oriented_boundaries(mesh: SurfacePatchMesh):
    g1, g2, g3, g4 = (b.copy() for b in mesh.boundaries)
    # orient Γ4 and Γ2 to run from Γ1 to Γ3, and Γ1, Γ3 to run from Γ4 to Γ2
    if g4[0] not in (g1[0], g1[-1]):
        g4 = g4[::-1]
    if g1[0] != g4[0]:
        g1 = g1[::-1]
    if g2[0] != g1[-1]:
        g2 = g2[::-1]
    if g3[0] != g4[-1]:
        g3 = g3[::-1]
    if not (g1[0] == g4[0] and g1[-1] == g2[0] and g3[0] == g4[-1] and g3[-1] == g2[-1]):
        raise MappingError("boundary polylines do not meet at four shared corners")
    return g1, g2, g3, g4


def _arc_ratio(points: np.ndarray) -> np.ndarray:
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    total = seg.sum()
    if points.shape[0] < 2 or total <= 0:
        raise MappingError("degenerate boundary polyline of zero length")
    return np.concatenate([[0.0], np.cumsum(seg)]) / total


def boundary_uv(mesh: SurfacePatchMesh):
    """Dirichlet data: boundary node indices and their (u, v) targets."""
    g1, g2, g3, g4 = _oriented_boundaries(mesh)
    X = mesh.nodes
    t1, t2, t3, t4 = (_arc_ratio(X[g]) for g in (g1, g2, g3, g4))
    idx = np.concatenate([g1, g2, g3, g4])
    uv = np.concatenate([
        np.column_stack([np.zeros_like(t1), t1]),
        np.column_stack([t2, np.ones_like(t2)]),
        np.column_stack([np.ones_like(t3), t3]),
        np.column_stack([t4, np.zeros_like(t4)]),
    ])
    # corners appear twice with identical values; keep the first occurrence
    idx, first = np.unique(idx, return_index=True)
    return idx, uv[first]


def harmonic_map(mesh: SurfacePatchMesh) -> np.ndarray:
    """Nodal ``(u, v)`` minimizing the discrete Dirichlet energy with arc-length boundary data."""
    _check_disk(mesh)
    bidx, buv = boundary_uv(mesh)
    L = cotangent_laplacian(mesh.nodes, mesh.triangles)
    n = len(mesh.nodes)
    interior = np.setdiff1d(np.arange(n), bidx)
    uv = np.zeros((n, 2))
    uv[bidx] = buv
    if interior.size:
        A = L[interior][:, interior].tocsc()
        rhs = -L[interior][:, bidx] @ buv
        solve = spla.factorized(A)
        uv[interior, 0] = solve(rhs[:, 0])
        uv[interior, 1] = solve(rhs[:, 1])
    return uv


def dirichlet_energy(mesh: SurfacePatchMesh, uv: np.ndarray) -> float:
    L = cotangent_laplacian(mesh.nodes, mesh.triangles)
    return 0.5 * float(uv[:, 0] @ (L @ uv[:, 0]) + uv[:, 1] @ (L @ uv[:, 1]))


def grid_centers(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) / n


def _check_uv(uv: np.ndarray) -> np.ndarray:
    uv = np.asarray(uv, dtype=float)
    if np.any(uv < -1e-9) or np.any(uv > 1 + 1e-9):
        raise MappingError("uv coordinates outside the unit square")
    return np.clip(uv, 0.0, 1.0)


def resample_to_grid(values: np.ndarray, uv: np.ndarray, n: int = 64, clamp: bool = True) -> np.ndarray:
    """Interpolate nodal values at ``uv`` onto the ``(n, n)`` grid of cell centres.

    Row ``j`` of the result corresponds to ``v = (j + 0.5) / n``.
    """
    uv = _check_uv(uv)
    values = np.asarray(values, dtype=float)
    c = grid_centers(n)
    U, V = np.meshgrid(c, c)
    out = LinearNDInterpolator(uv, values)(U, V)
    missing = np.isnan(out)
    if missing.any():
        out[missing] = NearestNDInterpolator(uv, values)(U[missing], V[missing])
    return np.clip(out, 0.0, 1.0) if clamp else out


def resample_from_grid(grid: np.ndarray, uv: np.ndarray, clamp: bool = True) -> np.ndarray:
    """Bilinear interpolation of a cell-centred grid at nodal ``uv`` positions."""
    uv = _check_uv(uv)
    grid = np.asarray(grid, dtype=float)
    ny, nx = grid.shape
    interp = RegularGridInterpolator((grid_centers(ny), grid_centers(nx)), grid,
                                     bounds_error=False, fill_value=None)
    out = interp(uv[:, ::-1])
    return np.clip(out, 0.0, 1.0) if clamp else out


def neumann_laplacian(ny: int, nx: int, dx: float | None = None, dy: float | None = None) -> sp.csr_matrix:
    """Positive semidefinite 5-point Laplacian with zero-flux boundaries, cell-centred."""
    dx = 1.0 / nx if dx is None else dx
    dy = 1.0 / ny if dy is None else dy

    def one_d(n, h):
        main = np.full(n, 2.0)
        if n > 1:
            main[[0, -1]] = 1.0
        else:
            main[0] = 0.0
        return sp.diags([main, -np.ones(n - 1), -np.ones(n - 1)], [0, -1, 1]) / h**2

    return (sp.kron(sp.identity(ny), one_d(nx, dx)) + sp.kron(one_d(ny, dy), sp.identity(nx))).tocsr()


def helmholtz_smooth(field: np.ndarray, r: float, clamp: bool = True) -> np.ndarray:
    """Solve ``-r² ∇²g + g = field`` on the unit-square grid with zero-flux boundaries."""
    if r < 0:
        raise ValueError("smoothing radius must be nonnegative")
    field = np.asarray(field, dtype=float)
    if r == 0:
        return field.copy()
    ny, nx = field.shape
    A = (sp.identity(nx * ny) + r**2 * neumann_laplacian(ny, nx)).tocsc()
    out = spla.spsolve(A, field.ravel()).reshape(ny, nx)
    # the discrete operator obeys a maximum principle; clipping only removes round-off
    return np.clip(out, field.min(), field.max()) if clamp else out
