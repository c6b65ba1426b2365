"""Low-fidelity SIMP topology optimization.

Design variables are raw element densities ``x``; the physical density is
``xphys = project(filter(x))``. Objectives are compliance or the relaxed
p-norm von Mises stress, subject to a volume bound on ``xphys`` and an
optional similarity bound against a reference design (used for mutation).
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np
import scipy.sparse as sp

from . import fem
from .mma import MmaState, mma_update

log = logging.getLogger(__name__)

Objective = Literal["compliance", "pnorm_stress"]


class OptimizationError(RuntimeError):
    def __init__(self, message: str, state: dict | None = None):
        super().__init__(message)
        self.state = state or {}


@dataclass
class LfConfig:
    objective: Objective = "compliance"
    volume_fraction: float = 0.5
    nx: int = 64
    ny: int = 64
    filter_radius: float = 0.03
    beta: float = 4.0
    eta: float = 0.5
    penal: float = 3.0
    q: float = 0.5
    p_schedule: Sequence[tuple[int, float]] = ((0, 8.0), (30, 16.0), (60, 32.0), (90, 64.0))
    move: float = 0.05
    max_iter: int | None = None
    E0: float = 1.0
    Emin: float = 1e-9
    nu: float = fem.POISSON
    load_fraction: float = 0.1
    reference: np.ndarray | None = None
    g_mut_max: float = 0.5

    def __post_init__(self):
        if self.objective not in ("compliance", "pnorm_stress"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if not 0.0 < self.volume_fraction < 1.0:
            raise ValueError("volume_fraction must lie in (0, 1)")
        if self.beta <= 0 or not 0.0 < self.eta < 1.0:
            raise ValueError("projection needs beta > 0 and 0 < eta < 1")
        if self.penal < 1.0:
            raise ValueError("SIMP penalty must be >= 1")
        if not 0.0 < self.move <= 1.0:
            raise ValueError("move limit must lie in (0, 1]")
        if not 0.0 < self.q <= 1.0:
            raise ValueError("stress relaxation exponent must lie in (0, 1]")
        if self.max_iter is None:
            self.max_iter = 50 if self.objective == "compliance" else 100

    @property
    def mesh(self) -> fem.QuadMesh:
        return fem.QuadMesh(self.nx, self.ny)

    def pnorm_at(self, iteration: int) -> float:
        P = self.p_schedule[0][1]
        for start, value in self.p_schedule:
            if iteration >= start:
                P = value
        return P


class DensityFilter:
    """Linear hat-weight density filter on element centroids."""

    def __init__(self, mesh: fem.QuadMesh, radius: float):
        if radius <= 0:
            raise ValueError("filter radius must be positive")
        h = min(mesh.dx, mesh.dy)
        if radius < 0.5 * h:
            warnings.warn(f"filter radius {radius} is below half an element width; "
                          "the filter reduces to the identity", RuntimeWarning, stacklevel=2)
        self.shape = (mesh.ny, mesh.nx)
        reach_x = int(np.ceil(radius / mesh.dx))
        reach_y = int(np.ceil(radius / mesh.dy))
        jj, ii = np.divmod(np.arange(mesh.n_elements), mesh.nx)
        rows, cols, vals = [], [], []
        for dj in range(-reach_y, reach_y + 1):
            for di in range(-reach_x, reach_x + 1):
                w = radius - np.hypot(di * mesh.dx, dj * mesh.dy)
                if w <= 0:
                    continue
                i2, j2 = ii + di, jj + dj
                ok = (i2 >= 0) & (i2 < mesh.nx) & (j2 >= 0) & (j2 < mesh.ny)
                rows.append(np.flatnonzero(ok))
                cols.append(j2[ok] * mesh.nx + i2[ok])
                vals.append(np.full(ok.sum(), w))
        H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(mesh.n_elements, mesh.n_elements)).tocsr()
        hs = np.asarray(H.sum(axis=1)).ravel()
        self.matrix = sp.diags(1.0 / hs) @ H

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return (self.matrix @ np.asarray(x).ravel()).reshape(np.shape(x))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return (self.matrix.T @ np.asarray(grad).ravel()).reshape(np.shape(grad))


def density_filter(density: np.ndarray, radius: float, mesh: fem.QuadMesh | None = None) -> np.ndarray:
    density = np.asarray(density, dtype=float)
    if mesh is None:
        ny, nx = density.shape
        mesh = fem.QuadMesh(nx, ny)
    return DensityFilter(mesh, radius)(density)


def heaviside_project(x: np.ndarray, beta: float, eta: float) -> np.ndarray:
    num = np.tanh(beta * (x - eta)) + np.tanh(beta * eta)
    den = np.tanh(beta * (1.0 - eta)) + np.tanh(beta * eta)
    return num / den


def heaviside_derivative(x: np.ndarray, beta: float, eta: float) -> np.ndarray:
    den = np.tanh(beta * (1.0 - eta)) + np.tanh(beta * eta)
    return beta * (1.0 - np.tanh(beta * (x - eta)) ** 2) / den


class SimpModel:
    """Discretization, loads and design mappings shared across iterations."""

    def __init__(self, config: LfConfig):
        self.config = config
        self.mesh = config.mesh
        self.filter = DensityFilter(self.mesh, config.filter_radius)
        self.load, self.fixed = fem.cantilever_bc(self.mesh, config.load_fraction)
        self.ke = fem.element_stiffness(self.mesh.dx, self.mesh.dy, config.nu)
        self.B0 = fem.strain_displacement(0.0, 0.0, self.mesh.dx, self.mesh.dy)
        self.D = fem.elasticity_matrix(config.E0, config.nu)
        self.volumes = np.full(self.mesh.n_elements, self.mesh.element_area)

    def physical(self, x: np.ndarray) -> np.ndarray:
        c = self.config
        return heaviside_project(self.filter(x.ravel()), c.beta, c.eta)

    def chain(self, x: np.ndarray, grad_phys: np.ndarray) -> np.ndarray:
        """Map a gradient w.r.t. the physical density back to ``x``."""
        c = self.config
        xf = self.filter(x.ravel())
        return self.filter.backward(grad_phys * heaviside_derivative(xf, c.beta, c.eta))

    def modulus(self, xphys: np.ndarray) -> np.ndarray:
        c = self.config
        return c.Emin + xphys**c.penal * (c.E0 - c.Emin)

    def analyze(self, xphys: np.ndarray, load: np.ndarray | None = None):
        problem = fem.FemProblem(self.mesh, self.modulus(xphys), np.ones(self.mesh.n_elements),
                                 self.load if load is None else load, self.fixed, self.config.nu)
        K = fem.assemble_stiffness(problem)
        solver = fem.StaticSolver(K, problem.fixed_dofs)
        return problem, K, solver

    def volume(self, xphys: np.ndarray) -> float:
        return float(self.volumes @ xphys / self.volumes.sum())


def compliance_value_and_sensitivity(x: np.ndarray, model: SimpModel, load: np.ndarray | None = None):
    """Compliance ``U^T K U`` and its gradient w.r.t. the raw design ``x``."""
    c = model.config
    xphys = model.physical(x)
    _, K, solver = model.analyze(xphys, load)
    U = solver.solve(model.load if load is None else load)
    ue = U[model.mesh.edofs]
    energy = np.einsum("ei,ij,ej->e", ue, model.ke, ue)
    W = fem.compliance(U, K)
    dW_phys = -c.penal * xphys ** (c.penal - 1.0) * (c.E0 - c.Emin) * energy
    return W, model.chain(x, dW_phys).reshape(np.shape(x))


def pnorm(values: np.ndarray, P: float) -> float:
    values = np.asarray(values, dtype=float).ravel()
    vmax = values.max(initial=0.0)
    if vmax == 0.0:
        return 0.0
    return float(vmax * np.mean((values / vmax) ** P) ** (1.0 / P))


def relaxed_stress(x: np.ndarray, model: SimpModel):
    """Relaxed element stresses ``xphys^q * sigma_vm`` and the solve products."""
    xphys = model.physical(x)
    problem, K, solver = model.analyze(xphys)
    U = solver.solve(model.load)
    stress = fem.element_stress(U, model.mesh, model.config.E0, model.config.nu)
    vm = fem.von_mises_from_stress(stress)
    return xphys**model.config.q * vm, dict(xphys=xphys, K=K, solver=solver, U=U,
                                           stress=stress, vm=vm)


def pnorm_stress_value_and_sensitivity(x: np.ndarray, model: SimpModel, P: float):
    """p-norm of relaxed von Mises stress and its adjoint gradient w.r.t. ``x``."""
    c = model.config
    relaxed, st = relaxed_stress(x, model)
    xphys, vm, stress, U = st["xphys"], st["vm"], st["stress"], st["U"]
    n = relaxed.size
    value = pnorm(relaxed, P)
    if value == 0.0:
        return 0.0, np.zeros(np.shape(x))
    # d value / d relaxed_e = (relaxed_e / value)^(P-1) / N
    w = (relaxed / value) ** (P - 1.0) / n

    # explicit term through the relaxation factor, written to stay finite at xphys = 0
    explicit = np.zeros(n)
    pos = xphys > 0
    explicit[pos] = w[pos] * c.q * xphys[pos] ** (c.q - 1.0) * vm[pos]

    # adjoint load: d value / dU
    safe = np.where(vm > 0, vm, 1.0)
    sx, sy, txy = stress[:, 0], stress[:, 1], stress[:, 2]
    dvm_dstress = np.column_stack([2 * sx - sy, 2 * sy - sx, 6 * txy]) / (2 * safe[:, None])
    dvm_dstress[vm == 0] = 0.0
    coef = (w * xphys**c.q)[:, None] * dvm_dstress
    due = coef @ (model.D @ model.B0)
    adj_load = np.zeros(model.mesh.n_dofs)
    np.add.at(adj_load, model.mesh.edofs, due)
    adj = st["solver"].solve(adj_load)

    ue = U[model.mesh.edofs]
    le = adj[model.mesh.edofs]
    dE = c.penal * xphys ** (c.penal - 1.0) * (c.E0 - c.Emin)
    implicit = -dE * np.einsum("ei,ij,ej->e", le, model.ke, ue)
    return value, model.chain(x, explicit + implicit).reshape(np.shape(x))


def mutation_constraint_value_and_sensitivity(density, reference, volumes=None):
    """Similarity ``sum_e (1 - |x_e - ref_e|) v_e`` and its subgradient.

    At ``x_e == ref_e`` the subgradient ``-v_e`` is used.
    """
    density = np.asarray(density, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if density.shape != reference.shape:
        raise ValueError(f"shape mismatch: {density.shape} vs {reference.shape}")
    v = np.ones(density.shape) if volumes is None else np.asarray(volumes).reshape(density.shape)
    diff = density - reference
    value = float(np.sum((1.0 - np.abs(diff)) * v))
    grad = np.where(diff < 0, v, -v)
    return value, grad


def mutation_satisfied(density, reference, g_mut_max, tol=0.0) -> bool:
    value, _ = mutation_constraint_value_and_sensitivity(density, reference)
    return value <= g_mut_max * np.size(density) * (1.0 + tol) + tol * np.size(density)


@dataclass
class LfResult:
    density: np.ndarray
    design: np.ndarray
    history: list[dict] = field(default_factory=list)
    objective: float = np.nan
    volume: float = np.nan

    def monotone_after(self, rtol: float = 1e-6) -> int:
        """First iteration after which the objective never rises by more than ``rtol``."""
        obj = np.array([h["objective"] for h in self.history])
        if obj.size < 2:
            return 0
        up = np.flatnonzero(np.diff(obj) > rtol * np.abs(obj[:-1]))
        return 0 if up.size == 0 else int(up[-1] + 1)

    def write_history(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "objective", "volume", "constraint"])
            for h in self.history:
                writer.writerow([h["iteration"], repr(h["objective"]), repr(h["volume"]),
                                 repr(h["constraint"])])


def _objective(model: SimpModel, x: np.ndarray, it: int):
    if model.config.objective == "compliance":
        return compliance_value_and_sensitivity(x, model)
    return pnorm_stress_value_and_sensitivity(x, model, model.config.pnorm_at(it))


def run_lf_optimization(config: LfConfig, seed: int = 0, model: SimpModel | None = None) -> LfResult:
    """Solve the volume-constrained LF problem with MMA from a uniform start.

    The run is deterministic; ``seed`` is accepted for interface symmetry
    with the sampling stages and is recorded in the log only.
    """
    model = model or SimpModel(config)
    mesh = model.mesh
    n = mesh.n_elements
    x = np.full(n, config.volume_fraction)
    ref = None if config.reference is None else np.asarray(config.reference, dtype=float).ravel()
    vol_total = model.volumes.sum()
    m = 1 if ref is None else 2
    state = MmaState(n, m)
    history = []
    scale = None
    log.debug("LF run seed=%s objective=%s vmax=%.3f", seed, config.objective, config.volume_fraction)

    for it in range(config.max_iter + 1):
        xphys = model.physical(x)
        f, df = _objective(model, x, it)
        if not np.isfinite(f) or not np.all(np.isfinite(df)):
            raise OptimizationError(f"non-finite objective at iteration {it}",
                                    dict(iteration=it, design=x.copy(), objective=f))
        if config.objective == "pnorm_stress" and it > 0 and config.pnorm_at(it) != config.pnorm_at(it - 1):
            scale = None
        if scale is None:
            scale = 1.0 / max(abs(f), 1e-30)

        vol = model.volume(xphys)
        g = [vol / config.volume_fraction - 1.0]
        dg = [model.chain(x, model.volumes / vol_total / config.volume_fraction)]
        cons = np.nan
        if ref is not None:
            sim, dsim = mutation_constraint_value_and_sensitivity(xphys, ref, model.volumes)
            bound = config.g_mut_max * vol_total
            g.append(sim / bound - 1.0)
            dg.append(model.chain(x, dsim / bound))
            cons = sim / vol_total
        history.append(dict(iteration=it, objective=float(f), volume=vol, constraint=cons))
        if it == config.max_iter:
            break
        x = mma_update(state, x, scale * df.ravel(), np.array(g), np.vstack(dg), config.move)

    xphys = model.physical(x)
    return LfResult(density=xphys.reshape(mesh.ny, mesh.nx), design=x.reshape(mesh.ny, mesh.nx),
                    history=history, objective=history[-1]["objective"], volume=model.volume(xphys))
