"""High-fidelity evaluation of binarized designs with a thickness parameter.

Solid elements carry the reinforcement thickness ``h``; void elements keep a
thin skin of thickness ``t_skin`` so every design yields a nonsingular model.
Objectives are evaluated exactly, without relaxation or aggregation.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Literal, Sequence

import numpy as np
from scipy import ndimage

from . import fem

log = logging.getLogger(__name__)

Mode = Literal["stiffness", "stress"]
LEDGER_HEADER = ["sample_id", "iteration", "J1", "J2", "h", "feasible"]


@dataclass(frozen=True)
class HfSetup:
    """Analysis mesh, material and loading shared by all HF evaluations.

    ``load`` and ``fixed`` default to the cantilever layout of the LF stage.
    """

    nx: int = 64
    ny: int = 64
    h_min: float = 0.01
    h_max: float = 0.1
    E0: float = 1.0
    nu: float = fem.POISSON
    load_fraction: float = 0.1
    t_skin: float | None = None
    load: np.ndarray | None = field(default=None, compare=False, repr=False)
    fixed: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not 0.0 < self.h_min < self.h_max:
            raise ValueError("need 0 < h_min < h_max")
        if self.t_skin is None:
            object.__setattr__(self, "t_skin", self.h_min / 10.0)
        if self.t_skin <= 0:
            raise ValueError("skin thickness must be positive")
        if (self.load is None) != (self.fixed is None):
            raise ValueError("load and fixed must be given together")
        if self.load is None:
            F, fixed = fem.cantilever_bc(self.mesh, self.load_fraction)
            object.__setattr__(self, "load", F)
            object.__setattr__(self, "fixed", fixed)

    @property
    def mesh(self) -> fem.QuadMesh:
        return fem.QuadMesh(self.nx, self.ny)

    def normalize_h(self, h):
        return (np.asarray(h, dtype=float) - self.h_min) / (self.h_max - self.h_min)

    def denormalize_h(self, t):
        return self.h_min + np.asarray(t, dtype=float) * (self.h_max - self.h_min)


@dataclass
class HfModel:
    binary: np.ndarray
    h: float
    problem: fem.FemProblem


@dataclass
class HfObjectives:
    J1: float
    J2: float
    feasible: bool
    diagnostic: str = ""

    @classmethod
    def infeasible(cls, reason: str) -> "HfObjectives":
        return cls(math.inf, math.inf, False, reason)


@dataclass
class DesignSample:
    """A candidate design: density on the analysis grid plus its scalar HF parameter.

    ``channel2`` holds the normalized HF field used by the crossover network;
    ``origin`` records which stage produced the sample.
    """

    sample_id: int
    density: np.ndarray
    h: float
    channel2: np.ndarray | None = None
    origin: str = "seed"
    iteration: int = 0
    J1: float = math.nan
    J2: float = math.nan
    feasible: bool | None = None
    diagnostic: str = ""

    @property
    def objectives(self) -> np.ndarray:
        return np.array([self.J1, self.J2])


def binarize(density: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Solid where ``density >= threshold`` (inclusive); returns a 0/1 float array."""
    return (np.asarray(density) >= threshold).astype(float)


def build_hf_model(binary: np.ndarray, h: float, setup: HfSetup) -> HfModel:
    b = np.asarray(binary, dtype=float).ravel()
    if not np.all((b == 0) | (b == 1)):
        raise ValueError("binary field must contain only 0 and 1")
    if not setup.h_min - 1e-12 <= h <= setup.h_max + 1e-12:
        raise ValueError(f"h={h} outside [{setup.h_min}, {setup.h_max}]")
    mesh = setup.mesh
    if b.size != mesh.n_elements:
        raise ValueError(f"field has {b.size} entries, mesh has {mesh.n_elements} elements")
    thickness = h * b + setup.t_skin * (1.0 - b)
    modulus = np.full(mesh.n_elements, setup.E0)
    problem = fem.FemProblem(mesh, modulus, thickness, setup.load, setup.fixed, setup.nu)
    return HfModel(b.reshape(mesh.ny, mesh.nx), float(h), problem)


def _touching(mesh: fem.QuadMesh, dofs: np.ndarray) -> np.ndarray:
    """Boolean (ny, nx) mask of elements that own any of ``dofs``."""
    hit = np.zeros(mesh.n_dofs, dtype=bool)
    hit[dofs] = True
    return hit[mesh.edofs].any(axis=1).reshape(mesh.ny, mesh.nx)


def check_feasibility(binary: np.ndarray, h: float, setup: HfSetup) -> str:
    """Return an empty string for a valid design, otherwise the reason it is not."""
    if not np.isfinite(h) or not setup.h_min - 1e-12 <= h <= setup.h_max + 1e-12:
        return f"h={h} outside [{setup.h_min}, {setup.h_max}]"
    b = np.asarray(binary).reshape(setup.ny, setup.nx) > 0
    if not b.any():
        return "all-void design"
    mesh = setup.mesh
    labels, _ = ndimage.label(b)
    support = set(np.unique(labels[b & _touching(mesh, setup.fixed)]))
    loaded = set(np.unique(labels[b & _touching(mesh, np.flatnonzero(setup.load))]))
    if not support & loaded:
        return "no solid path from support to load"
    return ""


def evaluate_hf(density: np.ndarray, h: float, mode: Mode, setup: HfSetup) -> HfObjectives:
    """Exact HF objectives: compliance or max solid von Mises, and reinforcement volume."""
    if mode not in ("stiffness", "stress"):
        raise ValueError(f"unknown mode {mode!r}")
    b = binarize(density)
    reason = check_feasibility(b, h, setup)
    if reason:
        return HfObjectives.infeasible(reason)
    model = build_hf_model(b, h, setup)
    try:
        sol = fem.solve(model.problem)
    except fem.FemError as exc:
        return HfObjectives.infeasible(f"FEM failure: {exc}")
    solid = b.ravel() > 0
    J1 = sol.compliance if mode == "stiffness" else float(sol.von_mises[solid].max())
    J2 = h * setup.mesh.element_area * float(solid.sum())
    if not (np.isfinite(J1) and J1 > 0):
        return HfObjectives.infeasible(f"non-finite or non-positive J1={J1}")
    return HfObjectives(float(J1), float(J2), True)


def evaluate_sample(sample: DesignSample, mode: Mode, setup: HfSetup) -> DesignSample:
    out = evaluate_hf(sample.density, sample.h, mode, setup)
    sample.J1, sample.J2, sample.feasible, sample.diagnostic = out.J1, out.J2, out.feasible, out.diagnostic
    return sample


def evaluate_many(samples: Sequence[DesignSample], mode: Mode, setup: HfSetup,
                  workers: int = 1) -> list[DesignSample]:
    """Evaluate independent samples, preserving input order."""
    if workers <= 1 or len(samples) < 2:
        return [evaluate_sample(s, mode, setup) for s in samples]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda s: evaluate_sample(s, mode, setup), samples))


def append_ledger(path: str | os.PathLike, samples: Iterable[DesignSample]) -> None:
    """Append evaluation records, writing the header when the file is new."""
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(LEDGER_HEADER)
        for s in samples:
            writer.writerow([s.sample_id, s.iteration, repr(float(s.J1)), repr(float(s.J2)),
                             repr(float(s.h)), int(bool(s.feasible))])
