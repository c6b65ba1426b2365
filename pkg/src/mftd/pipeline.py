"""Multifidelity design loop: seeding, HF evaluation, selection, crossover, mutation.

Every random draw comes from a generator keyed on ``(seed, iteration, stage)``,
so a run resumed from a checkpoint continues exactly as an uninterrupted one.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import pickle
import platform
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import scipy
from PIL import Image

from . import fem, hf, moea, topopt, vae
from .config import RunConfig
from .mapping import helmholtz_smooth
from .mma import MmaError

log = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.pkl"
FAILED_CHECKPOINT = "failed_checkpoint.pkl"
LEDGER = "evaluations.csv"
LF_FAILURES = (topopt.OptimizationError, MmaError, fem.FemError, FloatingPointError)
_STAGES = {"seed": 0, "crossover": 1, "generate": 2, "mutate": 3}


class PipelineError(RuntimeError):
    """A stage of the design loop failed; ``stage`` and ``iteration`` locate it."""

    def __init__(self, message: str, stage: str, iteration: int, checkpoint: str | None = None):
        super().__init__(f"[{stage}, iteration {iteration}] {message}")
        self.reason = message
        self.stage = stage
        self.iteration = iteration
        self.checkpoint = checkpoint


@dataclass
class RunState:
    """Everything needed to continue a run: archive, pending samples and HV trace."""

    config: RunConfig
    iteration: int = 0
    archive: list[hf.DesignSample] = field(default_factory=list)
    pending: list[hf.DesignSample] = field(default_factory=list)
    hv_history: list[float] = field(default_factory=list)
    ref_point: tuple[float, float] | None = None
    next_id: int = 0
    events: list[dict] = field(default_factory=list)
    finished: bool = False
    converged: bool = False

    def log(self, stage: str, message: str, **data) -> None:
        self.events.append(dict(iteration=self.iteration, stage=stage, message=message, **data))
        log.info("[%s it=%d] %s", stage, self.iteration, message)

    def new_id(self) -> int:
        self.next_id += 1
        return self.next_id - 1

    def front(self) -> list[hf.DesignSample]:
        if not self.archive:
            return []
        pts = np.array([s.objectives for s in self.archive])
        return [self.archive[k] for k in moea.non_dominated_sort(pts)[0]]


def stage_rng(config: RunConfig, iteration: int, stage: str) -> np.random.Generator:
    return np.random.default_rng([config.seed, iteration, _STAGES[stage]])


def hf_setup(config: RunConfig) -> hf.HfSetup:
    return hf.HfSetup(nx=config.nx, ny=config.ny, h_min=config.h_min, h_max=config.h_max)


def lf_config(config: RunConfig, vmax: float, reference: np.ndarray | None = None) -> topopt.LfConfig:
    return topopt.LfConfig(
        objective="compliance" if config.mode == "stiffness" else "pnorm_stress",
        volume_fraction=float(vmax), nx=config.nx, ny=config.ny,
        filter_radius=config.filter_radius, max_iter=config.lf_max_iter,
        reference=reference, g_mut_max=config.g_mut_max,
    )


def _fan_out(fn: Callable, items: list, workers: int) -> list:
    if workers <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _try_lf(cfg: topopt.LfConfig):
    try:
        return topopt.run_lf_optimization(cfg)
    except LF_FAILURES as exc:
        log.warning("LF run failed (vmax=%.3f): %s", cfg.volume_fraction, exc)
        return exc


def seed_initial_population(config: RunConfig, state: RunState | None = None) -> list[hf.DesignSample]:
    """LF designs over Latin-hypercube ``(V_max, h)`` pairs, with a uniform second channel.

    Raises
    ------
    PipelineError
        If more than half of the LF runs fail.
    """
    state = state or RunState(config)
    lhs = moea.latin_hypercube(config.n_lf_seed, [(config.vmax_min, config.vmax_max),
                                                  (config.h_min, config.h_max)],
                               stage_rng(config, 0, "seed"))
    results = _fan_out(lambda row: _try_lf(lf_config(config, row[0])), list(lhs), config.workers)
    failures = sum(isinstance(r, Exception) for r in results)
    if failures > 0.5 * len(results):
        raise PipelineError(f"{failures} of {len(results)} LF seed runs failed", "seed", 0)
    samples = []
    for (vmax, h), res in zip(lhs, results):
        if isinstance(res, Exception):
            continue
        t = vae.normalize_hf(h, config.h_min, config.h_max)
        samples.append(hf.DesignSample(state.new_id(), res.density, float(h),
                                       np.full_like(res.density, t), origin="seed"))
    state.log("seed", f"{len(samples)} LF seeds, {failures} failures")
    return samples


def training_images(samples: list[hf.DesignSample], config: RunConfig) -> np.ndarray:
    """Two-channel images of archived designs: smoothed density and normalized HF field.

    The design domain is already the unit square, so the harmonic map is the
    identity and no resampling is needed.
    """
    imgs = np.empty((len(samples), 2, config.ny, config.nx))
    for k, s in enumerate(samples):
        imgs[k, 0] = helmholtz_smooth(np.clip(s.density, 0.0, 1.0), config.smooth_radius)
        imgs[k, 1] = np.clip(s.channel2, 0.0, 1.0)
    return imgs


def crossover(state: RunState) -> list[hf.DesignSample]:
    """Train the two-channel VAE on the archive and decode ``n_vae`` new designs."""
    config = state.config
    i = state.iteration
    h = np.array([s.h for s in state.archive])
    images, _ = vae.oversample(training_images(state.archive, config), h, config.oversample_bins,
                               config.h_min, config.h_max)
    tcfg = vae.TrainConfig(max_epochs=config.vae_epochs, learning_rate=config.vae_lr,
                           batch_size=config.vae_batch, w_kl=config.vae_w_kl,
                           patience=config.vae_patience,
                           seed=int(stage_rng(config, i, "crossover").integers(2**31)))
    result = vae.train(images, tcfg, hidden=config.vae_hidden, n_latent=config.vae_latent)
    decoded = vae.generate(result.model, config.n_vae, stage_rng(config, i, "generate"))
    out = []
    for img in decoded:
        h_new, _ = vae.extract_scalar_hf(img, config.h_min, config.h_max)
        out.append(hf.DesignSample(state.new_id(), img[0].copy(), h_new, img[1].copy(),
                                   origin="vae", iteration=i + 1))
    state.log("crossover", f"trained on {len(images)} images (best epoch {result.best_epoch}), "
                           f"decoded {len(out)}")
    return out


def mutate(state: RunState) -> list[hf.DesignSample]:
    """Constrained LF runs that stay within ``g_mut_max`` of references from the front."""
    config = state.config
    i = state.iteration
    rng = stage_rng(config, i, "mutate")
    front = state.front()
    if not front:
        return []
    picks = rng.choice(len(front), size=config.n_mut, replace=config.n_mut > len(front))
    jobs = []
    for k in picks:
        ref = hf.binarize(front[k].density)
        lhs = moea.latin_hypercube(config.n_mut_seed, [(config.vmax_min, config.vmax_max),
                                                       (config.h_min, config.h_max)], rng)
        jobs.extend((front[k].sample_id, ref, vmax, h) for vmax, h in lhs)
    results = _fan_out(lambda job: _try_lf(lf_config(config, job[2], job[1])), jobs, config.workers)
    out = []
    for (ref_id, _, _, h), res in zip(jobs, results):
        if isinstance(res, Exception):
            continue
        t = vae.normalize_hf(h, config.h_min, config.h_max)
        out.append(hf.DesignSample(state.new_id(), res.density, float(h), t * res.density,
                                   origin=f"mutant:{ref_id}", iteration=i + 1))
    state.log("mutate", f"{len(out)} mutants from {len(set(picks.tolist()))} references")
    return out


def _update_archive(state: RunState, evaluated: list[hf.DesignSample]) -> None:
    config = state.config
    feasible = [s for s in evaluated if s.feasible]
    pool = state.archive + feasible
    if not pool:
        raise PipelineError("no feasible design to archive", "select", state.iteration)
    pts = np.array([s.objectives for s in pool])
    ids = np.array([s.sample_id for s in pool])
    keep = moea.select(pts, config.min_offspring, config.min_offspring, ids=ids)
    state.archive = [pool[k] for k in keep]
    if state.ref_point is None:
        if config.r_hv1 is not None:
            state.ref_point = (config.r_hv1, config.r_hv2)
        else:
            fp = np.array([s.objectives for s in state.front()])
            state.ref_point = tuple(float(v) for v in config.r_hv_margin * fp.max(axis=0))
    hv = moea.hypervolume_2d(np.array([s.objectives for s in state.front()]), state.ref_point)
    state.hv_history.append(hv)
    state.log("select", f"{len(feasible)}/{len(evaluated)} feasible, archive {len(state.archive)}, "
                        f"HV {hv:.6g}")


def save_state(state: RunState, path: str | os.PathLike) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        pickle.dump(state, fh, protocol=4)
    os.replace(tmp, path)


def load_state(path: str | os.PathLike) -> RunState:
    with open(path, "rb") as fh:
        state = pickle.load(fh)
    if not isinstance(state, RunState):
        raise ValueError(f"{path} does not hold a run state")
    return state


def _fail(state: RunState, out: Path | None, stage: str, exc: Exception) -> PipelineError:
    dump = None
    if out is not None:
        dump = str(out / FAILED_CHECKPOINT)
        state.log(stage, f"failed: {exc}")
        save_state(state, dump)
    if isinstance(exc, PipelineError):
        stage, message = exc.stage, exc.reason
    else:
        message = f"{type(exc).__name__}: {exc}"
    err = PipelineError(message, stage, state.iteration, dump)
    err.__cause__ = exc
    return err


def run_mftd(config: RunConfig, out_dir: str | os.PathLike | None = None,
             resume: RunState | None = None) -> RunState:
    """Run the design loop until the hypervolume stalls or ``n_max`` iterations pass.

    With ``out_dir`` set, evaluations are appended to a ledger and the state is
    checkpointed after every iteration. ``resume`` continues a checkpointed run.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    setup = hf_setup(config)
    if resume is None:
        state = RunState(config)
        if out is not None and (out / LEDGER).exists():
            (out / LEDGER).unlink()
        try:
            state.pending = seed_initial_population(config, state)
        except Exception as exc:
            raise _fail(state, out, "seed", exc) from exc
    else:
        state = resume
    while not state.finished:
        committed = pickle.dumps(state, protocol=4)
        stage = "evaluate"
        try:
            evaluated = hf.evaluate_many(state.pending, config.mode, setup, config.workers)
            if out is not None:
                hf.append_ledger(out / LEDGER, evaluated)
            stage = "select"
            _update_archive(state, evaluated)
            state.pending = []
            state.converged = moea.converged(state.hv_history, config.eps_hv, config.hv_window)
            if state.converged or state.iteration + 1 >= config.n_max:
                state.finished = True
                state.log("stop", "converged" if state.converged else "iteration limit")
            else:
                stage = "crossover"
                new = crossover(state)
                if state.iteration > 0 and state.iteration % config.n_mut_interval == 0:
                    stage = "mutate"
                    new += mutate(state)
                state.pending = new
                state.iteration += 1
        except Exception as exc:
            raise _fail(pickle.loads(committed), out, stage, exc) from exc
        if out is not None:
            save_state(state, out / CHECKPOINT)
    return state


# artifacts --------------------------------------------------------------------

def save_png(path: str | os.PathLike, field01: np.ndarray) -> None:
    """8-bit grayscale image of a ``[0, 1]`` field; grid row 0 (y = 0) at the bottom."""
    arr = np.rint(255.0 * np.clip(np.asarray(field01, dtype=float), 0.0, 1.0)).astype(np.uint8)
    Image.fromarray(arr[::-1], mode="L").save(path, format="PNG")


def load_png(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=float) / 255.0
    return arr[::-1].copy()


def export_artifacts(state: RunState, out_dir: str | os.PathLike) -> list[Path]:
    """Write CSV summaries, per-sample images and a manifest; returns the written paths.

    The manifest omits the output location so identical runs export identical bytes
    wherever they are written.
    """
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    archive = sorted(state.archive, key=lambda s: s.sample_id)
    ids = np.array([s.sample_id for s in archive], dtype=int)
    ranks = np.zeros(len(archive), dtype=int)
    if archive:
        pts = np.array([s.objectives for s in archive])
        ranks = moea.ranks_from_fronts(moea.non_dominated_sort(pts), len(archive))
    written = [out / "pareto.csv", out / "hv_history.csv", out / "fronts.csv"]
    with open(written[0], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "J1", "J2", "h", "rank"])
        for s, r in zip(archive, ranks):
            w.writerow([s.sample_id, repr(float(s.J1)), repr(float(s.J2)), repr(float(s.h)), int(r)])
    moea.write_hv_history(written[1], state.hv_history)
    moea.write_fronts(written[2], ids, ranks)
    for s in archive:
        for name, img in (("density", s.density), ("channel2", s.channel2)):
            p = out / "images" / f"{s.sample_id:06d}_{name}.png"
            save_png(p, img)
            written.append(p)
    manifest = dict(
        config={k: v for k, v in state.config.to_dict().items() if k != "out_dir"},
        seed=state.config.seed, iterations=state.iteration + 1,
        converged=state.converged, archive_size=len(archive),
        hv_reference=list(state.ref_point) if state.ref_point else None,
        versions=dict(python=platform.python_version(), numpy=np.__version__,
                      scipy=scipy.__version__, mftd=_version()),
    )
    written.append(out / "manifest.json")
    with open(written[-1], "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return written


def _version() -> str:
    from importlib.metadata import PackageNotFoundError, version
    try:
        return version("mftd")
    except PackageNotFoundError:
        return "unknown"
