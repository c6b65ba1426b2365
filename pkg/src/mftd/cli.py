"""Command-line entry point.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import fem, hf, mapping, pipeline, topopt, vae
from .config import ConfigError, RunConfig, load_config
from .mma import MmaError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NUMERIC_ERRORS = (fem.FemError, MmaError, topopt.OptimizationError, vae.VaeError,
                  pipeline.PipelineError, FloatingPointError)


def _cmd_run(args) -> int:
    config = load_config(args.config, seed=args.seed, out_dir=args.out)
    out = Path(config.out_dir)
    resume = pipeline.load_state(args.resume) if args.resume else None
    state = pipeline.run_mftd(config, out, resume=resume)
    pipeline.export_artifacts(state, out)
    print(json.dumps(dict(iterations=state.iteration + 1, converged=state.converged,
                          archive=len(state.archive), hv=state.hv_history[-1])))
    return EXIT_OK


def _cmd_evaluate(args) -> int:
    density = pipeline.load_png(args.density)
    ny, nx = density.shape
    setup = hf.HfSetup(nx=nx, ny=ny, h_min=args.h_min, h_max=args.h_max)
    res = hf.evaluate_hf(density, args.h, args.mode, setup)
    print(json.dumps(dict(J1=res.J1, J2=res.J2, feasible=res.feasible, diagnostic=res.diagnostic)))
    return EXIT_OK


def _cmd_export(args) -> int:
    state = pipeline.load_state(args.state)
    for p in pipeline.export_artifacts(state, args.out)[:3]:
        print(p)
    return EXIT_OK


def _cmd_lf(args) -> int:
    config = RunConfig(mode=args.mode, nx=args.nx, ny=args.ny, filter_radius=args.filter_radius,
                       lf_max_iter=args.max_iter)
    res = topopt.run_lf_optimization(pipeline.lf_config(config, args.vmax))
    if args.out:
        pipeline.save_png(args.out, res.density)
    if args.history:
        res.write_history(args.history)
    print(json.dumps(dict(objective=res.objective, volume=res.volume, iterations=len(res.history))))
    return EXIT_OK


def _cmd_map(args) -> int:
    mesh = mapping.read_mesh(args.mesh)
    uv = mapping.harmonic_map(mesh)
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        out.write("node,u,v\n")
        for k, (u, v) in enumerate(uv):
            out.write(f"{k},{float(u)!r},{float(v)!r}\n")
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mftd", description="Multifidelity topology design with a "
                                "two-channel VAE crossover.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="full design loop")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.add_argument("--resume", help="checkpoint to continue from")
    r.set_defaults(func=_cmd_run)

    e = sub.add_parser("evaluate", help="HF objectives of one design image")
    e.add_argument("--density", required=True, help="grayscale PNG, white = solid")
    e.add_argument("--h", type=float, required=True)
    e.add_argument("--mode", choices=["stiffness", "stress"], default="stiffness")
    e.add_argument("--h-min", type=float, default=0.01)
    e.add_argument("--h-max", type=float, default=0.1)
    e.set_defaults(func=_cmd_evaluate)

    x = sub.add_parser("export", help="write artifacts from a checkpoint")
    x.add_argument("--state", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=_cmd_export)

    lf = sub.add_parser("lf", help="single LF topology optimization")
    lf.add_argument("--vmax", type=float, required=True)
    lf.add_argument("--mode", choices=["stiffness", "stress"], default="stiffness")
    lf.add_argument("--nx", type=int, default=64)
    lf.add_argument("--ny", type=int, default=64)
    lf.add_argument("--filter-radius", type=float, default=0.03)
    lf.add_argument("--max-iter", type=int)
    lf.add_argument("--out", help="density PNG")
    lf.add_argument("--history", help="iteration history CSV")
    lf.set_defaults(func=_cmd_lf)

    m = sub.add_parser("map", help="harmonic map of a surface patch mesh to the unit square")
    m.add_argument("--mesh", required=True)
    m.add_argument("--out", help="CSV of (node, u, v); stdout by default")
    m.set_defaults(func=_cmd_map)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
