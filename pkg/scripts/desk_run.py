"""Desk-scale end-to-end run: seeds, ten loop iterations, artifact export.

    python3 scripts/desk_run.py --out runs/desk [--seed 0] [--config scripts/desk.cfg]
"""

import argparse
import logging
import time
from pathlib import Path

import numpy as np

from mftd import pipeline
from mftd.config import load_config

HERE = Path(__file__).resolve().parent


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=HERE / "desk.cfg")
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seed", type=int)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    config = load_config(args.config, seed=args.seed, out_dir=args.out)
    t0 = time.perf_counter()
    state = pipeline.run_mftd(config, config.out_dir)
    pipeline.export_artifacts(state, config.out_dir)
    front = state.front()
    h = np.array([s.h for s in front])
    print(f"{state.iteration + 1} iterations in {time.perf_counter() - t0:.0f}s; "
          f"archive {len(state.archive)}, front {len(front)}")
    print(f"HV {state.hv_history[0]:.6g} -> {state.hv_history[-1]:.6g} "
          f"({state.hv_history[-1] / state.hv_history[0] - 1:+.2%})")
    print(f"front h range [{h.min():.4f}, {h.max():.4f}], {np.unique(h).size} distinct values")


if __name__ == "__main__":
    main()
