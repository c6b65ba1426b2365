"""Run configuration and its flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from typing import Literal, get_args, get_type_hints

VMAX_RANGE = {"stiffness": (0.2, 0.8), "stress": (0.2, 0.5)}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Parameters of one multifidelity design run.

    ``None`` entries are filled in on construction: the V_max range from
    ``mode``, ``min_offspring`` from ``n_lf_seed`` and ``smooth_radius`` from
    ``filter_radius``. A ``None`` hypervolume reference point is calibrated
    from the first evaluated population.
    """

    mode: Literal["stiffness", "stress"] = "stiffness"
    nx: int = 64
    ny: int = 64
    n_lf_seed: int = 100
    channels: int = 2
    n_max: int = 100
    n_mut_seed: int = 5
    n_mut: int = 10
    n_mut_interval: int = 5
    eps_hv: float = 1e-5
    hv_window: int = 5
    n_vae: int = 256
    vmax_min: float | None = None
    vmax_max: float | None = None
    h_min: float = 0.01
    h_max: float = 0.1
    r_hv1: float | None = None
    r_hv2: float | None = None
    r_hv_margin: float = 1.1
    min_offspring: int | None = None
    filter_radius: float = 0.03
    smooth_radius: float | None = None
    lf_max_iter: int | None = None
    g_mut_max: float = 0.5
    vae_hidden: int = 512
    vae_latent: int = 16
    vae_epochs: int = 300
    vae_lr: float = 1e-4
    vae_batch: int = 16
    vae_w_kl: float = 1e-3
    vae_patience: int = 40
    oversample_bins: int = 4
    seed: int = 0
    workers: int = 1
    out_dir: str = "mftd_out"

    def __post_init__(self):
        if self.mode not in VMAX_RANGE:
            raise ConfigError(f"mode must be 'stiffness' or 'stress', got {self.mode!r}")
        lo, hi = VMAX_RANGE[self.mode]
        if self.vmax_min is None:
            self.vmax_min = lo
        if self.vmax_max is None:
            self.vmax_max = hi
        if self.min_offspring is None:
            self.min_offspring = self.n_lf_seed
        if self.smooth_radius is None:
            self.smooth_radius = self.filter_radius
        for name in ("nx", "ny", "n_lf_seed", "n_max", "n_mut_seed", "n_mut", "n_mut_interval",
                     "n_vae", "hv_window", "min_offspring", "vae_hidden", "vae_latent",
                     "vae_epochs", "vae_batch", "vae_patience", "oversample_bins", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.channels != 2:
            raise ConfigError("only two channels (density, HF parameter) are supported")
        if not 0.0 < self.vmax_min <= self.vmax_max < 1.0:
            raise ConfigError("need 0 < vmax_min <= vmax_max < 1")
        if not 0.0 < self.h_min < self.h_max:
            raise ConfigError("need 0 < h_min < h_max")
        if self.eps_hv <= 0 or self.filter_radius <= 0 or self.smooth_radius < 0:
            raise ConfigError("eps_hv and filter_radius must be positive, smooth_radius nonnegative")
        if (self.r_hv1 is None) != (self.r_hv2 is None):
            raise ConfigError("set both r_hv1 and r_hv2, or neither")
        if self.vae_patience > self.vae_epochs:
            raise ConfigError("vae_patience cannot exceed vae_epochs")
        if self.seed < 0:
            raise ConfigError("seed must be nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _convert(name: str, raw: str, hint):
    text = raw.strip()
    args = [a for a in get_args(hint) if a is not type(None)]
    if type(None) in get_args(hint) and text.lower() in ("none", ""):
        return None
    target = args[0] if args else hint
    if getattr(target, "__origin__", None) is Literal:
        target = str
    try:
        if target is bool:
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if target is int:
            return int(text)
        if target is float:
            return float(text)
        return text.strip("\"'")
    except ValueError as exc:
        raise ConfigError(f"cannot parse {name} = {raw!r}") from exc


def parse_config(text: str, **overrides) -> RunConfig:
    """Build a :class:`RunConfig` from ``key = value`` lines; ``#`` starts a comment."""
    hints = get_type_hints(RunConfig)
    known = {f.name for f in fields(RunConfig)}
    values: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _convert(key, raw, hints[key])
    values.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**values)


def load_config(path: str | os.PathLike, **overrides) -> RunConfig:
    with open(path) as fh:
        return parse_config(fh.read(), **overrides)


def format_config(config: RunConfig) -> str:
    lines = []
    for f in fields(RunConfig):
        v = getattr(config, f.name)
        lines.append(f"{f.name} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"
