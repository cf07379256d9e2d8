"""Run configuration: a flat YAML mapping, environment overrides, CLI overrides."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

import yaml

from .losses import LossWeights

ENV_PREFIX = "INCRF_"


@dataclass
class ReconConfig:
    seed: int = 0
    # field
    coarse_res: int = 32
    fine_res: int = 64
    rank: int = 4
    app_rank: int = 2
    n_features: int = 8
    hidden: int = 32
    half_extent: float = 2.5
    density_shift: float = -2.0
    init_scale: float = 0.1
    # allocation
    bound_radius: float = 1.0  # fraction of half_extent
    overlap: int = 5
    # schedule
    init_iters: int = 100
    register_iters: int = 30
    refine_iters_per_frame: int = 60
    frames_per_iter: int = 8
    rays_per_iter: int = 256
    # sampling
    near: float = 0.05
    far: float = 8.0
    n_strat: int = 48
    n_surface: int = 16
    surface_std: float = 0.02
    eval_strat: int = 96
    # optimisation
    lr_factors: float = 2e-2
    lr_decoder: float = 5e-3
    lr_rot: float = 5e-3
    lr_trans: float = 5e-4
    lr_decay: float = 0.1
    lr_decay_iters: int = 3000
    lr_pose_decay: float = 0.1  # per-pose exponential decay over its own updates
    lr_pose_decay_iters: int = 300
    w_photometric: float = 0.25
    w_depth: float = 0.1
    w_fba: float = 1.0
    w_flow_forward: float = 1.0
    w_flow_backward: float = 1.0
    scale_anchor: float = 1.0
    anchor_spread: float = 1.0  # weight of the depth-spread term next to the mean
    # pose initialisation
    use_fba: bool = True
    fba_levels: int = 4
    fba_stride: int = 4
    fba_blur: float = 2.0
    fba_prior_median: int = 5  # median-filter width applied to priors before back-projection
    # evaluation
    test_every: int = 8
    eval_refine_iters: int = 50
    dtype: str = "float32"

    def weights(self) -> LossWeights:
        return LossWeights(
            self.w_photometric, self.w_depth, self.w_fba, self.w_flow_forward, self.w_flow_backward
        )

    @property
    def bound(self) -> float:
        """Bound radius in world units."""
        return self.bound_radius * self.half_extent

    def replace(self, **kw) -> "ReconConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ReconConfig":
        known = {f.name: f for f in fields(cls)}
        bad = set(d) - set(known)
        if bad:
            raise KeyError(f"unknown config keys: {sorted(bad)}")
        return cls(**{k: _coerce(known[k], v) for k, v in d.items()})

    @classmethod
    def load(cls, path=None, env=None, overrides=None) -> "ReconConfig":
        """File values, then ``INCRF_<KEY>`` environment values, then overrides."""
        data = {}
        if path is not None:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
            if not isinstance(loaded, dict):
                raise ValueError(f"config {path} must be a mapping")
            data.update(loaded)
        env = os.environ if env is None else env
        for f in fields(cls):
            key = ENV_PREFIX + f.name.upper()
            if key in env:
                data[f.name] = yaml.safe_load(env[key])
        data.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_dict(data)

    def save(self, path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _coerce(f, v):
    typ = f.type if isinstance(f.type, type) else {"int": int, "float": float, "bool": bool, "str": str}[f.type]
    if typ is bool and isinstance(v, str):
        return v.strip().lower() in ("1", "true", "yes", "on")
    return typ(v)
