"""Training configuration: staged schedule, optimizer settings, loss weights,
densification rules. One desk-scale factor divides every stage length so the
published schedule shrinks to something that runs in minutes."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dc_field

from ..losses import LossWeights
from ..metrics import VA_POINTS


@dataclass
class DensifyConfig:
    interval: int = 500  # steps between densify/prune passes (pre-scale)
    grad_threshold: float = 2e-4  # mean view-space positional gradient
    opacity_floor: float = 0.005  # prune below this activated opacity
    max_gaussians: int = 20000
    percent_dense: float = 0.01  # split when max scale > this * scene extent
    stop_fraction: float = 0.5  # densify only in this first fraction of the stage

    def __post_init__(self):
        if self.interval < 1:
            raise ValueError("densify interval must be >= 1")
        if not 0.0 < self.opacity_floor < 1.0:
            raise ValueError("opacity prune floor must lie in (0, 1)")

    def to_json(self) -> dict:
        return {
            "interval": self.interval,
            "grad_threshold": self.grad_threshold,
            "opacity_floor": self.opacity_floor,
            "max_gaussians": self.max_gaussians,
            "percent_dense": self.percent_dense,
            "stop_fraction": self.stop_fraction,
        }

    @staticmethod
    def from_json(obj: dict) -> "DensifyConfig":
        return DensifyConfig(**obj)


@dataclass
class TrainConfig:
    seed: int = 0
    scale: float = 25.0  # desk-scale divisor applied to all stage lengths
    canonical_steps: int = 10000
    branch_steps: int = 50000
    border_steps: int = 20000
    lr_hash: float = 5e-3
    lr_other: float = 5e-4
    lr_half_life: int = 25000  # steps for the exponential schedule to halve lr
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    weight_decay: float = 0.0
    weights: LossWeights = dc_field(default_factory=LossWeights)
    densify: DensifyConfig = dc_field(default_factory=DensifyConfig)
    sync_enabled: bool = True
    sync_window: int = 5
    perceptual_enabled: bool = True
    va_train_points: list = dc_field(default_factory=lambda: [list(p) for p in VA_POINTS])
    init: str = "gt-jitter"  # or "random"
    init_jitter: float = 0.01
    workers: int = 1
    encoder_levels: int = 8
    encoder_features: int = 2
    encoder_table_size: int = 16384
    encoder_base_res: int = 16
    encoder_growth: float = 1.5

    def steps(self, stage: str) -> int:
        base = {
            "canonical": self.canonical_steps,
            "branch": self.branch_steps,
            "border": self.border_steps,
        }[stage]
        return max(int(round(base / self.scale)), 0) if base else 0

    def densify_interval(self) -> int:
        return max(int(round(self.densify.interval / self.scale)), 1)

    def half_life(self) -> float:
        return max(self.lr_half_life / self.scale, 1.0)

    def encoder_kwargs(self) -> dict:
        return {
            "levels": self.encoder_levels,
            "features": self.encoder_features,
            "table_size": self.encoder_table_size,
            "base_res": self.encoder_base_res,
            "growth": self.encoder_growth,
        }

    def to_json(self) -> dict:
        out = {
            k: getattr(self, k)
            for k in (
                "seed", "scale", "canonical_steps", "branch_steps", "border_steps",
                "lr_hash", "lr_other", "lr_half_life", "beta1", "beta2", "eps",
                "weight_decay", "sync_enabled", "sync_window", "perceptual_enabled",
                "va_train_points", "init", "init_jitter", "workers",
                "encoder_levels", "encoder_features", "encoder_table_size",
                "encoder_base_res", "encoder_growth",
            )
        }
        out["weights"] = self.weights.to_json()
        out["densify"] = self.densify.to_json()
        return out

    @staticmethod
    def from_json(obj: dict) -> "TrainConfig":
        obj = dict(obj)
        weights = LossWeights.from_json(obj.pop("weights", {}))
        densify = DensifyConfig.from_json(obj.pop("densify", {}))
        return TrainConfig(weights=weights, densify=densify, **obj)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()
