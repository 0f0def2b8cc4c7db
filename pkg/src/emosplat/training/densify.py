"""Densification and pruning of canonical Gaussian fields.

High-gradient Gaussians are replaced by two children whose opacities
partition the parent's (alpha' = 1 - sqrt(1 - alpha), so compositing two
coincident children reproduces the parent exactly); children separate
slightly along the parent's largest axis, and large parents additionally
shrink that axis. This keeps the rendered image nearly unchanged at the
densify step. Near-transparent Gaussians are pruned.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..scene import GaussianField, logistic, quat_to_rotmat
from .config import DensifyConfig

# Child separation (fraction of the largest axis sigma) and split shrink are
# kept small so the rendered image moves by well under 1e-3 L1 at the step;
# the optimizer separates the children afterwards.
CLONE_OFFSET = 0.05
SPLIT_OFFSET = 0.12
SPLIT_SHRINK = 1.08


@dataclass
class DensifyResult:
    field: GaussianField
    carried: np.ndarray  # (M,) old row per new row, -1 for fresh children
    split: int
    cloned: int
    pruned: int


def _partition_logit(alpha: np.ndarray) -> np.ndarray:
    child = 1.0 - np.sqrt(1.0 - alpha)
    child = np.clip(child, 1e-6, 1.0 - 1e-6)
    return np.log(child / (1.0 - child))


def densify_and_prune(
    field: GaussianField,
    mean_grad_norm: np.ndarray,
    cfg: DensifyConfig,
    scene_extent: float,
) -> DensifyResult:
    n = len(field)
    alpha = logistic(field.opacity_logits.astype(np.float64))
    prune = alpha < cfg.opacity_floor
    budget = max(cfg.max_gaussians - n, 0)
    grow = (np.asarray(mean_grad_norm) > cfg.grad_threshold) & ~prune
    if budget <= 0:
        grow[:] = False
    elif int(grow.sum()) > budget:
        # keep the highest-gradient candidates within the budget
        order = np.argsort(-np.asarray(mean_grad_norm))
        allowed = np.zeros(n, dtype=bool)
        allowed[order[:budget]] = True
        grow &= allowed

    keep = ~prune & ~grow
    keep_idx = np.flatnonzero(keep)
    grow_idx = np.flatnonzero(grow)

    parts = {name: [arr[keep_idx]] for name, arr in field.params().items()}
    carried = [keep_idx]
    n_split = n_clone = 0
    if grow_idx.size:
        scales = np.exp(field.log_scales[grow_idx].astype(np.float64))
        s_max = scales.max(axis=1)
        axis_id = np.argmax(scales, axis=1)
        R = quat_to_rotmat(field.rotations[grow_idx])
        axes = R[np.arange(grow_idx.size), :, axis_id]  # world-space largest axis
        is_split = s_max > cfg.percent_dense * scene_extent
        n_split = int(is_split.sum())
        n_clone = int(grow_idx.size - n_split)
        offset = np.where(is_split, SPLIT_OFFSET, CLONE_OFFSET)[:, None] * s_max[:, None] * axes
        child_logit = _partition_logit(logistic(field.opacity_logits[grow_idx].astype(np.float64)))
        log_scales = field.log_scales[grow_idx].astype(np.float64)
        rows = np.arange(grow_idx.size)
        log_scales[is_split, axis_id[is_split]] -= np.log(SPLIT_SHRINK)
        del rows
        base_pos = field.positions[grow_idx].astype(np.float64)
        for sgn in (1.0, -1.0):
            parts["positions"].append((base_pos + sgn * offset).astype(np.float32))
            parts["log_scales"].append(log_scales.astype(np.float32))
            parts["rotations"].append(field.rotations[grow_idx])
            parts["opacity_logits"].append(child_logit.astype(np.float32))
            parts["colors"].append(field.colors[grow_idx])
            parts["normal_residuals"].append(field.normal_residuals[grow_idx])
            carried.append(np.full(grow_idx.size, -1, dtype=np.int64))

    new_field = GaussianField(
        positions=np.concatenate(parts["positions"]),
        log_scales=np.concatenate(parts["log_scales"]),
        rotations=np.concatenate(parts["rotations"]),
        opacity_logits=np.concatenate(parts["opacity_logits"]),
        colors=np.concatenate(parts["colors"]),
        normal_residuals=np.concatenate(parts["normal_residuals"]),
        role=field.role,
        stage=field.stage,
    )
    return DensifyResult(
        field=new_field,
        carried=np.concatenate(carried),
        split=n_split,
        cloned=n_clone,
        pruned=int(prune.sum()),
    )


def scene_extent(field: GaussianField) -> float:
    if not len(field):
        return 1.0
    span = field.positions.max(axis=0) - field.positions.min(axis=0)
    return float(max(np.max(span), 1e-6))
