"""AdamW optimizer (decoupled weight decay, zero by default) and the
exponential learning-rate schedule, both hand-rolled so updates are
bit-deterministic float64 math written back to float32 parameter storage."""

from __future__ import annotations

import numpy as np


class OptimizerError(Exception):
    pass


def exp_schedule(step: int, base_lr: float, half_life: int) -> float:
    """lr(t) = lr0 * d^t with d chosen so lr halves every `half_life` steps."""
    return base_lr * 0.5 ** (step / half_life)


class Adam:
    """Moment-estimate optimizer over a dict of named float parameters.

    `lrs` maps each parameter name to its base learning rate. The caller
    passes a schedule scale each step; moments live in float64 regardless of
    parameter dtype.
    """

    def __init__(self, params: dict, lrs: dict, betas=(0.9, 0.999), eps: float = 1e-15,
                 weight_decay: float = 0.0):
        missing = set(params) - set(lrs)
        if missing:
            raise OptimizerError(f"no learning rate for parameter groups {sorted(missing)}")
        self.params = params
        self.lrs = lrs
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros(v.shape, dtype=np.float64) for k, v in params.items()}
        # float64 master copies accumulate updates; float32 storage mirrors them
        self.master = {k: v.astype(np.float64) for k, v in params.items()}

    def step(self, grads: dict, lr_scale: float = 1.0) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for name, p in self.params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient in parameter group {name!r}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = np.sqrt(v / c2)
            update += self.eps
            np.divide(m / c1, update, out=update)
            if self.weight_decay:
                update += self.weight_decay * self.master[name]
            master = self.master[name]
            master -= self.lrs[name] * lr_scale * update
            p[...] = master.astype(p.dtype)

    def state_tensors(self) -> dict:
        out = {"meta.step": np.array([self.step_count], dtype=np.float64)}
        for k in self.params:
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def resize_state(self, name: str, carried: np.ndarray) -> None:
        """Rebuild one group's moments after densification.

        `carried` holds, per row of the new parameter array, the old row to
        copy or -1 for a fresh (zeroed) slot.
        """
        p = self.params[name]
        for store in (self.m, self.v):
            old = store[name]
            new = np.zeros(p.shape, dtype=np.float64)
            keep = carried >= 0
            new[keep] = old[carried[keep]]
            store[name] = new
        self.master[name] = p.astype(np.float64)
