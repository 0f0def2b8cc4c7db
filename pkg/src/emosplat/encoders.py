"""Learnable positional encoders and branch networks with exact gradients.

The training graph is static, so every component implements an explicit
forward that retains exactly what its backward needs; there is no general
autodiff. Parameters are float32 storage shared with the optimizer; all math
and gradient accumulation happens in float64. Call zero_grad() before a
backward pass and read the accumulated values from `.grads`.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from .scene import DimensionMismatchError, logistic

HASH_PRIMES = (np.uint64(1), np.uint64(2654435761))
_PLANES = ((0, 1), (1, 2), (0, 2))  # (xy), (yz), (xz)
_GEOM_CACHE_SIZE = 8


def _xavier_uniform(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_out, fan_in)).astype(np.float32)


class TriPlaneHashEncoder:
    """Three planar multiresolution hash grids over normalized position.

    Per plane and level the four surrounding grid vertices are hashed with
    (ix * 1) xor (iy * 2654435761) mod table_size and their feature rows are
    bilinearly interpolated; the output concatenates planes then levels.
    Positions are mapped into [0, 1]^3 by a stored bounding box and clamped.
    The box is a frozen buffer (reset explicitly, e.g. after densification),
    never differentiated through.
    """

    def __init__(self, levels=8, features=2, table_size=2**14, base_res=16, growth=1.5, seed=0):
        self.levels = levels
        self.features = features
        self.table_size = table_size
        self.resolutions = [int(np.floor(base_res * growth**l)) for l in range(levels)]
        rng = np.random.default_rng(seed)
        tables = rng.uniform(-1e-4, 1e-4, (3, levels, table_size, features)).astype(np.float32)
        self.params = {"tables": tables}
        self.grads = {"tables": np.zeros(tables.shape, dtype=np.float64)}
        self.bbox_lo = np.zeros(3)
        self.bbox_hi = np.ones(3)
        # cell geometry (hash indices + bilinear weights) depends only on the
        # positions and the box, so repeated encodes of a frozen canonical
        # field reuse it; keyed by content hash, safe under any aliasing
        self._geometry = OrderedDict()

    @property
    def out_dim(self) -> int:
        return 3 * self.levels * self.features

    def zero_grad(self):
        self.grads["tables"][:] = 0.0

    def set_bbox(self, lo, hi) -> None:
        self.bbox_lo = np.asarray(lo, dtype=np.float64)
        self.bbox_hi = np.asarray(hi, dtype=np.float64)
        if np.any(self.bbox_hi <= self.bbox_lo):
            raise DimensionMismatchError("encoder bbox must have positive extent")
        self._geometry.clear()

    def _hash(self, ix: np.ndarray, iy: np.ndarray) -> np.ndarray:
        h = (ix.astype(np.uint64) * HASH_PRIMES[0]) ^ (iy.astype(np.uint64) * HASH_PRIMES[1])
        return (h % np.uint64(self.table_size)).astype(np.int64)

    def _prepare(self, p: np.ndarray):
        key = hashlib.blake2b(p.tobytes(), digest_size=16).digest()
        hit = self._geometry.get(key)
        if hit is not None:
            self._geometry.move_to_end(key)
            return hit
        span = self.bbox_hi - self.bbox_lo
        raw = (p - self.bbox_lo) / span
        norm = np.clip(raw, 0.0, 1.0)
        inside = (raw > 0.0) & (raw < 1.0)  # clamped axes get zero gradient
        cells = []
        for pi, (ax, ay) in enumerate(_PLANES):
            for lvl, res in enumerate(self.resolutions):
                sx = norm[:, ax] * res
                sy = norm[:, ay] * res
                cx = np.floor(sx)
                cy = np.floor(sy)
                fx = sx - cx
                fy = sy - cy
                ix = cx.astype(np.int64)
                iy = cy.astype(np.int64)
                idx = np.stack(
                    [
                        self._hash(ix, iy),
                        self._hash(ix + 1, iy),
                        self._hash(ix, iy + 1),
                        self._hash(ix + 1, iy + 1),
                    ],
                    axis=1,
                )  # (N, 4)
                w = np.stack(
                    [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1
                )  # (N, 4)
                cells.append((pi, lvl, res, ax, ay, idx, fx, fy, w))
        geom = (cells, inside, span, p.shape[0])
        self._geometry[key] = geom
        if len(self._geometry) > _GEOM_CACHE_SIZE:
            self._geometry.popitem(last=False)
        return geom

    def encode(self, positions: np.ndarray):
        """(N, 3) world positions -> (N, 3 * levels * features), plus ctx."""
        p = np.asarray(positions, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] != 3:
            raise DimensionMismatchError("positions must be (N, 3)")
        cells, inside, span, n = self._prepare(p)
        tables = self.params["tables"].astype(np.float64)
        out = np.empty((n, self.out_dim))
        gathered = []
        col = 0
        for pi, lvl, res, ax, ay, idx, fx, fy, w in cells:
            t = tables[pi, lvl][idx]  # (N, 4, F)
            out[:, col : col + self.features] = np.einsum("nk,nkf->nf", w, t)
            gathered.append(t)
            col += self.features
        return out, (cells, gathered, inside, span, n)

    def backward(self, ctx, d_out: np.ndarray) -> np.ndarray:
        """Accumulate table gradients; return d positions (N, 3)."""
        cells, gathered, inside, span, n = ctx
        d_pos = np.zeros((n, 3))
        g_tables = self.grads["tables"]
        col = 0
        for (pi, lvl, res, ax, ay, idx, fx, fy, w), t in zip(cells, gathered):
            g = d_out[:, col : col + self.features]  # (N, F)
            contrib = w[:, :, None] * g[:, None, :]  # (N, 4, F)
            flat = g_tables[pi, lvl].reshape(-1, self.features)
            np.add.at(flat, idx.reshape(-1), contrib.reshape(-1, self.features))
            # bilinear derivative w.r.t. in-cell fractions, chained to world units
            gdot = np.einsum("nkf,nf->nk", t, g)  # (N, 4)
            d_fx = (gdot[:, 1] - gdot[:, 0]) * (1 - fy) + (gdot[:, 3] - gdot[:, 2]) * fy
            d_fy = (gdot[:, 2] - gdot[:, 0]) * (1 - fx) + (gdot[:, 3] - gdot[:, 1]) * fx
            d_pos[:, ax] += d_fx * res * inside[:, ax] / span[ax]
            d_pos[:, ay] += d_fy * res * inside[:, ay] / span[ay]
            col += self.features
        return d_pos


class AttentionGate:
    """Region-aware gating: gate(hash features) in [0,1]^D times the condition."""

    def __init__(self, cond_dim: int, feat_dim: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.params = {
            "W": _xavier_uniform(rng, cond_dim, feat_dim),
            "b": np.zeros(cond_dim, dtype=np.float32),
        }
        self.grads = {k: np.zeros(v.shape, dtype=np.float64) for k, v in self.params.items()}

    def zero_grad(self):
        for g in self.grads.values():
            g[:] = 0.0

    def gate_values(self, features: np.ndarray) -> np.ndarray:
        z = features @ self.params["W"].astype(np.float64).T + self.params["b"].astype(np.float64)
        return logistic(z)

    def forward(self, features: np.ndarray, condition: np.ndarray):
        """(N, Df) features, (Dc,) condition -> (N, Dc) gated copies, ctx."""
        condition = np.asarray(condition, dtype=np.float64)
        if condition.shape[0] != self.params["W"].shape[0]:
            raise DimensionMismatchError(
                f"condition has dim {condition.shape[0]}, gate expects {self.params['W'].shape[0]}"
            )
        gate = self.gate_values(features)
        return gate * condition[None, :], (features, gate, condition)

    def backward(self, ctx, d_gated: np.ndarray) -> np.ndarray:
        features, gate, condition = ctx
        d_gate = d_gated * condition[None, :]
        d_z = d_gate * gate * (1.0 - gate)
        self.grads["W"] += d_z.T @ features
        self.grads["b"] += d_z.sum(axis=0)
        return d_z @ self.params["W"].astype(np.float64)


class Dense:
    def __init__(self, out_dim: int, in_dim: int, rng=None, zero_init: bool = False):
        if zero_init:
            W = np.zeros((out_dim, in_dim), dtype=np.float32)
        else:
            W = _xavier_uniform(rng, out_dim, in_dim)
        self.params = {"W": W, "b": np.zeros(out_dim, dtype=np.float32)}
        self.grads = {k: np.zeros(v.shape, dtype=np.float64) for k, v in self.params.items()}

    def zero_grad(self):
        for g in self.grads.values():
            g[:] = 0.0

    def forward(self, x: np.ndarray):
        if x.shape[1] != self.params["W"].shape[1]:
            raise DimensionMismatchError(
                f"dense input dim {x.shape[1]} != {self.params['W'].shape[1]}"
            )
        return x @ self.params["W"].astype(np.float64).T + self.params["b"].astype(np.float64), x

    def backward(self, ctx, d_y: np.ndarray) -> np.ndarray:
        x = ctx
        self.grads["W"] += d_y.T @ x
        self.grads["b"] += d_y.sum(axis=0)
        return d_y @ self.params["W"].astype(np.float64)


@dataclass
class DeformationOffsets:
    """Per-Gaussian offsets; mouth-branch offsets carry positions only."""

    d_position: np.ndarray  # (N, 3)
    d_log_scale: np.ndarray | None = None  # (N, 3)
    d_rotation: np.ndarray | None = None  # (N, 4)

    @property
    def full(self) -> bool:
        return self.d_log_scale is not None


class BranchNetwork:
    """2x64 tanh MLP mapping [hash features (+) gated conditions] to offsets.

    The final layer is zero-initialized, so an untrained branch is the
    identity deformation.
    """

    def __init__(self, in_dim: int, *, full_offsets: bool, hidden: int = 64, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.full_offsets = full_offsets
        out_dim = 10 if full_offsets else 3
        self.layers = [
            Dense(hidden, in_dim, rng),
            Dense(hidden, hidden, rng),
            Dense(out_dim, hidden, rng=None, zero_init=True),
        ]

    def modules(self) -> dict:
        return {f"layer{i}": layer for i, layer in enumerate(self.layers)}

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def forward(self, x: np.ndarray):
        h0, c0 = self.layers[0].forward(x)
        a0 = np.tanh(h0)
        h1, c1 = self.layers[1].forward(a0)
        a1 = np.tanh(h1)
        y, c2 = self.layers[2].forward(a1)
        return self._split(y), (c0, a0, c1, a1, c2)

    def backward(self, ctx, d_offsets: DeformationOffsets) -> np.ndarray:
        c0, a0, c1, a1, c2 = ctx
        d_y = self._merge(d_offsets)
        d_a1 = self.layers[2].backward(c2, d_y)
        d_h1 = d_a1 * (1.0 - a1**2)
        d_a0 = self.layers[1].backward(c1, d_h1)
        d_h0 = d_a0 * (1.0 - a0**2)
        return self.layers[0].backward(c0, d_h0)

    def _split(self, y: np.ndarray) -> DeformationOffsets:
        if not self.full_offsets:
            return DeformationOffsets(d_position=y)
        return DeformationOffsets(
            d_position=y[:, 0:3], d_log_scale=y[:, 3:6], d_rotation=y[:, 6:10]
        )

    def _merge(self, d: DeformationOffsets) -> np.ndarray:
        if not self.full_offsets:
            return np.asarray(d.d_position, dtype=np.float64)
        return np.concatenate([d.d_position, d.d_log_scale, d.d_rotation], axis=1)
