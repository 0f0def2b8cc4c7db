"""Tile-level compositing kernels (numba, nogil, IEEE-strict).

One forward/backward call handles one 16x16 tile and touches only that
tile's pixels, so tiles can run on a thread pool with bit-reproducible
results for any worker count. The backward kernel accumulates into
tile-local gradient buffers indexed by position in the tile's contributor
list; the caller reduces those into per-Gaussian slots in fixed tile order.

The Gaussian tail is windowed: exact exp(-q/2) for q <= Q_EXACT, multiplied
by a C1 smoothstep that reaches zero at Q_CUTOFF. This makes the rendered
image continuously differentiable at the footprint boundary, which the
finite-difference gradient contract relies on.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

from .projection import Q_CUTOFF, Q_EXACT

TILE = 16
EARLY_OUT_T = 1e-4
_ALPHA_SKIP = 1e-14


@njit(cache=True, nogil=True, inline="always")
def _window(q):
    if q <= Q_EXACT:
        return 1.0
    t = (Q_CUTOFF - q) / (Q_CUTOFF - Q_EXACT)
    return t * t * (3.0 - 2.0 * t)


@njit(cache=True, nogil=True, inline="always")
def _window_deriv(q):
    if q <= Q_EXACT:
        return 0.0
    t = (Q_CUTOFF - q) / (Q_CUTOFF - Q_EXACT)
    return -(6.0 * t - 6.0 * t * t) / (Q_CUTOFF - Q_EXACT)


@njit(cache=True, nogil=True)
def forward_tile(
    ids,
    mean2d,
    conic,
    opacity,
    color,
    normal,
    x0,
    y0,
    x1,
    y1,
    out_color,
    out_alpha,
    out_normal,
    out_final_t,
    out_consumed,
):
    """Composite one tile front-to-back per Eqs. of point-based rendering."""
    for py in range(y0, y1):
        for px in range(x0, x1):
            t = 1.0
            cr = 0.0
            cg = 0.0
            cb = 0.0
            acc_a = 0.0
            nx = 0.0
            ny = 0.0
            nz = 0.0
            consumed = ids.shape[0]
            for j in range(ids.shape[0]):
                g = ids[j]
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                if q >= Q_CUTOFF:
                    continue
                at = opacity[g] * math.exp(-0.5 * q) * _window(q)
                if at < _ALPHA_SKIP:
                    continue
                w = at * t
                cr += color[g, 0] * w
                cg += color[g, 1] * w
                cb += color[g, 2] * w
                acc_a += w
                nx += normal[g, 0] * w
                ny += normal[g, 1] * w
                nz += normal[g, 2] * w
                t *= 1.0 - at
                if t < EARLY_OUT_T:
                    consumed = j + 1
                    break
            out_color[py, px, 0] = cr
            out_color[py, px, 1] = cg
            out_color[py, px, 2] = cb
            out_alpha[py, px] = acc_a
            out_normal[py, px, 0] = nx
            out_normal[py, px, 1] = ny
            out_normal[py, px, 2] = nz
            out_final_t[py, px] = t
            out_consumed[py, px] = consumed


@njit(cache=True, nogil=True)
def backward_tile(
    ids,
    mean2d,
    conic,
    opacity,
    color,
    normal,
    x0,
    y0,
    x1,
    y1,
    consumed,
    d_color,
    d_alpha,
    d_normal,
    g_mean2d,
    g_conic,
    g_opacity,
    g_color,
    g_normal,
):
    """Gradients for one tile into tile-local buffers (one row per list entry).

    Two passes per pixel: front-to-back recomputes each contribution and the
    transmittance in front of it; back-to-front walks suffix accumulators so
    no division by (1 - alpha) is ever needed (alpha = 1 is legal).
    """
    k = ids.shape[0]
    at_buf = np.empty(k)
    t_buf = np.empty(k)
    q_buf = np.empty(k)
    for py in range(y0, y1):
        for px in range(x0, x1):
            nc = consumed[py, px]
            t = 1.0
            for j in range(nc):
                g = ids[j]
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                q = conic[g, 0] * dx * dx + 2.0 * conic[g, 1] * dx * dy + conic[g, 2] * dy * dy
                if q >= Q_CUTOFF:
                    at_buf[j] = 0.0
                    continue
                at = opacity[g] * math.exp(-0.5 * q) * _window(q)
                if at < _ALPHA_SKIP:
                    at_buf[j] = 0.0
                    continue
                at_buf[j] = at
                q_buf[j] = q
                t_buf[j] = t
                t *= 1.0 - at

            gcr = d_color[py, px, 0]
            gcg = d_color[py, px, 1]
            gcb = d_color[py, px, 2]
            ga = d_alpha[py, px]
            gnx = d_normal[py, px, 0]
            gny = d_normal[py, px, 1]
            gnz = d_normal[py, px, 2]
            if gcr == 0.0 and gcg == 0.0 and gcb == 0.0 and ga == 0.0 and gnx == 0.0 and gny == 0.0 and gnz == 0.0:
                continue
            # suffix accumulators: weighted attribute of everything behind j,
            # with transmittance factors starting just after j
            u_cr = 0.0
            u_cg = 0.0
            u_cb = 0.0
            u_a = 0.0
            u_nx = 0.0
            u_ny = 0.0
            u_nz = 0.0
            for j in range(nc - 1, -1, -1):
                at = at_buf[j]
                if at == 0.0:
                    continue
                g = ids[j]
                tb = t_buf[j]
                q = q_buf[j]
                w = at * tb
                g_color[j, 0] += gcr * w
                g_color[j, 1] += gcg * w
                g_color[j, 2] += gcb * w
                g_normal[j, 0] += gnx * w
                g_normal[j, 1] += gny * w
                g_normal[j, 2] += gnz * w
                d_at = tb * (
                    gcr * (color[g, 0] - u_cr)
                    + gcg * (color[g, 1] - u_cg)
                    + gcb * (color[g, 2] - u_cb)
                    + ga * (1.0 - u_a)
                    + gnx * (normal[g, 0] - u_nx)
                    + gny * (normal[g, 1] - u_ny)
                    + gnz * (normal[g, 2] - u_nz)
                )
                u_cr = color[g, 0] * at + (1.0 - at) * u_cr
                u_cg = color[g, 1] * at + (1.0 - at) * u_cg
                u_cb = color[g, 2] * at + (1.0 - at) * u_cb
                u_a = at + (1.0 - at) * u_a
                u_nx = normal[g, 0] * at + (1.0 - at) * u_nx
                u_ny = normal[g, 1] * at + (1.0 - at) * u_ny
                u_nz = normal[g, 2] * at + (1.0 - at) * u_nz

                gval = math.exp(-0.5 * q)
                d_gq = gval * (_window_deriv(q) - 0.5 * _window(q))
                g_opacity[j] += d_at * gval * _window(q)
                d_q = d_at * opacity[g] * d_gq
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                g_conic[j, 0] += d_q * dx * dx
                g_conic[j, 1] += d_q * 2.0 * dx * dy
                g_conic[j, 2] += d_q * dy * dy
                g_mean2d[j, 0] += d_q * (-2.0 * conic[g, 0] * dx - 2.0 * conic[g, 1] * dy)
                g_mean2d[j, 1] += d_q * (-2.0 * conic[g, 1] * dx - 2.0 * conic[g, 2] * dy)


def warmup():
    """Trigger JIT compilation with a tiny scene (first call is slow)."""
    ids = np.zeros(1, dtype=np.int64)
    mean2d = np.zeros((1, 2))
    conic = np.tile(np.array([1.0, 0.0, 1.0]), (1, 1))
    one = np.full(1, 0.5)
    col = np.full((1, 3), 0.5)
    img = np.zeros((2, 2, 3))
    alpha = np.zeros((2, 2))
    fin = np.zeros((2, 2))
    cons = np.zeros((2, 2), dtype=np.int32)
    forward_tile(ids, mean2d, conic, one, col, col, 0, 0, 2, 2, img, alpha, img.copy(), fin, cons)
    backward_tile(
        ids, mean2d, conic, one, col, col, 0, 0, 2, 2, cons,
        img, alpha, img, np.zeros((1, 2)), np.zeros((1, 3)), np.zeros(1),
        np.zeros((1, 3)), np.zeros((1, 3)),
    )
