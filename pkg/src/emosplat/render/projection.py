"""Perspective projection of 3D Gaussians (EWA affine approximation).

Forward, per Gaussian: view point x_v = W mu + t, depth = -x_v[2],
pixel mean (cx + fx*x/depth, cy - fy*y/depth), and 2D covariance
J W Sigma W^T J^T + DILATION * I with J the projection Jacobian at x_v.
The backward half of this module chains pixel-space gradients
(d mean2d, d conic, d opacity, d color, d normal_view) to gradients of the
unconstrained Gaussian parameters, including the dependence of J on x_v.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..scene import ActivatedGaussians, Camera, quat_to_rotmat

DILATION = 0.3  # isotropic 2D covariance floor, pixels^2
# Gaussian tail window: exact for q <= Q_EXACT, smoothstep to zero at Q_CUTOFF
# (q is the squared Mahalanobis distance; Q_EXACT = 9 is the 3-sigma ellipse).
Q_EXACT = 9.0
Q_CUTOFF = 12.0
DEFAULT_NEAR = 0.01
_NORMAL_EPS2 = 1e-12  # per-Gaussian safe normalization of base + dn


@dataclass
class ProjectedGaussian:
    """One Gaussian after projection (pixel space)."""

    mean2d: np.ndarray  # (2,)
    cov2d: np.ndarray  # (2, 2) SPD
    depth: float
    color: np.ndarray  # (3,)
    opacity: float
    normal_view: np.ndarray  # (3,)
    footprint: tuple  # (x0, y0, x1, y1), pixel box, half-open


@dataclass
class Projection:
    """Batched projection of a field, with everything backward needs."""

    visible: np.ndarray  # (N,) bool
    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2)
    conic: np.ndarray  # (N, 3) packed inverse covariance (a, b, c)
    depth: np.ndarray  # (N,)
    bbox: np.ndarray  # (N, 4) int32, (x0, y0, x1, y1) half-open
    normal_view: np.ndarray  # (N, 3)
    # retained intermediates
    xv: np.ndarray  # (N, 3) view-space positions
    J: np.ndarray  # (N, 2, 3)
    V: np.ndarray  # (N, 3, 3) view-space 3D covariance
    rotmats: np.ndarray  # (N, 3, 3)
    scales: np.ndarray  # (N, 3)
    min_axis: np.ndarray  # (N,) argmin scale axis
    flip: np.ndarray  # (N,) +-1 camera-facing flip
    m_raw: np.ndarray  # (N, 3) flip*base + dn before normalization
    camera: Camera


def project_field(act: ActivatedGaussians, camera: Camera, near: float = DEFAULT_NEAR) -> Projection:
    n = act.positions.shape[0]
    W = camera.rotation
    xv = act.positions @ W.T + camera.translation
    depth = -xv[:, 2]
    safe_d = np.where(depth > near, depth, 1.0)

    u = camera.cx + camera.fx * xv[:, 0] / safe_d
    v = camera.cy - camera.fy * xv[:, 1] / safe_d
    mean2d = np.stack([u, v], axis=1)

    J = np.zeros((n, 2, 3), dtype=np.float64)
    J[:, 0, 0] = camera.fx / safe_d
    J[:, 0, 2] = camera.fx * xv[:, 0] / safe_d**2
    J[:, 1, 1] = -camera.fy / safe_d
    J[:, 1, 2] = -camera.fy * xv[:, 1] / safe_d**2

    R = act.rotmats
    s2 = act.scales**2
    sigma = np.einsum("nij,nj,nkj->nik", R, s2, R)
    V = np.einsum("ij,njk,lk->nil", W, sigma, W)
    cov2d = np.einsum("nij,njk,nlk->nil", J, V, J)
    cov2d[:, 0, 0] += DILATION
    cov2d[:, 1, 1] += DILATION

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack(
        [cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det, cov2d[:, 0, 0] / det], axis=1
    )

    # conservative pixel box containing the q <= Q_CUTOFF support ellipse
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    disc = np.sqrt(np.maximum(0.25 * (cov2d[:, 0, 0] - cov2d[:, 1, 1]) ** 2 + cov2d[:, 0, 1] ** 2, 0.0))
    radius = np.sqrt(Q_CUTOFF * (mid + disc))
    x0 = np.clip(np.ceil(u - radius), 0, camera.width).astype(np.int32)
    x1 = np.clip(np.floor(u + radius) + 1, 0, camera.width).astype(np.int32)
    y0 = np.clip(np.ceil(v - radius), 0, camera.height).astype(np.int32)
    y1 = np.clip(np.floor(v + radius) + 1, 0, camera.height).astype(np.int32)
    bbox = np.stack([x0, y0, x1, y1], axis=1)
    visible = (depth > near) & (x0 < x1) & (y0 < y1)

    # camera-facing normal: rotated smallest-scale axis, flipped toward camera,
    # plus the learnable residual, normalized per Gaussian
    if n:
        min_axis = np.argmin(act.scales, axis=1)
        base = R[np.arange(n), :, min_axis]  # (N, 3) world-space column k
        to_cam = (-W.T @ camera.translation)[None, :] - act.positions
        flip = np.where(np.einsum("ni,ni->n", base, to_cam) < 0.0, -1.0, 1.0)
        m_raw = flip[:, None] * base + act.normal_residuals
        norm = np.sqrt(np.einsum("ni,ni->n", m_raw, m_raw) + _NORMAL_EPS2)
        normal_view = (m_raw / norm[:, None]) @ W.T
    else:
        min_axis = np.zeros(0, dtype=np.int64)
        flip = np.zeros(0)
        m_raw = np.zeros((0, 3))
        normal_view = np.zeros((0, 3))

    return Projection(
        visible=visible,
        mean2d=mean2d,
        cov2d=cov2d,
        conic=conic,
        depth=depth,
        bbox=bbox,
        normal_view=normal_view,
        xv=xv,
        J=J,
        V=V,
        rotmats=R,
        scales=act.scales,
        min_axis=min_axis,
        flip=flip,
        m_raw=m_raw,
        camera=camera,
    )


def project(act: ActivatedGaussians, index: int, camera: Camera, near: float = DEFAULT_NEAR):
    """Project one Gaussian of an activated field; None when culled."""
    proj = project_field(act, camera, near=near)
    if not proj.visible[index]:
        return None
    return ProjectedGaussian(
        mean2d=proj.mean2d[index],
        cov2d=proj.cov2d[index],
        depth=float(proj.depth[index]),
        color=act.colors[index],
        opacity=float(act.opacities[index]),
        normal_view=proj.normal_view[index],
        footprint=tuple(int(t) for t in proj.bbox[index]),
    )


def _rotmat_grad_to_quat(dR: np.ndarray, q_raw: np.ndarray) -> np.ndarray:
    """Chain (N,3,3) rotation gradients to raw (unnormalized) quaternions."""
    q = np.asarray(q_raw, dtype=np.float64)
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    zeros = np.zeros_like(w)

    def mat(rows):
        return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)

    dR_dw = 2 * mat([[zeros, -z, y], [z, zeros, -x], [-y, x, zeros]])
    dR_dx = 2 * mat([[zeros, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dR_dy = 2 * mat([[-2 * y, x, w], [x, zeros, z], [-w, z, -2 * y]])
    dR_dz = 2 * mat([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zeros]])
    g_hat = np.stack(
        [np.einsum("nij,nij->n", dR, d) for d in (dR_dw, dR_dx, dR_dy, dR_dz)], axis=1
    )
    # through normalization: dq = (I - qn qn^T) g_hat / |q|
    return (g_hat - qn * np.einsum("ni,ni->n", qn, g_hat)[:, None]) / norm


def projection_backward(
    proj: Projection,
    act: ActivatedGaussians,
    q_raw: np.ndarray,
    d_mean2d: np.ndarray,
    d_conic: np.ndarray,
    d_opacity: np.ndarray,
    d_color: np.ndarray,
    d_normal_view: np.ndarray,
) -> dict:
    """Map pixel-space gradients to unconstrained parameter gradients.

    Returns a dict with keys positions, log_scales, rotations, opacity_logits,
    colors, normal_residuals (float64, full field shape; culled rows zero).
    """
    n = proj.mean2d.shape[0]
    cam = proj.camera
    W = cam.rotation
    out = {
        "positions": np.zeros((n, 3)),
        "log_scales": np.zeros((n, 3)),
        "rotations": np.zeros((n, 4)),
        "opacity_logits": np.zeros(n),
        "colors": np.zeros((n, 3)),
        "normal_residuals": np.zeros((n, 3)),
    }
    vis = proj.visible
    if not np.any(vis):
        return out
    idx = np.flatnonzero(vis)
    J = proj.J[idx]
    V = proj.V[idx]
    R = proj.rotmats[idx]
    xv = proj.xv[idx]
    d = proj.depth[idx]
    scales = proj.scales[idx]

    # conic -> cov2d: P = M^-1, dL/dM = -P Gp P
    a = proj.conic[idx, 0]
    b = proj.conic[idx, 1]
    c = proj.conic[idx, 2]
    P = np.empty((idx.size, 2, 2))
    P[:, 0, 0] = a
    P[:, 0, 1] = P[:, 1, 0] = b
    P[:, 1, 1] = c
    Gp = np.empty_like(P)
    Gp[:, 0, 0] = d_conic[idx, 0]
    Gp[:, 0, 1] = Gp[:, 1, 0] = 0.5 * d_conic[idx, 1]
    Gp[:, 1, 1] = d_conic[idx, 2]
    G = -np.einsum("nij,njk,nkl->nil", P, Gp, P)

    # cov2d -> (V, J)
    dV = np.einsum("nji,njk,nkl->nil", J, G, J)
    dJ = 2.0 * np.einsum("nij,njk,nkl->nil", G, J, V)

    # J's dependence on the view-space point
    fx, fy = cam.fx, cam.fy
    x, y = xv[:, 0], xv[:, 1]
    d_xv = np.einsum("nij,ni->nj", J, d_mean2d[idx])  # mean2d rows are J rows
    d_xv[:, 0] += dJ[:, 0, 2] * fx / d**2
    d_xv[:, 1] += dJ[:, 1, 2] * (-fy / d**2)
    d_xv[:, 2] += (
        dJ[:, 0, 0] * (fx / d**2)
        + dJ[:, 0, 2] * (2.0 * fx * x / d**3)
        + dJ[:, 1, 1] * (-fy / d**2)
        + dJ[:, 1, 2] * (-2.0 * fy * y / d**3)
    )

    # V = W Sigma W^T
    dSigma = np.einsum("ji,njk,kl->nil", W, dV, W)

    # Sigma = R diag(s^2) R^T
    M3 = np.einsum("nji,njk,nkl->nil", R, dSigma, R)
    diag = np.stack([M3[:, 0, 0], M3[:, 1, 1], M3[:, 2, 2]], axis=1)
    d_log_scale = 2.0 * scales**2 * diag
    dR = 2.0 * np.einsum("nij,njk,nk->nik", dSigma, R, scales**2)

    # normal path: n_view = W * normalize(flip * R[:, k] + dn)
    g_nv = d_normal_view[idx]
    if np.any(g_nv):
        m = proj.m_raw[idx]
        norm = np.sqrt(np.einsum("ni,ni->n", m, m) + _NORMAL_EPS2)
        n_hat = m / norm[:, None]
        g_world = g_nv @ W  # W^T applied to each row
        dm = (g_world - n_hat * np.einsum("ni,ni->n", n_hat, g_world)[:, None]) / norm[:, None]
        out["normal_residuals"][idx] = dm
        k = proj.min_axis[idx]
        flip = proj.flip[idx]
        rows = np.arange(idx.size)
        dR[rows, :, k] += flip[:, None] * dm
        # flip sign depends on position only through a piecewise-constant rule

    # gather parameter gradients
    out["positions"][idx] = d_xv @ W  # W^T row-applied
    out["log_scales"][idx] = d_log_scale
    dq = _rotmat_grad_to_quat(dR, q_raw[idx])
    out["rotations"][idx] = dq
    alpha = act.opacities[idx]
    out["opacity_logits"][idx] = d_opacity[idx] * alpha * (1.0 - alpha)
    out["colors"][idx] = d_color[idx]
    return out
