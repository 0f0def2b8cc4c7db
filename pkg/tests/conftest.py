"""Shared fixtures: kernel warmup, gradcheck scene generators, and the
central-finite-difference comparator used across the gradient suites."""

from __future__ import annotations

import numpy as np
import pytest

from emosplat.render import kernels
from emosplat.scene import GaussianField, Role, look_at_camera


@pytest.fixture(scope="session", autouse=True)
def _warmup_kernels():
    kernels.warmup()


def make_camera(size=32, fx=40.0, eye=(0.05, 0.08, 2.5)):
    return look_at_camera(
        eye, (0.0, 0.0, 0.0), fx=fx, fy=fx * 0.95, cx=size / 2, cy=size / 2,
        width=size, height=size,
    )


def make_gradcheck_field(seed, n=6, role=Role.FACE, dtype=np.float64):
    """Random scene kept away from every non-smooth boundary of the forward
    pass: distinct depths (sorting), distinct per-Gaussian scales (axis
    selection), opacities in (0.1, 0.45) (no early-out, no saturation), and
    normals away from the camera-facing flip boundary."""
    rng = np.random.default_rng(seed)
    cam = make_camera()
    for _ in range(500):
        positions = rng.normal(0, 0.22, (n, 3))
        # construct well-separated depths and per-Gaussian distinct scales
        positions[:, 2] = np.linspace(-0.5, 0.5, n) + rng.uniform(-0.03, 0.03, n)
        base = rng.uniform(-2.3, -1.8, (n, 1))
        offsets = np.stack([rng.permutation([-0.35, 0.0, 0.35]) for _ in range(n)])
        log_scales = base + offsets + rng.uniform(-0.05, 0.05, (n, 3))
        rotations = rng.normal(0, 1, (n, 4))
        norms = np.linalg.norm(rotations, axis=1)
        if np.min(norms) < 0.3:
            continue
        field = GaussianField(
            positions=positions.astype(dtype),
            log_scales=log_scales.astype(dtype),
            rotations=rotations.astype(dtype),
            opacity_logits=rng.uniform(-2.0, -0.2, n).astype(dtype),
            colors=rng.uniform(0.2, 0.9, (n, 3)).astype(dtype),
            normal_residuals=(
                rng.normal(0, 0.08, (n, 3)) if role is Role.FACE else np.zeros((n, 3))
            ).astype(dtype),
            role=role,
        )
        # flip-boundary margin: base normal not near-perpendicular to view dir
        from emosplat.render.projection import project_field
        from emosplat.scene import activate

        act = activate(field)
        proj = project_field(act, cam)
        base = act.rotmats[np.arange(n), :, np.argmin(act.scales, axis=1)]
        to_cam = (-cam.rotation.T @ cam.translation)[None, :] - act.positions
        dots = np.einsum("ni,ni->n", base, to_cam / np.linalg.norm(to_cam, axis=1, keepdims=True))
        if np.min(np.abs(dots)) < 0.05:
            continue
        if not np.all(proj.visible):
            continue
        return field, cam
    raise RuntimeError("could not build a gradcheck scene; adjust guards")


def fd_gradcheck(loss_fn, tensors: dict, analytic: dict, *, h=1e-4, rtol=1e-3, atol=1e-6,
                 samples=None, rng=None):
    """Compare analytic gradients against central finite differences.

    tensors maps name -> the parameter array perturbed in place; analytic
    maps name -> the gradient array. With `samples`, only that many entries
    per tensor are checked (preferring entries with nonzero analytic
    gradient). The difference quotient divides by the actually realized step
    so float32 parameter storage costs no accuracy.
    """
    failures = []
    rng = np.random.default_rng(0) if rng is None else rng
    for name, arr in tensors.items():
        flat = arr.reshape(-1)
        ga = np.asarray(analytic[name]).reshape(-1)
        idx = np.arange(flat.size)
        if samples is not None and flat.size > samples:
            nz = np.flatnonzero(np.abs(ga) > 1e-12)
            take = list(nz[rng.permutation(nz.size)[: max(samples - 2, 1)]])
            zeros = np.setdiff1d(idx, nz)
            if zeros.size:
                take += list(zeros[rng.permutation(zeros.size)[: samples - len(take)]])
            idx = np.array(sorted(set(int(i) for i in take)))
        for i in idx:
            orig = flat[i].copy()
            hi = np.array(orig + h, dtype=flat.dtype)
            lo = np.array(orig - h, dtype=flat.dtype)
            flat[i] = hi
            lp = loss_fn()
            flat[i] = lo
            lm = loss_fn()
            flat[i] = orig
            step = float(hi) - float(lo)
            fd = (lp - lm) / step
            an = float(ga[i])
            err = abs(fd - an)
            ok = err <= atol if max(abs(fd), abs(an)) <= 1e-6 else err <= rtol * max(abs(fd), abs(an))
            if not ok:
                failures.append(f"{name}[{i}]: fd={fd:.6e} analytic={an:.6e} err={err:.2e}")
    assert not failures, "gradient mismatches:\n" + "\n".join(failures[:20])
