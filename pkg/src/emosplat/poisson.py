"""Emotional-data compositing: landmark-driven boxes, cut-and-paste, and
Poisson seamless cloning via conjugate gradients.

The clone solves, per channel, the discrete Poisson equation
Delta f = div grad(source) on the clone region with Dirichlet boundary
values taken from the destination (5-point Laplacian). The region must stay
one pixel away from the image border so every pixel has four neighbors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import DimensionMismatchError

DEFAULT_TOL = 1e-6
REGION_TAGS = ("left-eye", "right-eye", "mouth")


class CloneError(Exception):
    pass


class NonConvergenceError(CloneError):
    def __init__(self, residual: float, iterations: int):
        super().__init__(f"CG did not converge in {iterations} iterations (residual {residual:.3e})")
        self.residual = residual
        self.iterations = iterations


@dataclass(frozen=True)
class RegionBox:
    """Inclusive pixel rectangle around one expressive region."""

    x0: int
    y0: int
    x1: int
    y1: int
    tag: str = "mouth"

    def __post_init__(self):
        if self.x1 <= self.x0 or self.y1 <= self.y0:
            raise ValueError(f"degenerate box {(self.x0, self.y0, self.x1, self.y1)}")

    def slices(self) -> tuple:
        return slice(self.y0, self.y1 + 1), slice(self.x0, self.x1 + 1)


def region_boxes(landmarks: dict, margin: int, image_shape) -> list:
    """Tight per-region bounding boxes dilated by `margin`.

    Boxes are clamped to the 1-pixel solver-interior ring of the image.
    """
    h, w = image_shape[:2]
    boxes = []
    for tag, pts in landmarks.items():
        pts = np.asarray(pts, dtype=np.float64)
        if pts.size == 0:
            raise ValueError(f"region {tag!r} has no landmarks")
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise DimensionMismatchError("landmarks must be (K, 2) arrays of (x, y)")
        x0 = int(np.clip(np.floor(pts[:, 0].min()) - margin, 1, w - 2))
        x1 = int(np.clip(np.ceil(pts[:, 0].max()) + margin, 1, w - 2))
        y0 = int(np.clip(np.floor(pts[:, 1].min()) - margin, 1, h - 2))
        y1 = int(np.clip(np.ceil(pts[:, 1].max()) + margin, 1, h - 2))
        boxes.append(RegionBox(x0, y0, x1, y1, tag))
    return boxes


def boxes_to_mask(boxes, image_shape) -> np.ndarray:
    mask = np.zeros(image_shape[:2], dtype=bool)
    for b in boxes:
        mask[b.slices()] = True
    return mask


def cut_paste(source: np.ndarray, destination: np.ndarray, boxes) -> np.ndarray:
    """Replace destination pixels inside any box with source pixels."""
    if source.shape != destination.shape:
        raise DimensionMismatchError("cut_paste source/destination shapes differ")
    out = destination.copy()
    for b in boxes:
        ys, xs = b.slices()
        out[ys, xs] = source[ys, xs]
    return out


@dataclass
class CloneProblem:
    """Source gradients inside the mask, destination values on its boundary."""

    source: np.ndarray
    destination: np.ndarray
    mask: np.ndarray  # bool (H, W), strictly interior

    def __post_init__(self):
        if self.source.shape != self.destination.shape:
            raise DimensionMismatchError("clone source/destination shapes differ")
        self.mask = np.asarray(self.mask) > 0.5
        if self.mask.shape != self.source.shape[:2]:
            raise DimensionMismatchError("mask resolution mismatch")
        if not self.mask.any():
            raise CloneError("empty clone mask")
        if self.mask[0, :].any() or self.mask[-1, :].any() or self.mask[:, 0].any() or self.mask[:, -1].any():
            raise CloneError("clone mask must keep a 1-pixel margin from the border")


def _build_system(problem: CloneProblem):
    """Index maps and per-pixel neighbor links for the masked Laplacian."""
    mask = problem.mask
    h, w = mask.shape
    idx = -np.ones((h, w), dtype=np.int64)
    ys, xs = np.nonzero(mask)
    k = ys.size
    idx[ys, xs] = np.arange(k)
    neighbors = np.stack(
        [idx[ys - 1, xs], idx[ys + 1, xs], idx[ys, xs - 1], idx[ys, xs + 1]], axis=1
    )  # (K, 4), -1 where the neighbor is outside the region
    return ys, xs, neighbors


def _apply_laplacian(x: np.ndarray, neighbors: np.ndarray) -> np.ndarray:
    y = 4.0 * x
    for d in range(4):
        nb = neighbors[:, d]
        inside = nb >= 0
        y[inside] -= x[nb[inside]]
    return y


def _rhs(problem: CloneProblem, ys, xs, neighbors, channel) -> np.ndarray:
    src = problem.source[:, :, channel] if problem.source.ndim == 3 else problem.source
    dst = problem.destination[:, :, channel] if problem.destination.ndim == 3 else problem.destination
    b = 4.0 * src[ys, xs] - src[ys - 1, xs] - src[ys + 1, xs] - src[ys, xs - 1] - src[ys, xs + 1]
    offsets = ((-1, 0), (1, 0), (0, -1), (0, 1))
    for d, (dy, dx) in enumerate(offsets):
        outside = neighbors[:, d] < 0
        b[outside] += dst[ys[outside] + dy, xs[outside] + dx]
    return b


def _pcg(neighbors, b, x0, tol, max_iters):
    """Jacobi-preconditioned conjugate gradients on the SPD masked Laplacian.

    Stops when the infinity norm of the true residual drops below tol.
    """
    x = x0.copy()
    r = b - _apply_laplacian(x, neighbors)
    z = r / 4.0
    p = z.copy()
    rz = float(r @ z)
    it = 0
    while it < max_iters:
        if np.max(np.abs(r)) < tol:
            # trust but verify: the recurrence residual can drift
            r = b - _apply_laplacian(x, neighbors)
            if np.max(np.abs(r)) < tol:
                return x, it
            z = r / 4.0
            p = z.copy()
            rz = float(r @ z)
        ap = _apply_laplacian(p, neighbors)
        alpha = rz / float(p @ ap)
        x += alpha * p
        r -= alpha * ap
        z = r / 4.0
        rz_new = float(r @ z)
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
    residual = float(np.max(np.abs(b - _apply_laplacian(x, neighbors))))
    if residual < tol:
        return x, it
    raise NonConvergenceError(residual, it)


def seamless_clone(problem: CloneProblem, tol: float = DEFAULT_TOL, max_iters: int | None = None) -> np.ndarray:
    """Blend source content into destination over the mask; pixels outside
    the mask are bit-identical to the destination."""
    ys, xs, neighbors = _build_system(problem)
    k = ys.size
    if max_iters is None:
        max_iters = int(10 * np.sqrt(k) * 10)
    out = problem.destination.copy()
    channels = problem.source.shape[2] if problem.source.ndim == 3 else 1
    for c in range(channels):
        b = _rhs(problem, ys, xs, neighbors, c)
        dst = problem.destination[:, :, c] if problem.destination.ndim == 3 else problem.destination
        x, _ = _pcg(neighbors, b, dst[ys, xs].astype(np.float64), tol, max_iters)
        if problem.destination.ndim == 3:
            out[ys, xs, c] = x
        else:
            out[ys, xs] = x
    return out


def clone_residual(problem: CloneProblem, solution: np.ndarray) -> float:
    """Post-hoc certificate: infinity norm of A f - b over all channels."""
    ys, xs, neighbors = _build_system(problem)
    worst = 0.0
    channels = problem.source.shape[2] if problem.source.ndim == 3 else 1
    for c in range(channels):
        b = _rhs(problem, ys, xs, neighbors, c)
        f = solution[ys, xs, c] if solution.ndim == 3 else solution[ys, xs]
        worst = max(worst, float(np.max(np.abs(_apply_laplacian(f.astype(np.float64), neighbors) - b))))
    return worst


def gauss_seidel_clone(problem: CloneProblem, sweeps: int) -> np.ndarray:
    """Slow reference solver kept for tests only."""
    ys, xs, neighbors = _build_system(problem)
    out = problem.destination.copy()
    channels = problem.source.shape[2] if problem.source.ndim == 3 else 1
    for c in range(channels):
        b = _rhs(problem, ys, xs, neighbors, c)
        dst = problem.destination[:, :, c] if problem.destination.ndim == 3 else problem.destination
        x = dst[ys, xs].astype(np.float64)
        for _ in range(sweeps):
            for i in range(x.size):
                acc = b[i]
                for d in range(4):
                    nb = neighbors[i, d]
                    if nb >= 0:
                        acc += x[nb]
                x[i] = acc / 4.0
        if problem.destination.ndim == 3:
            out[ys, xs, c] = x
        else:
            out[ys, xs] = x
    return out


def augment_frame(source_frame: np.ndarray, emotional_frame: np.ndarray, landmarks: dict,
                  margin: int = 4, tol: float = DEFAULT_TOL) -> np.ndarray:
    """Build one emotional training target: expressive regions of the
    generated frame seamlessly cloned onto the source frame."""
    if source_frame.shape != emotional_frame.shape:
        raise DimensionMismatchError("frame shapes differ")
    boxes = region_boxes(landmarks, margin, source_frame.shape)
    mask = boxes_to_mask(boxes, source_frame.shape)
    problem = CloneProblem(source=emotional_frame, destination=source_frame, mask=mask)
    return seamless_clone(problem, tol=tol)
