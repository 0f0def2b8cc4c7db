"""Layered composition: inside-mouth over background, then face on top.

The renderer emits premultiplied color, so the straight-color blends

    C_mouth-bg = C_mouth * A_mouth + C_background * (1 - A_mouth)
    I_hat      = C_face * C_mouth-bg-weighting ...

reduce to C_premult + (1 - A) * under. That form is used here: it is
algebraically identical wherever A > 0, equals the background exactly where
A = 0 (the renderer guarantees zero premultiplied color there), and stays
continuously differentiable, which a divide-by-alpha straight conversion
with an epsilon fallback would not.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .render.rasterizer import RenderOutput
from .scene import DimensionMismatchError


@dataclass
class LayerStack:
    """The three layers of one frame; all share a resolution."""

    mouth: RenderOutput
    face: RenderOutput
    background: np.ndarray

    def __post_init__(self):
        shape = self.background.shape[:2]
        if self.mouth.alpha.shape != shape or self.face.alpha.shape != shape:
            raise DimensionMismatchError("layer resolutions differ")


def _check_res(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[:2] != b.shape[:2]:
        raise DimensionMismatchError(f"resolution mismatch: {a.shape[:2]} vs {b.shape[:2]}")


def blend_mouth_background(mouth: RenderOutput, background: np.ndarray) -> np.ndarray:
    """Inside-mouth layer over the provided background."""
    _check_res(mouth.alpha, background)
    return mouth.color + (1.0 - mouth.alpha)[:, :, None] * background


def blend_face(face: RenderOutput, under: np.ndarray) -> np.ndarray:
    """Face layer over the mouth/background blend."""
    _check_res(face.alpha, under)
    return face.color + (1.0 - face.alpha)[:, :, None] * under


@dataclass
class CompositeContext:
    mouth_alpha: np.ndarray
    face_alpha: np.ndarray
    mouth_bg: np.ndarray  # C_mouth-bg, needed for d/dA_face
    background: np.ndarray


def composite_layers(stack: LayerStack, retain: bool = False):
    """Full composition; returns (image, ctx or None)."""
    mouth_bg = blend_mouth_background(stack.mouth, stack.background)
    image = blend_face(stack.face, mouth_bg)
    ctx = None
    if retain:
        ctx = CompositeContext(
            mouth_alpha=stack.mouth.alpha,
            face_alpha=stack.face.alpha,
            mouth_bg=mouth_bg,
            background=stack.background,
        )
    return image, ctx


def composite_backward(ctx: CompositeContext, d_image: np.ndarray) -> dict:
    """Gradients of the composite w.r.t. both layers' color and alpha maps."""
    one_minus_face = (1.0 - ctx.face_alpha)[:, :, None]
    d_face_color = d_image
    d_face_alpha = -np.einsum("hwc,hwc->hw", d_image, ctx.mouth_bg)
    d_under = d_image * one_minus_face
    d_mouth_color = d_under
    d_mouth_alpha = -np.einsum("hwc,hwc->hw", d_under, ctx.background)
    return {
        "face_color": d_face_color,
        "face_alpha": d_face_alpha,
        "mouth_color": d_mouth_color,
        "mouth_alpha": d_mouth_alpha,
    }


def apply_mask(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Pixel-wise product; outside-mask pixels become zero."""
    _check_res(image, mask)
    if image.ndim == 3:
        return image * mask[:, :, None]
    return image * mask
