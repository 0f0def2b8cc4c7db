"""Full-frame pipeline: canonical fields -> branch deformations -> layered
render -> composite, with the matching backward chain.

Two render paths exist, following the two composition arrows of the design:
the plain path composites the face layer from the audio/AU-deformed field,
the emotion path applies the valence/arousal branch on top and composites
from the emotionally deformed field. The inside-mouth layer always comes
from the audio-deformed mouth field.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compositing import LayerStack, composite_backward, composite_layers
from .deformation import (
    BranchSet,
    deform_emotion,
    deform_emotion_backward,
    deform_face,
    deform_face_backward,
    deform_mouth,
    deform_mouth_backward,
)
from .render import GradientBuffer, RenderOutput, backward, render
from .scene import Camera, FrameConditions, GaussianField


@dataclass
class TalkingHeadModel:
    mouth_canonical: GaussianField
    face_canonical: GaussianField
    branches: BranchSet

    def set_encoder_bboxes(self, pad: float = 0.05) -> None:
        """Point every branch encoder at its field's padded bounding box."""
        for branch, field in (
            (self.branches.mouth, self.mouth_canonical),
            (self.branches.face, self.face_canonical),
            (self.branches.emotion, self.face_canonical),
        ):
            lo = field.positions.min(axis=0).astype(np.float64)
            hi = field.positions.max(axis=0).astype(np.float64)
            span = np.maximum(hi - lo, 1e-6)
            branch.encoder.set_bbox(lo - pad * span, hi + pad * span)

    def head_centroid(self) -> np.ndarray:
        return self.face_canonical.positions.astype(np.float64).mean(axis=0)


@dataclass
class FrameRender:
    image: np.ndarray
    mouth_out: RenderOutput
    face_out: RenderOutput
    theta_m: GaussianField
    theta_f: GaussianField
    theta_e: GaussianField | None
    ctx_m: object
    ctx_f: object
    ctx_e: object
    comp_ctx: object
    use_emotion: bool


def render_composite(
    model: TalkingHeadModel,
    cond: FrameConditions,
    background: np.ndarray,
    *,
    emotion: np.ndarray | None = None,
    use_emotion_branch: bool = True,
    camera: Camera | None = None,
    workers: int = 1,
    retain: bool = False,
) -> FrameRender:
    camera = cond.camera if camera is None else camera
    e = cond.emotion if emotion is None else np.asarray(emotion, dtype=np.float64)
    theta_m, ctx_m = deform_mouth(model.branches, model.mouth_canonical, cond.audio)
    theta_f, ctx_f = deform_face(model.branches, model.face_canonical, cond.audio, cond.action_units)
    theta_e = ctx_e = None
    face_field = theta_f
    if use_emotion_branch:
        theta_e, ctx_e = deform_emotion(model.branches, theta_f, e)
        face_field = theta_e
    mouth_out = render(theta_m, camera, workers=workers, retain=retain)
    face_out = render(face_field, camera, workers=workers, retain=retain)
    image, comp_ctx = composite_layers(
        LayerStack(mouth=mouth_out, face=face_out, background=background), retain=retain
    )
    return FrameRender(
        image=image,
        mouth_out=mouth_out,
        face_out=face_out,
        theta_m=theta_m,
        theta_f=theta_f,
        theta_e=theta_e,
        ctx_m=ctx_m,
        ctx_f=ctx_f,
        ctx_e=ctx_e,
        comp_ctx=comp_ctx,
        use_emotion=use_emotion_branch,
    )


def composite_frame_backward(
    model: TalkingHeadModel,
    fr: FrameRender,
    d_image: np.ndarray,
    d_face_normal: np.ndarray | None = None,
) -> dict:
    """Backward through composite, both rasterizations, and all branches.

    Returns canonical-parameter GradientBuffers under "mouth" and "face";
    encoder/gate/network gradients accumulate inside model.branches (call
    branches.zero_grad() first).
    """
    d = composite_backward(fr.comp_ctx, d_image)
    gbuf_face = backward(
        fr.face_out, d_color=d["face_color"], d_alpha=d["face_alpha"], d_normal=d_face_normal
    )
    gbuf_mouth = backward(fr.mouth_out, d_color=d["mouth_color"], d_alpha=d["mouth_alpha"])
    if fr.use_emotion:
        gbuf_face = deform_emotion_backward(model.branches, fr.ctx_e, gbuf_face)
    gbuf_face = deform_face_backward(model.branches, fr.ctx_f, gbuf_face)
    gbuf_mouth = deform_mouth_backward(model.branches, fr.ctx_m, gbuf_mouth)
    return {"mouth": gbuf_mouth, "face": gbuf_face}
