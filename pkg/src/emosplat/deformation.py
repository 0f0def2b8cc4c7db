"""The three conditioned deformation branches.

Mouth: position offsets from (hash features (+) audio), audio ungated.
Face: position/scale/rotation offsets from (hash features (+) gated audio
(+) gated action units). Emotion: the same offset family, computed at the
face-deformed positions from (hash features (+) gated valence/arousal), and
added on top of the face offsets. Offsets apply to the unconstrained
parameters (log-scale, raw quaternion) so deformed Gaussians stay valid.

Each deform_* returns the deformed field plus a context; the matching
*_backward chains a GradientBuffer on the deformed field into canonical
parameter gradients while accumulating network/table gradients in place.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .encoders import AttentionGate, BranchNetwork, DeformationOffsets, TriPlaneHashEncoder
from .render.rasterizer import GradientBuffer
from .scene import DimensionMismatchError, GaussianField, Role, SceneError, Stage


@dataclass
class Branch:
    encoder: TriPlaneHashEncoder
    net: BranchNetwork
    gates: dict

    def zero_grad(self):
        self.encoder.zero_grad()
        self.net.zero_grad()
        for g in self.gates.values():
            g.zero_grad()


class BranchSet:
    """Encoders, gates, and manipulation networks for all three branches."""

    def __init__(self, audio_dim: int = 32, au_dim: int = 7, seed: int = 0, **encoder_kwargs):
        self.audio_dim = audio_dim
        self.au_dim = au_dim
        self.seed = seed

        def enc(k):
            return TriPlaneHashEncoder(seed=seed * 10 + k, **encoder_kwargs)

        e_m, e_f, e_e = enc(1), enc(2), enc(3)
        self.mouth = Branch(
            encoder=e_m,
            net=BranchNetwork(e_m.out_dim + audio_dim, full_offsets=False, seed=seed * 10 + 4),
            gates={},
        )
        self.face = Branch(
            encoder=e_f,
            net=BranchNetwork(e_f.out_dim + audio_dim + au_dim, full_offsets=True, seed=seed * 10 + 5),
            gates={
                "audio": AttentionGate(audio_dim, e_f.out_dim, seed=seed * 10 + 6),
                "au": AttentionGate(au_dim, e_f.out_dim, seed=seed * 10 + 7),
            },
        )
        self.emotion = Branch(
            encoder=e_e,
            net=BranchNetwork(e_e.out_dim + 2, full_offsets=True, seed=seed * 10 + 8),
            gates={"va": AttentionGate(2, e_e.out_dim, seed=seed * 10 + 9)},
        )

    def branches(self) -> dict:
        return {"mouth": self.mouth, "face": self.face, "emotion": self.emotion}

    def modules(self) -> dict:
        out = {}
        for bname, br in self.branches().items():
            out[f"{bname}.encoder"] = br.encoder
            for lname, layer in br.net.modules().items():
                out[f"{bname}.net.{lname}"] = layer
            for gname, gate in br.gates.items():
                out[f"{bname}.gate_{gname}"] = gate
        return out

    def named_params(self) -> dict:
        return {
            f"{mname}.{pname}": arr
            for mname, mod in self.modules().items()
            for pname, arr in mod.params.items()
        }

    def named_grads(self) -> dict:
        return {
            f"{mname}.{pname}": arr
            for mname, mod in self.modules().items()
            for pname, arr in mod.grads.items()
        }

    def zero_grad(self):
        for br in self.branches().values():
            br.zero_grad()


def _check_dim(vec: np.ndarray, dim: int, what: str) -> np.ndarray:
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (dim,):
        raise DimensionMismatchError(f"{what} has shape {vec.shape}, expected ({dim},)")
    return vec


def deform_mouth(branches: BranchSet, field: GaussianField, audio: np.ndarray):
    """Audio-conditioned position offsets for the inside-mouth field."""
    if field.role is not Role.INSIDE_MOUTH:
        raise SceneError("deform_mouth expects an inside-mouth field")
    audio = _check_dim(audio, branches.audio_dim, "audio features")
    br = branches.mouth
    h, ectx = br.encoder.encode(field.positions.astype(np.float64))
    x = np.concatenate([h, np.tile(audio, (len(field), 1))], axis=1)
    offsets, nctx = br.net.forward(x)
    deformed = GaussianField(
        positions=field.positions.astype(np.float64) + offsets.d_position,
        log_scales=field.log_scales,
        rotations=field.rotations,
        opacity_logits=field.opacity_logits,
        colors=field.colors,
        normal_residuals=field.normal_residuals,
        role=field.role,
        stage=Stage.DEFORMED,
    )
    return deformed, (ectx, nctx, h.shape[1])


def deform_mouth_backward(branches: BranchSet, ctx, gbuf: GradientBuffer) -> GradientBuffer:
    ectx, nctx, dh = ctx
    br = branches.mouth
    d_x = br.net.backward(nctx, DeformationOffsets(d_position=gbuf.positions))
    d_pos = br.encoder.backward(ectx, d_x[:, :dh])
    out = GradientBuffer(**{k: v.copy() for k, v in gbuf.as_dict().items()})
    out.positions = gbuf.positions + d_pos
    return out


def deform_face(branches: BranchSet, field: GaussianField, audio: np.ndarray, action_units: np.ndarray):
    """Audio- and AU-conditioned offsets for the face field (gated inputs)."""
    if field.role is not Role.FACE:
        raise SceneError("deform_face expects a face field")
    audio = _check_dim(audio, branches.audio_dim, "audio features")
    action_units = _check_dim(action_units, branches.au_dim, "action units")
    br = branches.face
    h, ectx = br.encoder.encode(field.positions.astype(np.float64))
    a_r, gctx_a = br.gates["audio"].forward(h, audio)
    u_r, gctx_u = br.gates["au"].forward(h, action_units)
    x = np.concatenate([h, a_r, u_r], axis=1)
    offsets, nctx = br.net.forward(x)
    deformed = GaussianField(
        positions=field.positions.astype(np.float64) + offsets.d_position,
        log_scales=field.log_scales.astype(np.float64) + offsets.d_log_scale,
        rotations=field.rotations.astype(np.float64) + offsets.d_rotation,
        opacity_logits=field.opacity_logits,
        colors=field.colors,
        normal_residuals=field.normal_residuals,
        role=field.role,
        stage=Stage.DEFORMED,
    )
    return deformed, (ectx, nctx, gctx_a, gctx_u, h.shape[1])


def deform_face_backward(branches: BranchSet, ctx, gbuf: GradientBuffer) -> GradientBuffer:
    ectx, nctx, gctx_a, gctx_u, dh = ctx
    br = branches.face
    d_x = br.net.backward(
        nctx,
        DeformationOffsets(
            d_position=gbuf.positions,
            d_log_scale=gbuf.log_scales,
            d_rotation=gbuf.rotations,
        ),
    )
    d_h = d_x[:, :dh].copy()
    d_h += br.gates["audio"].backward(gctx_a, d_x[:, dh : dh + branches.audio_dim])
    d_h += br.gates["au"].backward(gctx_u, d_x[:, dh + branches.audio_dim :])
    d_pos = br.encoder.backward(ectx, d_h)
    out = GradientBuffer(**{k: v.copy() for k, v in gbuf.as_dict().items()})
    out.positions = gbuf.positions + d_pos
    return out


def deform_emotion(branches: BranchSet, theta_f: GaussianField, emotion: np.ndarray):
    """Valence/arousal offsets on top of the face-deformed field.

    The encoder sees the face-deformed positions; the viewer may send edge
    values, so out-of-range inputs are clamped with a warning.
    """
    if theta_f.role is not Role.FACE:
        raise SceneError("deform_emotion expects the face-deformed field")
    emotion = _check_dim(emotion, 2, "valence/arousal")
    if np.max(np.abs(emotion)) > 1.0:
        warnings.warn("valence/arousal outside [-1, 1]; clamping", stacklevel=2)
        emotion = np.clip(emotion, -1.0, 1.0)
    br = branches.emotion
    pos_f = theta_f.positions.astype(np.float64)
    h, ectx = br.encoder.encode(pos_f)
    e_r, gctx = br.gates["va"].forward(h, emotion)
    x = np.concatenate([h, e_r], axis=1)
    offsets, nctx = br.net.forward(x)
    deformed = GaussianField(
        positions=pos_f + offsets.d_position,
        log_scales=theta_f.log_scales.astype(np.float64) + offsets.d_log_scale,
        rotations=theta_f.rotations.astype(np.float64) + offsets.d_rotation,
        opacity_logits=theta_f.opacity_logits,
        colors=theta_f.colors,
        normal_residuals=theta_f.normal_residuals,
        role=theta_f.role,
        stage=Stage.DEFORMED,
    )
    return deformed, (ectx, nctx, gctx, h.shape[1])


def deform_emotion_backward(branches: BranchSet, ctx, gbuf: GradientBuffer) -> GradientBuffer:
    """Gradients w.r.t. the face-deformed field, including the encoder's
    dependence on the deformed positions."""
    ectx, nctx, gctx, dh = ctx
    br = branches.emotion
    d_x = br.net.backward(
        nctx,
        DeformationOffsets(
            d_position=gbuf.positions,
            d_log_scale=gbuf.log_scales,
            d_rotation=gbuf.rotations,
        ),
    )
    d_h = d_x[:, :dh].copy()
    d_h += br.gates["va"].backward(gctx, d_x[:, dh:])
    d_pos = br.encoder.backward(ectx, d_h)
    out = GradientBuffer(**{k: v.copy() for k, v in gbuf.as_dict().items()})
    out.positions = gbuf.positions + d_pos
    return out
