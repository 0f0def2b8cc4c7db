"""Synthetic head-proxy scene with an analytic deformation oracle.

The rig builds two ground-truth canonical fields (a face shell with a mouth
opening, brow and cheek clusters; an inside-mouth cluster visible through
the opening) and drives them with closed-form rules that are linear in the
conditioning values: audio opens the jaw and lower mouth, one action unit
raises the brows and another squashes the eyes, valence lifts the mouth
corners and arousal lifts the brows. Frames, masks, normal targets, and
emotional targets are rendered with the project's own rasterizer, so the
oracle is a set of rules, never a network.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import pngio
from ..compositing import LayerStack, composite_layers
from ..metrics import VA_POINTS
from ..render import render
from ..scene import (
    Camera,
    Dataset,
    FrameConditions,
    GaussianField,
    Role,
    look_at_camera,
    rotmat_to_quat,
    save_dataset,
    save_field,
)

AUDIO_DIM = 32
AU_DIM = 7

# rule amplitudes (world units / log-scale units)
JAW_AMP = 0.05
MOUTH_AMP = 0.06
BROW_AMP = 0.04
BLINK_AMP = 0.45
SMILE_AMP = 0.05
AROUSAL_BROW_AMP = 0.045
AROUSAL_EYE_AMP = 0.3

_BROW_CENTERS = ((-0.22, 0.30, 0.42), (0.22, 0.30, 0.42))
_EYE_CENTERS = ((-0.20, 0.10, 0.47), (0.20, 0.10, 0.47))
_CORNER_CENTERS = ((-0.28, -0.30, 0.40), (0.28, -0.30, 0.40))
_JAW_CENTER = (0.0, -0.50, 0.35)


def _bump(p: np.ndarray, center, radius: float) -> np.ndarray:
    d2 = np.sum((p - np.asarray(center)) ** 2, axis=1)
    return np.exp(-d2 / radius**2)


def _pair_bump(p, centers, radius):
    return _bump(p, centers[0], radius) + _bump(p, centers[1], radius)


@dataclass
class SynthOracle:
    """Ground-truth fields plus the analytic deformation rules."""

    mouth_canonical: GaussianField
    face_canonical: GaussianField
    camera: Camera
    background: np.ndarray
    mouth_w: np.ndarray  # (Nm,) lower-mouth weight
    face_w_jaw: np.ndarray
    face_w_brow: np.ndarray
    face_w_eye: np.ndarray
    face_w_smile: np.ndarray

    def deform_mouth(self, audio: np.ndarray) -> GaussianField:
        f = self.mouth_canonical
        pos = f.positions.astype(np.float64)
        pos = pos + np.stack([np.zeros_like(self.mouth_w), -MOUTH_AMP * audio[0] * self.mouth_w,
                              np.zeros_like(self.mouth_w)], axis=1)
        return GaussianField(pos, f.log_scales, f.rotations, f.opacity_logits, f.colors,
                             f.normal_residuals, f.role, "deformed")

    def deform_face(self, audio: np.ndarray, au: np.ndarray) -> GaussianField:
        f = self.face_canonical
        pos = f.positions.astype(np.float64)
        dy = -JAW_AMP * audio[0] * self.face_w_jaw + BROW_AMP * au[0] * self.face_w_brow
        pos = pos + np.stack([np.zeros_like(dy), dy, np.zeros_like(dy)], axis=1)
        ls = f.log_scales.astype(np.float64)
        ls = ls + np.stack(
            [np.zeros_like(dy), -BLINK_AMP * au[1] * self.face_w_eye, np.zeros_like(dy)], axis=1
        )
        return GaussianField(pos, ls, f.rotations, f.opacity_logits, f.colors,
                             f.normal_residuals, f.role, "deformed")

    def apply_emotion(self, theta_f: GaussianField, e: np.ndarray) -> GaussianField:
        v, ar = float(e[0]), float(e[1])
        dy = SMILE_AMP * v * self.face_w_smile + AROUSAL_BROW_AMP * ar * self.face_w_brow
        pos = theta_f.positions.astype(np.float64)
        pos = pos + np.stack([np.zeros_like(dy), dy, np.zeros_like(dy)], axis=1)
        ls = theta_f.log_scales.astype(np.float64)
        ls = ls + np.stack(
            [np.zeros_like(dy), AROUSAL_EYE_AMP * ar * self.face_w_eye, np.zeros_like(dy)], axis=1
        )
        return GaussianField(pos, ls, theta_f.rotations, theta_f.opacity_logits, theta_f.colors,
                             theta_f.normal_residuals, theta_f.role, "deformed")

    def render_layers(self, audio, au, e, camera: Camera | None = None):
        camera = self.camera if camera is None else camera
        mouth = render(self.deform_mouth(audio), camera)
        face = render(self.apply_emotion(self.deform_face(audio, au), e), camera)
        return mouth, face

    def render_frame(self, audio, au, e, camera: Camera | None = None) -> np.ndarray:
        mouth, face = self.render_layers(audio, au, e, camera)
        image, _ = composite_layers(LayerStack(mouth=mouth, face=face, background=self.background))
        return image


def _fibonacci_sphere(count: int) -> np.ndarray:
    i = np.arange(count) + 0.5
    phi = np.arccos(1 - 2 * i / count)
    theta = np.pi * (1 + 5**0.5) * i
    return np.stack(
        [np.sin(phi) * np.cos(theta), np.cos(phi), np.sin(phi) * np.sin(theta)], axis=1
    )


def _build_face_field(rng: np.random.Generator, count: int) -> GaussianField:
    semi = np.array([0.55, 0.70, 0.50])
    pts = _fibonacci_sphere(int(count * 3.2)) * semi
    # front hemisphere only: everything the field owns stays visible, so the
    # masked training targets are a fixed point of the canonical stage
    keep = pts[:, 2] > 0.0
    # mouth opening: clear shell points so the inside-mouth layer shows
    # through; generous margins keep the face's alpha fringe off the teeth
    hole = (np.abs(pts[:, 0]) < 0.30) & (pts[:, 1] > -0.56) & (pts[:, 1] < -0.06) & (pts[:, 2] > 0.1)
    pts = pts[keep & ~hole][:count]
    n = pts.shape[0]
    normals = pts / semi**2
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    quats = np.empty((n, 4))
    for i in range(n):
        nz = normals[i]
        t1 = np.cross(nz, [0.0, 1.0, 0.0])
        if np.linalg.norm(t1) < 1e-6:
            t1 = np.cross(nz, [1.0, 0.0, 0.0])
        t1 /= np.linalg.norm(t1)
        t2 = np.cross(nz, t1)
        quats[i] = rotmat_to_quat(np.stack([t1, t2, nz], axis=1))
    log_scales = np.tile(np.log([0.05, 0.05, 0.022]), (n, 1))
    log_scales += rng.uniform(-0.08, 0.08, log_scales.shape)
    base = np.array([0.80, 0.62, 0.52])
    colors = np.clip(
        base[None, :]
        + 0.10 * np.sin(3.0 * pts[:, [0]])
        + 0.06 * np.cos(4.0 * pts[:, [1]])
        + rng.uniform(-0.03, 0.03, (n, 3)),
        0.05,
        0.95,
    )
    brow = _pair_bump(pts, _BROW_CENTERS, 0.16) > 0.35
    colors[brow] = np.array([0.35, 0.22, 0.15])
    return GaussianField(
        positions=pts,
        log_scales=log_scales,
        rotations=quats,
        opacity_logits=np.full(n, 3.0) + rng.uniform(-0.2, 0.2, n),
        colors=colors,
        normal_residuals=np.zeros((n, 3)),
        role=Role.FACE,
    )


def _build_mouth_field(rng: np.random.Generator, count: int) -> GaussianField:
    gx = int(np.ceil(count / 4))
    xs = np.linspace(-0.08, 0.08, gx)
    rows = []
    # the two bands are depth-separated well beyond any init jitter, so their
    # compositing order (and thus the blended color) is stable; everything
    # stays inside the opening's clear zone
    for band, (y0, z0, color) in enumerate(
        ((-0.20, 0.32, (0.85, 0.82, 0.78)), (-0.30, 0.26, (0.45, 0.12, 0.12)))
    ):
        for yy in (y0, y0 - 0.03):
            for xx in xs:
                rows.append((xx, yy, z0, *color))
    rows = np.array(rows[:count])
    n = rows.shape[0]
    pts = rows[:, 0:3] + rng.uniform(-0.006, 0.006, (n, 3))
    colors = np.clip(rows[:, 3:6] + rng.uniform(-0.04, 0.04, (n, 3)), 0.02, 0.98)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return GaussianField(
        positions=pts,
        log_scales=np.tile(np.log([0.032, 0.028, 0.025]), (n, 1)) + rng.uniform(-0.05, 0.05, (n, 3)),
        rotations=quats,
        opacity_logits=np.full(n, 3.4) + rng.uniform(-0.2, 0.2, n),
        colors=colors,
        normal_residuals=np.zeros((n, 3)),
        role=Role.INSIDE_MOUTH,
    )


def _background(size: int) -> np.ndarray:
    # dark backdrop: the masked-frame training targets then match bare layer
    # renders almost exactly even where the layer alpha tapers off
    v = np.linspace(0.02, 0.06, size)[:, None]
    bg = np.zeros((size, size, 3))
    bg[:, :, 0] = v * 0.6
    bg[:, :, 1] = v * 0.8
    bg[:, :, 2] = v
    return bg


def _conditions(t: int, frames: int) -> tuple:
    """Deterministic condition signals. Two of every three frames are exactly
    neutral, so the best static fit to the frame set is the neutral scene
    itself (the pixelwise median); the remaining frames sweep the condition
    space for branch training. Frame 0 is always neutral."""
    a = np.zeros(AUDIO_DIM)
    u = np.zeros(AU_DIM)
    e = np.zeros(2)
    if t % 3 == 2:
        w = 2 * np.pi * t / frames
        a[0] = 0.7 * np.sin(2 * w)
        a[1] = 0.4 * np.sin(3 * w)  # decoy: no rule listens to it
        u[0] = 0.6 * np.sin(w)
        u[1] = 0.4 * np.sin(5 * w)
        e[:] = (0.15 * np.sin(w), 0.15 * np.sin(2 * w))
    return a, u, e


def synth_dataset(
    seed: int,
    out_dir=None,
    frames: int = 24,
    size: int = 64,
    face_count: int = 260,
    mouth_count: int = 36,
    emotional_ref_frames: tuple = (0,),
    va_points=None,
):
    """Build the synthetic rig; optionally write the dataset layout.

    Returns (Dataset, SynthOracle). With a fixed seed the written files are
    byte-identical across runs.
    """
    rng = np.random.default_rng(seed)
    face = _build_face_field(rng, face_count)
    mouth = _build_mouth_field(rng, mouth_count)
    camera = look_at_camera(
        (0.0, 0.0, 2.2), (0.0, 0.0, 0.0), fx=60.0, fy=60.0,
        cx=size / 2, cy=size / 2, width=size, height=size,
    )
    fpos = face.positions.astype(np.float64)
    oracle = SynthOracle(
        mouth_canonical=mouth,
        face_canonical=face,
        camera=camera,
        background=_background(size),
        mouth_w=0.3 + 0.7 * (mouth.positions[:, 1] < -0.25),
        face_w_jaw=_bump(fpos, _JAW_CENTER, 0.35),
        face_w_brow=_pair_bump(fpos, _BROW_CENTERS, 0.22),
        face_w_eye=_pair_bump(fpos, _EYE_CENTERS, 0.15),
        face_w_smile=_pair_bump(fpos, _CORNER_CENTERS, 0.18),
    )

    frames_list, conds, fmasks, mmasks, ntargets = [], [], [], [], []
    for t in range(frames):
        a, u, e = _conditions(t, frames)
        mouth_out, face_out = oracle.render_layers(a, u, e)
        image, _ = composite_layers(
            LayerStack(mouth=mouth_out, face=face_out, background=oracle.background)
        )
        # masked pixels must be attributable to a single layer: the mouth
        # mask needs a clear opening, the face mask drops half-covered pixels
        # that mix in bright inside-mouth content
        fa, ma = face_out.alpha, mouth_out.alpha
        fmask = ((fa > 0.15) & ((fa > 0.95) | (ma < 0.02))).astype(np.float64)
        mmask = ((ma > 0.15) & (fa < 0.05)).astype(np.float64)
        frames_list.append(image)
        conds.append(FrameConditions(audio=a, action_units=u, emotion=e, camera=camera))
        fmasks.append(fmask)
        mmasks.append(mmask)
        ntargets.append(face_out.normal * fmask[:, :, None])

    emotional = []
    points = VA_POINTS if va_points is None else va_points
    for ref in emotional_ref_frames:
        a, u, _ = _conditions(ref, frames)
        for v, ar in points:
            img = oracle.render_frame(a, u, np.array([v, ar]))
            emotional.append((ref, np.array([v, ar]), img))

    ds = Dataset(
        frames=frames_list,
        conditions=conds,
        face_masks=fmasks,
        mouth_masks=mmasks,
        normal_targets=ntargets,
        background=oracle.background,
        emotional_targets=emotional,
    )
    if out_dir is not None:
        save_dataset(ds, out_dir)
        save_field(mouth, pngio.ensure_dir(out_dir) / "gt_mouth.field")
        save_field(face, pngio.ensure_dir(out_dir) / "gt_face.field")
    return ds, oracle


class OracleSyncEmbedder:
    """Sync embedder whose audio side embeds the oracle's own render of the
    window, so the loss bottoms out exactly at a faithful reconstruction.
    Part of the closed-loop fixture; not a shipping component."""

    def __init__(self, base, oracle: SynthOracle, layer: str):
        self.base = base
        self.oracle = oracle
        self.layer = layer  # "mouth" or "face"
        self._cache = {}

    def embed_images(self, frames):
        return self.base.embed_images(frames)

    def embed_images_backward(self, frames, d_vec):
        return self.base.embed_images_backward(frames, d_vec)

    def embed_audio(self, audio_window: np.ndarray) -> np.ndarray:
        key = np.asarray(audio_window).tobytes()
        if key not in self._cache:
            zeros_u = np.zeros(AU_DIM)
            zeros_e = np.zeros(2)
            imgs = []
            for a in np.asarray(audio_window):
                if self.layer == "mouth":
                    imgs.append(render(self.oracle.deform_mouth(a), self.oracle.camera).color)
                else:
                    imgs.append(
                        render(
                            self.oracle.apply_emotion(self.oracle.deform_face(a, zeros_u), zeros_e),
                            self.oracle.camera,
                        ).color
                    )
            self._cache[key] = self.base.embed_images(imgs)
        return self._cache[key]
