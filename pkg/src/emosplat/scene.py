"""Domain types shared by every stage of the pipeline.

A Gaussian field stores unconstrained parameters (log-scale, opacity logit,
free quaternion) as float32 struct-of-arrays; activation maps them into the
valid set, so optimizer steps can never produce an invalid Gaussian. All
numerical work happens in float64 on the activated values.

Camera convention (fixed here because the source data never states one):
right-handed view frame, +x right, +y up, camera looking down -z. A world
point X maps to view coordinates x_v = R @ X + t and its depth is -x_v[2];
points in front of the camera have positive depth. Pixel sample locations
are the integer grid (u right, v down), u = cx + fx*x/depth,
v = cy - fy*y/depth.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field as dc_field
from enum import Enum
from pathlib import Path

import numpy as np

from . import pngio


class SceneError(Exception):
    """Base class for scene/domain errors."""


class DegenerateRotationError(SceneError):
    """A quaternion with zero norm cannot define a rotation."""


class MalformedHeaderError(SceneError):
    """A serialized file has a bad magic string or header fields."""


class DimensionMismatchError(SceneError):
    """Array shapes or header dimensions disagree."""


class TruncatedFileError(SceneError):
    """A serialized file ends before its declared payload."""


class Role(str, Enum):
    INSIDE_MOUTH = "inside-mouth"
    FACE = "face"


class Stage(str, Enum):
    CANONICAL = "canonical"
    DEFORMED = "deformed"


# ---------------------------------------------------------------------------
# quaternion / covariance math
# ---------------------------------------------------------------------------


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Normalize (..., 4) quaternions; zero norm is a degenerate rotation."""
    q = np.asarray(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norms == 0.0):
        raise DegenerateRotationError("quaternion with zero norm")
    return q / norms


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) from quaternions (..., 4), (w, x, y, z).

    Quaternions are normalized internally, so q and -q give the same matrix.
    """
    qn = normalize_quaternions(q)
    w, x, y, z = qn[..., 0], qn[..., 1], qn[..., 2], qn[..., 3]
    R = np.empty(qn.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for a single 3x3 rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    t = np.trace(R)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = np.array([(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s])
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = np.array([(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = np.array([(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s])
    return q / np.linalg.norm(q)


def build_covariance(log_scale: np.ndarray, q: np.ndarray) -> np.ndarray:
    """World-space covariance Sigma = R diag(s^2) R^T with s = exp(log_scale).

    Accepts a single record or batched (..., 3) / (..., 4) inputs.
    """
    s2 = np.exp(2.0 * np.asarray(log_scale, dtype=np.float64))
    R = quat_to_rotmat(q)
    return np.einsum("...ij,...j,...kj->...ik", R, s2, R)


def logistic(x: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# ---------------------------------------------------------------------------
# Gaussian fields
# ---------------------------------------------------------------------------

_PARAM_FIELDS = ("positions", "log_scales", "rotations", "opacity_logits", "colors", "normal_residuals")


@dataclass
class GaussianField:
    """Struct-of-arrays Gaussian parameters plus the field's layer role.

    positions (N,3), log_scales (N,3), rotations (N,4) wxyz, opacity_logits
    (N,), colors (N,3) linear RGB, normal_residuals (N,3). All float32.
    Inside-mouth fields carry no normal residual; theirs must stay zero.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    normal_residuals: np.ndarray
    role: Role
    stage: Stage = Stage.CANONICAL

    def __post_init__(self):
        self.role = Role(self.role)
        self.stage = Stage(self.stage)
        for name in _PARAM_FIELDS:
            arr = np.ascontiguousarray(getattr(self, name))
            # float32 is the canonical storage; transient deformed fields may
            # carry float64 so per-frame offsets stay smooth for gradients
            if arr.dtype != np.float64:
                arr = arr.astype(np.float32)
            setattr(self, name, arr)
        n = self.positions.shape[0]
        expected = {
            "positions": (n, 3),
            "log_scales": (n, 3),
            "rotations": (n, 4),
            "opacity_logits": (n,),
            "colors": (n, 3),
            "normal_residuals": (n, 3),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DimensionMismatchError(
                    f"{name} has shape {getattr(self, name).shape}, expected {shape}"
                )
        if self.role is Role.INSIDE_MOUTH and n and np.any(self.normal_residuals != 0):
            raise DimensionMismatchError("inside-mouth fields carry no normal residual")

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def has_normal_residual(self) -> bool:
        return self.role is Role.FACE

    def copy(self) -> "GaussianField":
        return GaussianField(
            self.positions.copy(),
            self.log_scales.copy(),
            self.rotations.copy(),
            self.opacity_logits.copy(),
            self.colors.copy(),
            self.normal_residuals.copy(),
            self.role,
            self.stage,
        )

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in _PARAM_FIELDS}

    @staticmethod
    def empty(role: Role) -> "GaussianField":
        z = np.zeros((0, 3), np.float32)
        return GaussianField(z, z.copy(), np.zeros((0, 4), np.float32), np.zeros((0,), np.float32), z.copy(), z.copy(), role)


@dataclass
class ActivatedGaussians:
    """Float64 view of a field after activation: s = exp(log_scale),
    alpha = logistic(opacity_logit), R = rotmat(q / |q|)."""

    positions: np.ndarray  # (N, 3)
    scales: np.ndarray  # (N, 3), > 0
    rotmats: np.ndarray  # (N, 3, 3)
    opacities: np.ndarray  # (N,), in (0, 1)
    colors: np.ndarray  # (N, 3)
    normal_residuals: np.ndarray  # (N, 3)
    role: Role


def activate(field: GaussianField) -> ActivatedGaussians:
    """Map unconstrained parameters to the valid set. Deterministic."""
    return ActivatedGaussians(
        positions=field.positions.astype(np.float64),
        scales=np.exp(field.log_scales.astype(np.float64)),
        rotmats=quat_to_rotmat(field.rotations) if len(field) else np.zeros((0, 3, 3)),
        opacities=logistic(field.opacity_logits),
        colors=field.colors.astype(np.float64),
        normal_residuals=field.normal_residuals.astype(np.float64),
        role=field.role,
    )


# ---------------------------------------------------------------------------
# cameras and frame conditions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # (3, 3) world-to-view, orthonormal
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise DimensionMismatchError("camera pose shapes must be (3,3) and (3,)")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise SceneError("camera rotation is not orthonormal within 1e-6")
        if self.width < 1 or self.height < 1:
            raise SceneError("camera resolution must be at least 1x1")

    def to_json(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_json(obj: dict) -> "Camera":
        return Camera(
            fx=float(obj["fx"]),
            fy=float(obj["fy"]),
            cx=float(obj["cx"]),
            cy=float(obj["cy"]),
            rotation=np.asarray(obj["rotation"], dtype=np.float64),
            translation=np.asarray(obj["translation"], dtype=np.float64),
            width=int(obj["width"]),
            height=int(obj["height"]),
        )


def look_at_camera(eye, target, fx, fy, cx, cy, width, height, up=(0.0, 1.0, 0.0)) -> Camera:
    """Camera at `eye` looking toward `target` (view -z axis points at it)."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    z_axis = -fwd  # camera looks down -z
    x_axis = np.cross(np.asarray(up, dtype=np.float64), z_axis)
    x_axis = x_axis / np.linalg.norm(x_axis)
    y_axis = np.cross(z_axis, x_axis)
    R = np.stack([x_axis, y_axis, z_axis])  # world-to-view rows
    t = -R @ eye
    return Camera(fx, fy, cx, cy, R, t, width, height)


def orbit_camera(center, radius, yaw, pitch, fx, fy, cx, cy, width, height) -> Camera:
    """Orbit around `center`: yaw about +y, pitch about the orbit's x axis.

    yaw = pitch = 0 places the camera on the +z side looking back at center.
    Angles in radians.
    """
    cp, sp = np.cos(pitch), np.sin(pitch)
    cyaw, syaw = np.cos(yaw), np.sin(yaw)
    offset = radius * np.array([syaw * cp, sp, cyaw * cp])
    return look_at_camera(np.asarray(center, dtype=np.float64) + offset, center, fx, fy, cx, cy, width, height)


@dataclass(frozen=True)
class FrameConditions:
    """Per-frame conditioning: audio features, action units, valence/arousal."""

    audio: np.ndarray  # (D_a,)
    action_units: np.ndarray  # (D_u,)
    emotion: np.ndarray  # (2,), each in [-1, 1]
    camera: Camera

    def __post_init__(self):
        object.__setattr__(self, "audio", np.asarray(self.audio, dtype=np.float64))
        object.__setattr__(self, "action_units", np.asarray(self.action_units, dtype=np.float64))
        object.__setattr__(self, "emotion", np.asarray(self.emotion, dtype=np.float64))
        if self.audio.ndim != 1 or self.action_units.ndim != 1 or self.emotion.shape != (2,):
            raise DimensionMismatchError("condition vectors have wrong shapes")
        if np.max(np.abs(self.emotion)) > 1.0 + 1e-12:
            raise SceneError("valence/arousal must lie in [-1, 1]")

    def to_json(self) -> dict:
        return {
            "a": self.audio.tolist(),
            "u": self.action_units.tolist(),
            "e": self.emotion.tolist(),
            "camera": self.camera.to_json(),
        }

    @staticmethod
    def from_json(obj: dict) -> "FrameConditions":
        return FrameConditions(
            audio=np.asarray(obj["a"], dtype=np.float64),
            action_units=np.asarray(obj["u"], dtype=np.float64),
            emotion=np.asarray(obj["e"], dtype=np.float64),
            camera=Camera.from_json(obj["camera"]),
        )


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    """Training inputs: frames, conditions, masks, normal targets, background.

    All images share one resolution; per-pixel face and mouth masks are
    disjoint. `emotional_targets` is a list of (index, e, image) tuples and
    may be empty.
    """

    frames: list
    conditions: list
    face_masks: list
    mouth_masks: list
    normal_targets: list
    background: np.ndarray
    emotional_targets: list = dc_field(default_factory=list)

    def __post_init__(self):
        n = len(self.frames)
        for name in ("conditions", "face_masks", "mouth_masks", "normal_targets"):
            if len(getattr(self, name)) != n:
                raise DimensionMismatchError(f"{name} has {len(getattr(self, name))} entries, expected {n}")
        shape = self.background.shape[:2]
        for i in range(n):
            for img in (self.frames[i], self.face_masks[i], self.mouth_masks[i], self.normal_targets[i]):
                if img.shape[:2] != shape:
                    raise DimensionMismatchError("all dataset images must share one resolution")
            if np.any(self.face_masks[i] * self.mouth_masks[i] != 0):
                raise SceneError(f"face and mouth masks overlap in frame {i}")
        dims = self.condition_dims
        for c in self.conditions:
            if c.audio.shape[0] != dims[0] or c.action_units.shape[0] != dims[1]:
                raise DimensionMismatchError("condition vector dimensions differ between frames")

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.background.shape[0], self.background.shape[1]

    @property
    def condition_dims(self) -> tuple[int, int, int]:
        if not self.conditions:
            return (0, 0, 2)
        c = self.conditions[0]
        return (c.audio.shape[0], c.action_units.shape[0], 2)


# ---------------------------------------------------------------------------
# field serialization: magic "SPLATF1\n", header {count: u64, role: u8},
# then per Gaussian 17 little-endian float32 values
# (mu x3, log_scale x3, q x4, opacity_logit, color x3, dn x3).
# ---------------------------------------------------------------------------

FIELD_MAGIC = b"SPLATF1\n"
_ROLE_CODES = {Role.INSIDE_MOUTH: 0, Role.FACE: 1}
_CODE_ROLES = {v: k for k, v in _ROLE_CODES.items()}
_RECORD_FLOATS = 17


def save_field(field: GaussianField, path) -> None:
    n = len(field)
    rec = np.empty((n, _RECORD_FLOATS), dtype="<f4")
    rec[:, 0:3] = field.positions
    rec[:, 3:6] = field.log_scales
    rec[:, 6:10] = field.rotations
    rec[:, 10] = field.opacity_logits
    rec[:, 11:14] = field.colors
    rec[:, 14:17] = field.normal_residuals
    with open(path, "wb") as f:
        f.write(FIELD_MAGIC)
        f.write(struct.pack("<QB", n, _ROLE_CODES[field.role]))
        f.write(rec.tobytes())


def load_field(path) -> GaussianField:
    data = Path(path).read_bytes()
    if len(data) < len(FIELD_MAGIC) + 9:
        raise MalformedHeaderError(f"{path}: too short for a field header")
    if data[: len(FIELD_MAGIC)] != FIELD_MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic")
    count, role_code = struct.unpack_from("<QB", data, len(FIELD_MAGIC))
    if role_code not in _CODE_ROLES:
        raise MalformedHeaderError(f"{path}: unknown role code {role_code}")
    payload = data[len(FIELD_MAGIC) + 9 :]
    expected = count * _RECORD_FLOATS * 4
    if len(payload) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} payload bytes, found {len(payload)}")
    if len(payload) > expected:
        raise MalformedHeaderError(f"{path}: {len(payload) - expected} trailing bytes")
    rec = np.frombuffer(payload, dtype="<f4").reshape(count, _RECORD_FLOATS)
    return GaussianField(
        positions=rec[:, 0:3],
        log_scales=rec[:, 3:6],
        rotations=rec[:, 6:10],
        opacity_logits=rec[:, 10],
        colors=rec[:, 11:14],
        normal_residuals=rec[:, 14:17],
        role=_CODE_ROLES[role_code],
    )


# ---------------------------------------------------------------------------
# dataset directory layout:
#   frames/%05d.png masks_face/%05d.png masks_mouth/%05d.png normals/%05d.png
#   conditions.jsonl background.png emotional/%03d_v{v}_a{a}.png
# ---------------------------------------------------------------------------

_EMOTIONAL_RE = re.compile(r"^(\d{3})_v(-?\d+\.\d+)_a(-?\d+\.\d+)\.png$")


def emotional_target_name(index: int, e) -> str:
    return f"{index:03d}_v{e[0]:.2f}_a{e[1]:.2f}.png"


def save_dataset(ds: Dataset, path) -> None:
    root = pngio.ensure_dir(path)
    for sub in ("frames", "masks_face", "masks_mouth", "normals"):
        pngio.ensure_dir(root / sub)
    for i in range(len(ds)):
        pngio.write_color(root / "frames" / f"{i:05d}.png", ds.frames[i])
        pngio.write_mask(root / "masks_face" / f"{i:05d}.png", ds.face_masks[i])
        pngio.write_mask(root / "masks_mouth" / f"{i:05d}.png", ds.mouth_masks[i])
        pngio.write_normals(root / "normals" / f"{i:05d}.png", ds.normal_targets[i])
    pngio.write_color(root / "background.png", ds.background)
    with open(root / "conditions.jsonl", "w") as f:
        for c in ds.conditions:
            f.write(json.dumps(c.to_json()) + "\n")
    if ds.emotional_targets:
        pngio.ensure_dir(root / "emotional")
        for idx, e, img in ds.emotional_targets:
            pngio.write_color(root / "emotional" / emotional_target_name(idx, e), img)


def load_dataset(path) -> Dataset:
    root = Path(path)
    cond_path = root / "conditions.jsonl"
    if not cond_path.exists():
        raise MalformedHeaderError(f"{root}: missing conditions.jsonl")
    conditions = []
    with open(cond_path) as f:
        for line_no, line in enumerate(f):
            if not line.strip():
                continue
            try:
                conditions.append(FrameConditions.from_json(json.loads(line)))
            except (KeyError, ValueError) as exc:
                raise MalformedHeaderError(f"{cond_path}:{line_no + 1}: bad record ({exc})") from exc
    frame_paths = sorted((root / "frames").glob("*.png"))
    if len(frame_paths) != len(conditions):
        raise DimensionMismatchError(
            f"{root}: {len(frame_paths)} frames but {len(conditions)} condition records"
        )
    frames, fmasks, mmasks, normals = [], [], [], []
    for p in frame_paths:
        frames.append(pngio.read_color(p))
        fmasks.append(pngio.read_mask(root / "masks_face" / p.name))
        mmasks.append(pngio.read_mask(root / "masks_mouth" / p.name))
        # Normal targets are masked: zero outside the face region.
        normals.append(pngio.read_normals(root / "normals" / p.name) * fmasks[-1][:, :, None])
    emotional = []
    emo_dir = root / "emotional"
    if emo_dir.is_dir():
        for p in sorted(emo_dir.glob("*.png")):
            m = _EMOTIONAL_RE.match(p.name)
            if m is None:
                raise MalformedHeaderError(f"{p}: emotional target name not in %03d_v{{v}}_a{{a}}.png form")
            e = np.array([float(m.group(2)), float(m.group(3))])
            emotional.append((int(m.group(1)), e, pngio.read_color(p)))
    return Dataset(
        frames=frames,
        conditions=conditions,
        face_masks=fmasks,
        mouth_masks=mmasks,
        normal_targets=normals,
        background=pngio.read_color(root / "background.png"),
        emotional_targets=emotional,
    )
