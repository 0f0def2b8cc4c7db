"""Evaluation metrics: image quality, landmark distance, and the
valence/arousal protocol (RMSE, sign agreement, top-3 label accuracy)."""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from .scene import DimensionMismatchError

# The 12 evaluation points on the valence/arousal circle: eight at radius
# 0.8 every 45 degrees, four at radius 0.5 every 90 degrees, with their
# predefined emotion labels.
VA_POINTS_OUTER = [
    (0.74, 0.31),
    (0.31, 0.74),
    (-0.31, 0.74),
    (-0.74, 0.31),
    (-0.74, -0.31),
    (-0.31, -0.74),
    (0.31, -0.74),
    (0.74, -0.31),
]
VA_POINTS_INNER = [
    (0.35, 0.35),
    (-0.35, 0.35),
    (-0.35, -0.35),
    (0.35, -0.35),
]
VA_POINTS = VA_POINTS_OUTER + VA_POINTS_INNER

VA_LABELS = {
    (0.74, 0.31): "Happy",
    (0.31, 0.74): "Surprise",
    (-0.31, 0.74): "Angry",
    (-0.74, 0.31): "Disgust",
    (-0.74, -0.31): "Sad",
    (-0.31, -0.74): "Sad",
    (0.31, -0.74): "Contempt",
    (0.74, -0.31): "Contempt",
    (0.35, 0.35): "Happy",
    (-0.35, 0.35): "Angry",
    (-0.35, -0.35): "Sad",
    (0.35, -0.35): "Contempt",
}

EMOTION_CLASSES = ["Neutral", "Happy", "Sad", "Surprise", "Fear", "Disgust", "Angry", "Contempt"]


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """10*log10(1/MSE) for images in [0, 1]; +inf when identical."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionMismatchError(f"shape mismatch: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def masked_psnr(pred: np.ndarray, target: np.ndarray, mask: np.ndarray) -> float:
    """PSNR over mask-selected pixels only."""
    sel = np.asarray(mask) > 0.5
    if not np.any(sel):
        raise ValueError("empty mask")
    p = np.asarray(pred, dtype=np.float64)[sel]
    t = np.asarray(target, dtype=np.float64)[sel]
    mse = float(np.mean((p - t) ** 2))
    return float("inf") if mse == 0.0 else 10.0 * np.log10(1.0 / mse)


def landmark_distance(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean Euclidean distance between matched landmark sets (pixels)."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise DimensionMismatchError("landmark arrays differ in shape")
    return float(np.mean(np.linalg.norm(pred - target, axis=-1)))


@dataclass
class VARecord:
    """Predicted vs target valence/arousal for one frame, with an optional
    predicted emotion-label ranking (most likely first)."""

    pred: np.ndarray  # (2,)
    target: np.ndarray  # (2,)
    label_ranking: list = dc_field(default_factory=list)

    def __post_init__(self):
        self.pred = np.asarray(self.pred, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64)
        if self.pred.shape != (2,) or self.target.shape != (2,):
            raise DimensionMismatchError("VA records hold (valence, arousal) pairs")
        if np.max(np.abs(self.pred)) > 1.0 or np.max(np.abs(self.target)) > 1.0:
            raise ValueError("valence/arousal values must lie in [-1, 1]")


_COMPONENTS = {"valence": 0, "arousal": 1, 0: 0, 1: 1}


def _component_arrays(records, component):
    if not records:
        raise ValueError("empty VA record list")
    c = _COMPONENTS[component]
    pred = np.array([r.pred[c] for r in records])
    true = np.array([r.target[c] for r in records])
    return pred, true


def va_rmse(records, component) -> float:
    """sqrt(mean (pred - true)^2) over frames, one VA component."""
    pred, true = _component_arrays(records, component)
    return float(np.sqrt(np.mean((pred - true) ** 2)))


def _sign(x: np.ndarray) -> np.ndarray:
    return np.sign(x)  # 1 positive, -1 negative, 0 zero


def sign_agreement(records, component) -> float:
    """Fraction of frames whose predicted and target component share a sign."""
    pred, true = _component_arrays(records, component)
    return float(np.mean(_sign(pred) == _sign(true)))


def _lookup_label(target: np.ndarray, table: dict) -> str:
    for (v, a), label in table.items():
        if abs(target[0] - v) < 1e-6 and abs(target[1] - a) < 1e-6:
            return label
    raise KeyError(f"target VA point {tuple(target)} is not in the label table")


def top3_accuracy(records, label_table: dict | None = None) -> float:
    """Fraction of records whose true label appears in the top-3 ranking."""
    if not records:
        raise ValueError("empty VA record list")
    table = VA_LABELS if label_table is None else label_table
    hits = 0
    for r in records:
        if not r.label_ranking:
            raise ValueError("record without a label ranking")
        if _lookup_label(r.target, table) in r.label_ranking[:3]:
            hits += 1
    return hits / len(records)
