"""PNG input/output with the project's image conventions.

Images live in memory as float64 arrays in [0, 1], linear RGB. 8-bit color
PNGs are decoded with gamma 2.2 at ingestion; masks and normal maps are
stored without gamma. Normal maps use the pixel = (n + 1) / 2 encoding.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

GAMMA = 2.2

# Pinned encoder settings so identical buffers always produce identical bytes.
_PNG_SAVE_KWARGS = {"format": "PNG", "compress_level": 6, "optimize": False}


def _to_u8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def read_raw(path) -> np.ndarray:
    """Read a PNG as float64 in [0, 1] without gamma handling."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB") if im.mode not in ("L", "RGB") else im)
    return arr.astype(np.float64) / 255.0


def write_raw(path, arr: np.ndarray) -> None:
    """Write float [0, 1] data to PNG without gamma handling."""
    u8 = _to_u8(arr)
    mode = "L" if u8.ndim == 2 else "RGB"
    Image.fromarray(u8, mode=mode).save(str(path), **_PNG_SAVE_KWARGS)


def read_color(path) -> np.ndarray:
    """Read an 8-bit color PNG into linear RGB (gamma 2.2 decode)."""
    raw = read_raw(path)
    if raw.ndim == 2:
        raw = np.repeat(raw[:, :, None], 3, axis=2)
    return raw**GAMMA


def write_color(path, linear: np.ndarray) -> None:
    """Write a linear-RGB buffer as an 8-bit PNG (gamma 2.2 encode)."""
    write_raw(path, np.clip(linear, 0.0, 1.0) ** (1.0 / GAMMA))


def encode_color_bytes(linear: np.ndarray) -> bytes:
    """PNG-encode a linear-RGB buffer in memory (service responses)."""
    buf = io.BytesIO()
    Image.fromarray(_to_u8(np.clip(linear, 0.0, 1.0) ** (1.0 / GAMMA)), mode="RGB").save(
        buf, **_PNG_SAVE_KWARGS
    )
    return buf.getvalue()


def read_mask(path) -> np.ndarray:
    """Read a binary mask PNG as float64 in {0, 1} (threshold at 0.5)."""
    raw = read_raw(path)
    if raw.ndim == 3:
        raw = raw[:, :, 0]
    return (raw > 0.5).astype(np.float64)


def write_mask(path, mask: np.ndarray) -> None:
    write_raw(path, (np.asarray(mask) > 0.5).astype(np.float64))


def read_normals(path) -> np.ndarray:
    """Decode an RGB-encoded normal map, n = 2 * pixel - 1."""
    return 2.0 * read_raw(path) - 1.0


def write_normals(path, normals: np.ndarray) -> None:
    write_raw(path, (np.asarray(normals) + 1.0) / 2.0)


def quantize_color(linear: np.ndarray) -> np.ndarray:
    """Round-trip a linear buffer through the 8-bit PNG representation."""
    return (_to_u8(np.clip(linear, 0.0, 1.0) ** (1.0 / GAMMA)).astype(np.float64) / 255.0) ** GAMMA


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
