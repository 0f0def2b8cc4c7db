"""Training losses and their gradients w.r.t. rendered buffers.

Includes the per-stage weight families (canonical gamma, branch beta,
emotion kappa, border eta, generator lambda) with the published defaults,
and a weighted-total assembler the trainer and the acceptance suite share.
Pretrained feature networks never ship here: the perceptual (LPIPS-slot)
and lip-sync losses accept any implementation of the small interfaces at
the bottom; the defaults are deterministic random-projection features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .scene import DimensionMismatchError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def _check_same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shape mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# L1
# ---------------------------------------------------------------------------


def l1(pred: np.ndarray, target: np.ndarray) -> float:
    _check_same_shape(pred, target)
    return float(np.mean(np.abs(pred - target)))


def l1_grad(pred: np.ndarray, target: np.ndarray):
    _check_same_shape(pred, target)
    diff = pred - target
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


# ---------------------------------------------------------------------------
# D-SSIM: (1 - SSIM) / 2, 11x11 Gaussian window sigma 1.5, valid region only
# ---------------------------------------------------------------------------


def _gauss_kernel() -> np.ndarray:
    r = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2
    k = np.exp(-(r**2) / (2 * SSIM_SIGMA**2))
    return k / k.sum()


_KERNEL = _gauss_kernel()
_PAD = (SSIM_WINDOW - 1) // 2


def _filt_valid(img: np.ndarray) -> np.ndarray:
    out = correlate1d(img, _KERNEL, axis=0, mode="constant")
    out = correlate1d(out, _KERNEL, axis=1, mode="constant")
    return out[_PAD:-_PAD, _PAD:-_PAD]


def _spread(valid: np.ndarray, shape) -> np.ndarray:
    full = np.zeros(shape)
    full[_PAD:-_PAD, _PAD:-_PAD] = valid
    full = correlate1d(full, _KERNEL, axis=0, mode="constant")
    return correlate1d(full, _KERNEL, axis=1, mode="constant")


def _ssim_channel(x: np.ndarray, y: np.ndarray, with_grad: bool):
    m1 = _filt_valid(x)
    n1 = _filt_valid(y)
    m2 = _filt_valid(x * x)
    n2 = _filt_valid(y * y)
    m11 = _filt_valid(x * y)
    a1 = 2 * m1 * n1 + SSIM_C1
    a2 = 2 * (m11 - m1 * n1) + SSIM_C2
    b1 = m1**2 + n1**2 + SSIM_C1
    b2 = (m2 - m1**2) + (n2 - n1**2) + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    if not with_grad:
        return s, None

    s_a1 = a2 / (b1 * b2)
    s_a2 = a1 / (b1 * b2)
    s_b1 = -s / b1
    s_b2 = -s / b2
    ds_dm1 = 2 * n1 * (s_a1 - s_a2) + 2 * m1 * (s_b1 - s_b2)
    ds_dm2 = s_b2
    ds_dm11 = 2 * s_a2

    def grad(d_s_valid):
        g = _spread(d_s_valid * ds_dm1, x.shape)
        g += 2 * x * _spread(d_s_valid * ds_dm2, x.shape)
        g += y * _spread(d_s_valid * ds_dm11, x.shape)
        return g

    return s, grad


def ssim(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean SSIM over channels, fully-inside (valid) windows only."""
    _check_same_shape(pred, target)
    if pred.shape[0] < SSIM_WINDOW or pred.shape[1] < SSIM_WINDOW:
        raise DimensionMismatchError("image smaller than the SSIM window")
    chans = pred.shape[2] if pred.ndim == 3 else 1
    p = pred.reshape(pred.shape[0], pred.shape[1], chans)
    t = target.reshape(p.shape)
    vals = [np.mean(_ssim_channel(p[:, :, c], t[:, :, c], False)[0]) for c in range(chans)]
    return float(np.mean(vals))


def d_ssim(pred: np.ndarray, target: np.ndarray) -> float:
    return (1.0 - ssim(pred, target)) / 2.0


def d_ssim_grad(pred: np.ndarray, target: np.ndarray):
    _check_same_shape(pred, target)
    chans = pred.shape[2] if pred.ndim == 3 else 1
    p = pred.reshape(pred.shape[0], pred.shape[1], chans)
    t = target.reshape(p.shape)
    grad = np.zeros_like(p)
    total = 0.0
    for c in range(chans):
        s, gfn = _ssim_channel(p[:, :, c], t[:, :, c], True)
        total += np.mean(s)
        # d(d_ssim)/dS_p = -1 / (2 * chans * valid_count)
        grad[:, :, c] = gfn(np.full(s.shape, -0.5 / (chans * s.size)))
    value = (1.0 - total / chans) / 2.0
    return float(value), grad.reshape(pred.shape)


# ---------------------------------------------------------------------------
# total variation (squared forward differences, mean over all entries)
# ---------------------------------------------------------------------------


def tv_loss(img: np.ndarray) -> float:
    dh = img[:, 1:] - img[:, :-1]
    dv = img[1:, :] - img[:-1, :]
    return float((np.sum(dh**2) + np.sum(dv**2)) / img.size)


def tv_loss_grad(img: np.ndarray):
    dh = img[:, 1:] - img[:, :-1]
    dv = img[1:, :] - img[:-1, :]
    g = np.zeros_like(img)
    g[:, 1:] += 2 * dh
    g[:, :-1] -= 2 * dh
    g[1:, :] += 2 * dv
    g[:-1, :] -= 2 * dv
    return float((np.sum(dh**2) + np.sum(dv**2)) / img.size), g / img.size


# ---------------------------------------------------------------------------
# normal-map loss: w0 * L1(N, N_target) + w1 * TV(N) + w2 * sum(dn^2)
# ---------------------------------------------------------------------------


def normal_loss(nmap: np.ndarray, target: np.ndarray, dn: np.ndarray, weights) -> float:
    w0, w1, w2 = weights
    return float(w0 * l1(nmap, target) + w1 * tv_loss(nmap) + w2 * np.sum(np.asarray(dn) ** 2))


def normal_loss_grad(nmap: np.ndarray, target: np.ndarray, dn: np.ndarray, weights):
    w0, w1, w2 = weights
    v1, g1 = l1_grad(nmap, target)
    v2, g2 = tv_loss_grad(nmap)
    dn = np.asarray(dn, dtype=np.float64)
    value = w0 * v1 + w1 * v2 + w2 * float(np.sum(dn**2))
    return value, w0 * g1 + w1 * g2, 2.0 * w2 * dn


# ---------------------------------------------------------------------------
# lip-alignment measurement losses
# ---------------------------------------------------------------------------


def lip_losses(lm_src, lm_out, image, emotional_image, lip_mask, d_latent) -> dict:
    """Landmark, masked-pixel, and latent-regularization squared losses."""
    lm_src = np.asarray(lm_src, dtype=np.float64)
    lm_out = np.asarray(lm_out, dtype=np.float64)
    if lm_src.shape != lm_out.shape:
        raise DimensionMismatchError("landmark arrays differ in shape")
    _check_same_shape(np.asarray(image), np.asarray(emotional_image))
    masked = np.asarray(lip_mask)[..., None] * (np.asarray(emotional_image) - np.asarray(image))
    return {
        "ll": float(np.sum((lm_out - lm_src) ** 2)),
        "lp": float(np.sum(masked**2)),
        "reg": float(np.sum(np.asarray(d_latent, dtype=np.float64) ** 2)),
    }


# ---------------------------------------------------------------------------
# sync loss: squared distance between co-timed image- and audio-window
# embeddings produced by a pluggable embedder pair
# ---------------------------------------------------------------------------

SYNC_WINDOW = 5  # frames per window, both modalities


class PatchProjectionSyncEmbedder:
    """Deterministic stand-in for a pretrained sync network.

    Images are block-averaged to a patch grid and linearly projected; audio
    windows are flattened and projected to the same dimension.
    """

    def __init__(self, image_shape, audio_dim: int, frames: int = SYNC_WINDOW,
                 dim: int = 16, patches: int = 4, seed: int = 0):
        h, w = image_shape
        if h % patches or w % patches:
            raise DimensionMismatchError("image size must divide the patch grid")
        self.patches = patches
        self.frames = frames
        rng = np.random.default_rng(seed)
        feat = frames * patches * patches * 3
        self.proj_image = rng.normal(0.0, 1.0 / np.sqrt(feat), (dim, feat))
        self.proj_audio = rng.normal(0.0, 1.0 / np.sqrt(frames * audio_dim), (dim, frames * audio_dim))
        self.block = (h // patches, w // patches)

    def _pool(self, frame: np.ndarray) -> np.ndarray:
        bh, bw = self.block
        p = self.patches
        return frame.reshape(p, bh, p, bw, 3).mean(axis=(1, 3))

    def embed_images(self, frames) -> np.ndarray:
        if len(frames) != self.frames:
            raise DimensionMismatchError(f"expected {self.frames} frames, got {len(frames)}")
        pooled = np.concatenate([self._pool(f).ravel() for f in frames])
        return self.proj_image @ pooled

    def embed_images_backward(self, frames, d_vec: np.ndarray):
        d_pooled = (self.proj_image.T @ d_vec).reshape(self.frames, self.patches, self.patches, 3)
        bh, bw = self.block
        grads = []
        for i in range(self.frames):
            g = np.repeat(np.repeat(d_pooled[i], bh, axis=0), bw, axis=1) / (bh * bw)
            grads.append(g)
        return grads

    def embed_audio(self, audio_window: np.ndarray) -> np.ndarray:
        flat = np.asarray(audio_window, dtype=np.float64).ravel()
        if flat.size != self.proj_audio.shape[1]:
            raise DimensionMismatchError("audio window size mismatch")
        return self.proj_audio @ flat


def sync_loss(embedder, image_window, audio_window) -> float:
    v = embedder.embed_images(image_window) - embedder.embed_audio(audio_window)
    return float(np.sum(v**2))


def sync_loss_grad(embedder, image_window, audio_window):
    ei = embedder.embed_images(image_window)
    ea = embedder.embed_audio(audio_window)
    if ei.shape != ea.shape:
        raise DimensionMismatchError("embedder output dimensions differ")
    v = ei - ea
    return float(np.sum(v**2)), embedder.embed_images_backward(image_window, 2.0 * v)


# ---------------------------------------------------------------------------
# perceptual slot (stands in for a pretrained LPIPS net; can be disabled by
# giving its stage weight zero)
# ---------------------------------------------------------------------------


class RandomProjectionPerceptual:
    """Multi-scale patch features under fixed seeded random projections."""

    def __init__(self, scales=(1, 2, 4), patch: int = 4, dim: int = 8, seed: int = 7):
        self.scales = scales
        self.patch = patch
        self.dim = dim
        rng = np.random.default_rng(seed)
        feat = patch * patch * 3
        self.proj = rng.normal(0.0, 1.0 / np.sqrt(feat), (dim, feat))

    def _usable(self, shape, s):
        h, w = shape[:2]
        return h % s == 0 and w % s == 0 and (h // s) % self.patch == 0 and (w // s) % self.patch == 0

    def _features(self, img: np.ndarray, s: int) -> np.ndarray:
        h, w = img.shape[:2]
        pooled = img.reshape(h // s, s, w // s, s, 3).mean(axis=(1, 3))
        ph, pw = pooled.shape[0] // self.patch, pooled.shape[1] // self.patch
        pats = pooled.reshape(ph, self.patch, pw, self.patch, 3).transpose(0, 2, 1, 3, 4)
        return pats.reshape(ph * pw, -1) @ self.proj.T

    def forward(self, img: np.ndarray, target: np.ndarray):
        _check_same_shape(img, target)
        used = [s for s in self.scales if self._usable(img.shape, s)]
        if not used:
            raise DimensionMismatchError("image incompatible with every perceptual scale")
        parts = [(s, self._features(img, s) - self._features(target, s)) for s in used]
        value = float(np.mean([np.mean(d**2) for _, d in parts]))
        return value, (img.shape, parts)

    def backward(self, ctx, d_value: float = 1.0) -> np.ndarray:
        shape, parts = ctx
        h, w = shape[:2]
        grad = np.zeros(shape)
        for s, diff in parts:
            d_feat = (2.0 * diff / diff.size / len(parts)) * d_value
            d_pats = d_feat @ self.proj
            ph, pw = (h // s) // self.patch, (w // s) // self.patch
            d_pooled = d_pats.reshape(ph, pw, self.patch, self.patch, 3).transpose(0, 2, 1, 3, 4)
            d_pooled = d_pooled.reshape(h // s, w // s, 3)
            up = np.repeat(np.repeat(d_pooled, s, axis=0), s, axis=1) / (s * s)
            grad += up
        return grad


# ---------------------------------------------------------------------------
# stage weight families (published values) and the weighted-total assembler
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    gamma: tuple = (0.2, 0.05, 0.005, 0.001)  # canonical stage
    beta: tuple = (0.2, 0.2, 0.05, 0.005, 0.001, 0.05)  # mouth/face branch stage
    kappa: tuple = (0.2, 0.2, 0.05, 0.005, 0.001)  # emotion branch stage
    kappa_sync: float = 0.001
    eta: tuple = (0.2, 0.5)  # border fine-tune
    lam: tuple = (1.0, 5.0, 0.03, 0.2, 1.5)  # generator measurement losses

    def __post_init__(self):
        for group in (self.gamma, self.beta, self.kappa, (self.kappa_sync,), self.eta, self.lam):
            if any(w < 0 for w in group):
                raise ValueError("loss weights must be non-negative")

    def to_json(self) -> dict:
        return {
            "gamma": list(self.gamma),
            "beta": list(self.beta),
            "kappa": list(self.kappa),
            "kappa_sync": self.kappa_sync,
            "eta": list(self.eta),
            "lam": list(self.lam),
        }

    @staticmethod
    def from_json(obj: dict) -> "LossWeights":
        return LossWeights(
            gamma=tuple(obj.get("gamma", LossWeights.gamma)),
            beta=tuple(obj.get("beta", LossWeights.beta)),
            kappa=tuple(obj.get("kappa", LossWeights.kappa)),
            kappa_sync=obj.get("kappa_sync", LossWeights.kappa_sync),
            eta=tuple(obj.get("eta", LossWeights.eta)),
            lam=tuple(obj.get("lam", LossWeights.lam)),
        )


def stage_weight_table(stage: str, w: LossWeights) -> dict:
    """Term name -> weight for one training stage's total loss."""
    if stage == "canonical-mouth":
        return {"l1": 1.0, "dssim": w.gamma[0]}
    if stage == "canonical-face":
        return {
            "l1": 1.0,
            "dssim": w.gamma[0],
            "normal_l1": w.gamma[1],
            "normal_tv": w.gamma[2],
            "dn_reg": w.gamma[3],
        }
    if stage == "mouth-branch":
        return {"l1": 1.0, "dssim": w.beta[0], "perceptual": w.beta[1], "sync": w.beta[5]}
    if stage == "face-branch":
        return {
            "l1": 1.0,
            "dssim": w.beta[0],
            "perceptual": w.beta[1],
            "normal_l1": w.beta[2],
            "normal_tv": w.beta[3],
            "dn_reg": w.beta[4],
            "sync": w.beta[5],
        }
    if stage == "emotion-branch":
        return {
            "l1": 1.0,
            "dssim": w.kappa[0],
            "perceptual": w.kappa[1],
            "normal_l1": w.kappa[2],
            "normal_tv": w.kappa[3],
            "dn_reg": w.kappa[4],
            "sync": w.kappa_sync,
        }
    if stage == "border":
        return {"l1": 1.0, "dssim": w.eta[0], "perceptual": w.eta[1]}
    if stage == "generator":
        return {
            "ll": w.lam[0],
            "lp": w.lam[1],
            "reg": w.lam[2],
            "emo": w.lam[3],
            "id": w.lam[4],
        }
    raise ValueError(f"unknown stage {stage!r}")


def total_loss(stage: str, terms: dict, weights: LossWeights) -> float:
    """Weighted sum of independently evaluated loss terms for a stage."""
    table = stage_weight_table(stage, weights)
    missing = set(table) - set(terms)
    if missing:
        raise ValueError(f"stage {stage!r} missing loss terms {sorted(missing)}")
    return float(sum(table[k] * terms[k] for k in table))
