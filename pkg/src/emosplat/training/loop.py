"""Staged optimization: canonical fields, the three branches independently,
then the face-border fine-tune.

Stage isolation is structural: each stage builds its own optimizer over
exactly the parameter set it may update, so frozen parameters cannot drift.
Runs are bit-deterministic for a fixed seed and worker count: all sampling
comes from one seeded generator consumed in a fixed order, and the renderer
is bit-reproducible across worker counts.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .. import losses
from ..compositing import apply_mask, composite_backward
from ..deformation import (
    BranchSet,
    deform_emotion,
    deform_emotion_backward,
    deform_face,
    deform_face_backward,
    deform_mouth,
    deform_mouth_backward,
)
from ..losses import LossWeights, PatchProjectionSyncEmbedder, RandomProjectionPerceptual
from ..pipeline import TalkingHeadModel, render_composite
from ..render import backward, render
from ..scene import Dataset, GaussianField, Role, _PARAM_FIELDS
from .adam import Adam
from .config import TrainConfig
from .densify import densify_and_prune, scene_extent


class TrainingError(Exception):
    pass


def _field_param_names(prefix: str):
    return [f"{prefix}.{name}" for name in _PARAM_FIELDS]


@dataclass
class _SyncFixture:
    windows: list  # list of (W, D_a) audio windows with no paired frames


class Trainer:
    def __init__(
        self,
        dataset: Dataset,
        config: TrainConfig,
        out_dir=None,
        gt_fields: tuple | None = None,
        sync_embedders: dict | None = None,
        perceptual=None,
    ):
        self.dataset = dataset
        self.config = config
        self.out_dir = out_dir
        self.gt_fields = gt_fields
        self.rng = np.random.default_rng(config.seed)
        self.log: list = []
        self.last_optimizer: Adam | None = None
        self._log_fh = None
        if out_dir is not None:
            from .. import pngio

            pngio.ensure_dir(out_dir)
            self._log_fh = open(f"{out_dir}/train_log.jsonl", "w")
        self.weights: LossWeights = config.weights
        da, du, _ = dataset.condition_dims
        self.model = self._initialize(da, du)
        h, w = dataset.resolution
        self.perceptual = perceptual
        if perceptual is None and config.perceptual_enabled:
            self.perceptual = RandomProjectionPerceptual(seed=config.seed + 101)
        self.sync_embedders = sync_embedders or {}
        if config.sync_enabled:
            for stage in ("mouth", "face", "emotion"):
                self.sync_embedders.setdefault(
                    stage,
                    PatchProjectionSyncEmbedder(
                        (h, w), da, frames=config.sync_window, seed=config.seed + 202
                    ),
                )
        self.sync_fixture = self._build_sync_fixture(da)

    # ------------------------------------------------------------------
    # setup
    # ------------------------------------------------------------------

    def _initialize(self, audio_dim: int, au_dim: int) -> TalkingHeadModel:
        cfg = self.config
        if cfg.init == "gt-jitter":
            if self.gt_fields is None:
                raise TrainingError("gt-jitter init requires ground-truth fields")
            mouth, face = (f.copy() for f in self.gt_fields)
            init_rng = np.random.default_rng(cfg.seed + 1)
            for f in (mouth, face):
                f.positions += init_rng.normal(0, cfg.init_jitter, f.positions.shape).astype(np.float32)
                f.log_scales += init_rng.normal(0, cfg.init_jitter, f.log_scales.shape).astype(np.float32)
        else:
            init_rng = np.random.default_rng(cfg.seed + 1)
            mouth = _random_field(init_rng, 100, Role.INSIDE_MOUTH, half_extent=0.3)
            face = _random_field(init_rng, 400, Role.FACE, half_extent=0.7)
        branches = BranchSet(
            audio_dim=audio_dim, au_dim=au_dim, seed=cfg.seed, **cfg.encoder_kwargs()
        )
        return TalkingHeadModel(mouth_canonical=mouth, face_canonical=face, branches=branches)

    def _build_sync_fixture(self, audio_dim: int) -> _SyncFixture:
        """Audio-only windows (no paired frames), standing in for synthesized
        speech: smooth deterministic trajectories of the first feature."""
        rng = np.random.default_rng(self.config.seed + 303)
        windows = []
        for _ in range(8):
            phase = rng.uniform(0, 2 * np.pi)
            speed = rng.uniform(0.3, 1.2)
            amp = rng.uniform(0.3, 0.7)
            w = np.zeros((self.config.sync_window, audio_dim))
            w[:, 0] = amp * np.sin(phase + speed * np.arange(self.config.sync_window))
            windows.append(w)
        return _SyncFixture(windows=windows)

    # ------------------------------------------------------------------
    # logging
    # ------------------------------------------------------------------

    def _log(self, stage: str, step: int, terms: dict, total: float, lr_scale: float):
        rec = {
            "step": step,
            "stage": stage,
            "losses": {k: float(v) for k, v in terms.items()},
            "total": float(total),
            "lr_scale": float(lr_scale),
            "gaussians_mouth": len(self.model.mouth_canonical),
            "gaussians_face": len(self.model.face_canonical),
        }
        self.log.append(rec)
        if self._log_fh is not None:
            self._log_fh.write(json.dumps(rec) + "\n")
            self._log_fh.flush()

    # ------------------------------------------------------------------
    # stages
    # ------------------------------------------------------------------

    def train(self) -> TalkingHeadModel:
        try:
            self.stage_canonical()
            self.model.set_encoder_bboxes()
            for branch in ("mouth", "face", "emotion"):
                self.stage_branch(branch)
            self.stage_border()
        except TrainingError:
            if self.out_dir is not None:
                self.save_checkpoint(f"{self.out_dir}/checkpoint_diverged")
            raise
        finally:
            if self._log_fh is not None:
                self._log_fh.close()
                self._log_fh = None
        return self.model

    def save_checkpoint(self, path) -> None:
        from ..checkpoint import save_checkpoint

        state = self.last_optimizer.state_tensors() if self.last_optimizer else None
        save_checkpoint(
            path, self.model, self.dataset.conditions, self.dataset.background,
            self.config, optimizer_state=state,
        )

    def _lr_for(self, name: str) -> float:
        return self.config.lr_hash if name.endswith("encoder.tables") else self.config.lr_other

    def _make_adam(self, params: dict) -> Adam:
        cfg = self.config
        return Adam(
            params,
            {k: self._lr_for(k) for k in params},
            betas=(cfg.beta1, cfg.beta2),
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
        )

    def _lr_scale(self, step: int) -> float:
        return 0.5 ** (step / self.config.half_life())

    def stage_canonical(self):
        """Optimize both canonical fields against the masked ground truth."""
        cfg = self.config
        steps = cfg.steps("canonical")
        w = self.weights
        params = {}
        for prefix, f in (("mouth", self.model.mouth_canonical), ("face", self.model.face_canonical)):
            for name in _PARAM_FIELDS:
                params[f"{prefix}.{name}"] = getattr(f, name)
        adam = self._make_adam(params)
        self.last_optimizer = adam
        densify_every = cfg.densify_interval()
        accum = {
            "mouth": np.zeros(len(self.model.mouth_canonical)),
            "face": np.zeros(len(self.model.face_canonical)),
        }
        counts = {k: np.zeros_like(v) for k, v in accum.items()}

        for step in range(steps):
            t = int(self.rng.integers(len(self.dataset)))
            cond = self.dataset.conditions[t]
            frame = self.dataset.frames[t]
            terms = {}
            grads = {}

            # inside-mouth field vs mouth-masked ground truth
            mouth = self.model.mouth_canonical
            out_m = render(mouth, cond.camera, workers=cfg.workers, retain=True)
            target_m = apply_mask(frame, self.dataset.mouth_masks[t])
            l1_m, g_l1 = losses.l1_grad(out_m.color, target_m)
            ds_m, g_ds = losses.d_ssim_grad(out_m.color, target_m)
            gbuf_m = backward(out_m, d_color=g_l1 + w.gamma[0] * g_ds)
            mouth_terms = {"l1": l1_m, "dssim": ds_m}
            terms.update({f"mouth_{k}": v for k, v in mouth_terms.items()})

            # face field vs face-masked ground truth plus normal supervision
            face = self.model.face_canonical
            out_f = render(face, cond.camera, workers=cfg.workers, retain=True)
            target_f = apply_mask(frame, self.dataset.face_masks[t])
            l1_f, g_l1f = losses.l1_grad(out_f.color, target_f)
            ds_f, g_dsf = losses.d_ssim_grad(out_f.color, target_f)
            nl1, g_nl1 = losses.l1_grad(out_f.normal, self.dataset.normal_targets[t])
            ntv, g_ntv = losses.tv_loss_grad(out_f.normal)
            dn = face.normal_residuals.astype(np.float64)
            gbuf_f = backward(
                out_f,
                d_color=g_l1f + w.gamma[0] * g_dsf,
                d_normal=w.gamma[1] * g_nl1 + w.gamma[2] * g_ntv,
            )
            gbuf_f.normal_residuals += 2.0 * w.gamma[3] * dn
            face_terms = {
                "l1": l1_f,
                "dssim": ds_f,
                "normal_l1": nl1,
                "normal_tv": ntv,
                "dn_reg": float(np.sum(dn**2)),
            }
            terms.update({f"face_{k}": v for k, v in face_terms.items()})

            for prefix, gbuf in (("mouth", gbuf_m), ("face", gbuf_f)):
                for name in _PARAM_FIELDS:
                    grads[f"{prefix}.{name}"] = getattr(gbuf, name)
                norms = np.sqrt(np.einsum("ni,ni->n", gbuf.mean2d, gbuf.mean2d))
                accum[prefix] += norms
                counts[prefix] += norms > 0

            total = losses.total_loss("canonical-mouth", mouth_terms, w) + losses.total_loss(
                "canonical-face", face_terms, w
            )
            if not np.isfinite(total):
                raise TrainingError(f"canonical stage diverged at step {step}")
            lr_scale = self._lr_scale(step)
            adam.step(grads, lr_scale)
            self._log("canonical", step, terms, total, lr_scale)

            if (step + 1) % densify_every == 0 and step < steps * cfg.densify.stop_fraction:
                for prefix in ("mouth", "face"):
                    field = getattr(self.model, f"{prefix}_canonical")
                    mean_norm = accum[prefix] / np.maximum(counts[prefix], 1)
                    result = densify_and_prune(field, mean_norm, cfg.densify, scene_extent(field))
                    setattr(self.model, f"{prefix}_canonical", result.field)
                    for name in _PARAM_FIELDS:
                        key = f"{prefix}.{name}"
                        adam.params[key] = getattr(result.field, name)
                        adam.resize_state(key, result.carried)
                    accum[prefix] = np.zeros(len(result.field))
                    counts[prefix] = np.zeros(len(result.field))

    # -- branch stages --------------------------------------------------

    def _branch_params(self, branch_name: str) -> dict:
        prefix = f"{branch_name}."
        return {k: v for k, v in self.model.branches.named_params().items() if k.startswith(prefix)}

    def _emotional_pool(self):
        allowed = {tuple(np.round(p, 6)) for p in map(tuple, self.config.va_train_points)}
        pool = [
            (ref, e, img)
            for ref, e, img in self.dataset.emotional_targets
            if tuple(np.round(e, 6)) in allowed
        ]
        if not pool:
            raise TrainingError("emotion stage requires emotional targets for the training VA points")
        return pool

    def stage_branch(self, branch_name: str):
        cfg = self.config
        w = self.weights
        steps = cfg.steps("branch")
        stage = f"{branch_name}-branch"
        params = self._branch_params(branch_name)
        adam = self._make_adam(params)
        self.last_optimizer = adam
        branches = self.model.branches
        pool = self._emotional_pool() if branch_name == "emotion" else None
        sync_embedder = self.sync_embedders.get(branch_name) if cfg.sync_enabled else None

        for step in range(steps):
            branches.zero_grad()
            t = int(self.rng.integers(len(self.dataset)))
            cond = self.dataset.conditions[t]
            terms = {}

            if branch_name == "mouth":
                theta, ctx = deform_mouth(branches, self.model.mouth_canonical, cond.audio)
                out = render(theta, cond.camera, workers=cfg.workers, retain=True)
                target = apply_mask(self.dataset.frames[t], self.dataset.mouth_masks[t])
                d_color, terms = self._rgb_terms(out.color, target, w.beta[0], w.beta[1], terms)
                gbuf = backward(out, d_color=d_color)
                deform_mouth_backward(branches, ctx, gbuf)
            elif branch_name == "face":
                theta, ctx = deform_face(
                    branches, self.model.face_canonical, cond.audio, cond.action_units
                )
                out = render(theta, cond.camera, workers=cfg.workers, retain=True)
                target = apply_mask(self.dataset.frames[t], self.dataset.face_masks[t])
                d_color, terms = self._rgb_terms(out.color, target, w.beta[0], w.beta[1], terms)
                d_normal, terms = self._normal_terms(
                    out.normal, self.dataset.normal_targets[t], theta, w.beta[2:5], terms
                )
                gbuf = backward(out, d_color=d_color, d_normal=d_normal)
                deform_face_backward(branches, ctx, gbuf)
            else:
                ref, e_point, target_img = pool[int(self.rng.integers(len(pool)))]
                ref_cond = self.dataset.conditions[ref]
                fr = render_composite(
                    self.model, ref_cond, self.dataset.background,
                    emotion=e_point, workers=cfg.workers, retain=True,
                )
                d_image, terms = self._rgb_terms(fr.image, target_img, w.kappa[0], w.kappa[1], terms)
                d_normal, terms = self._normal_terms(
                    fr.face_out.normal, self.dataset.normal_targets[ref], fr.theta_e,
                    w.kappa[2:5], terms,
                )
                d = composite_backward(fr.comp_ctx, d_image)
                gbuf_face = backward(
                    fr.face_out, d_color=d["face_color"], d_alpha=d["face_alpha"], d_normal=d_normal
                )
                deform_emotion_backward(branches, fr.ctx_e, gbuf_face)

            if sync_embedder is not None:
                sync_weight = w.kappa_sync if branch_name == "emotion" else w.beta[5]
                terms["sync"] = self._sync_step(branch_name, step, sync_embedder, sync_weight)
            else:
                terms["sync"] = 0.0

            total = losses.total_loss(stage, terms, w)
            if not np.isfinite(total):
                raise TrainingError(f"{stage} diverged at step {step}")
            lr_scale = self._lr_scale(step)
            grads = self.model.branches.named_grads()
            adam.step({k: grads[k] for k in params}, lr_scale)
            self._log(stage, step, terms, total, lr_scale)

    def _rgb_terms(self, image, target, w_dssim, w_perc, terms):
        l1v, g_l1 = losses.l1_grad(image, target)
        dsv, g_ds = losses.d_ssim_grad(image, target)
        terms = dict(terms)
        terms["l1"] = l1v
        terms["dssim"] = dsv
        d_color = g_l1 + w_dssim * g_ds
        if self.perceptual is not None and w_perc > 0:
            pv, pctx = self.perceptual.forward(image, target)
            terms["perceptual"] = pv
            d_color = d_color + w_perc * self.perceptual.backward(pctx)
        else:
            terms["perceptual"] = 0.0
        return d_color, terms

    def _normal_terms(self, nmap, ntarget, theta, weights3, terms):
        w_l1, w_tv, w_reg = weights3
        nl1, g_nl1 = losses.l1_grad(nmap, ntarget)
        ntv, g_ntv = losses.tv_loss_grad(nmap)
        dn = theta.normal_residuals.astype(np.float64)
        terms = dict(terms)
        terms["normal_l1"] = nl1
        terms["normal_tv"] = ntv
        terms["dn_reg"] = float(np.sum(dn**2))
        return w_l1 * g_nl1 + w_tv * g_ntv, terms

    def _sync_step(self, branch_name: str, step: int, embedder, weight: float) -> float:
        """One sync-loss sample: dataset-paired and audio-only fixture windows
        alternate 1:1. Gradients flow through every window frame's render."""
        cfg = self.config
        W = cfg.sync_window
        T = len(self.dataset)
        use_fixture = step % 2 == 1
        if use_fixture:
            audio_window = self.sync_fixture.windows[
                int(self.rng.integers(len(self.sync_fixture.windows)))
            ]
            base = int(self.rng.integers(T))  # non-audio conditions for the render
            conds = [self.dataset.conditions[base]] * W
            audios = list(audio_window)
        else:
            start = int(self.rng.integers(max(T - W, 1)))
            conds = [self.dataset.conditions[min(start + i, T - 1)] for i in range(W)]
            audios = [c.audio for c in conds]
            audio_window = np.stack(audios)

        branches = self.model.branches
        outs, ctxs = [], []
        for c, a in zip(conds, audios):
            if branch_name == "mouth":
                theta, ctx = deform_mouth(branches, self.model.mouth_canonical, a)
            else:
                theta, ctx = deform_face(branches, self.model.face_canonical, a, c.action_units)
                if branch_name == "emotion":
                    theta, ectx = deform_emotion(branches, theta, np.zeros(2))
                    ctx = (ctx, ectx)
            outs.append(render(theta, c.camera, workers=cfg.workers, retain=True))
            ctxs.append(ctx)
        value, d_imgs = losses.sync_loss_grad(embedder, [o.color for o in outs], audio_window)
        for out, ctx, d_img in zip(outs, ctxs, d_imgs):
            gbuf = backward(out, d_color=weight * d_img)
            if branch_name == "mouth":
                deform_mouth_backward(branches, ctx, gbuf)
            elif branch_name == "face":
                deform_face_backward(branches, ctx, gbuf)
            else:
                deform_emotion_backward(branches, ctx[1], gbuf)
        return value

    def stage_border(self):
        """Fine-tune only the face canonical opacity and color on the full
        composite against the unmasked frames."""
        cfg = self.config
        w = self.weights
        steps = cfg.steps("border")
        face = self.model.face_canonical
        params = {"face.opacity_logits": face.opacity_logits, "face.colors": face.colors}
        adam = self._make_adam(params)
        self.last_optimizer = adam
        for step in range(steps):
            t = int(self.rng.integers(len(self.dataset)))
            cond = self.dataset.conditions[t]
            fr = render_composite(
                self.model, cond, self.dataset.background, workers=cfg.workers, retain=True
            )
            terms = {}
            l1v, g_l1 = losses.l1_grad(fr.image, self.dataset.frames[t])
            dsv, g_ds = losses.d_ssim_grad(fr.image, self.dataset.frames[t])
            terms["l1"] = l1v
            terms["dssim"] = dsv
            d_image = g_l1 + w.eta[0] * g_ds
            if self.perceptual is not None and w.eta[1] > 0:
                pv, pctx = self.perceptual.forward(fr.image, self.dataset.frames[t])
                terms["perceptual"] = pv
                d_image = d_image + w.eta[1] * self.perceptual.backward(pctx)
            else:
                terms["perceptual"] = 0.0
            d = composite_backward(fr.comp_ctx, d_image)
            gbuf = backward(fr.face_out, d_color=d["face_color"], d_alpha=d["face_alpha"])
            # opacity and color pass through every deformation untouched, so
            # their rasterizer gradients are already canonical gradients
            grads = {"face.opacity_logits": gbuf.opacity_logits, "face.colors": gbuf.colors}
            total = losses.total_loss("border", terms, w)
            if not np.isfinite(total):
                raise TrainingError(f"border stage diverged at step {step}")
            lr_scale = self._lr_scale(step)
            adam.step(grads, lr_scale)
            self._log("border", step, terms, total, lr_scale)


def _random_field(rng: np.random.Generator, count: int, role: Role, half_extent: float) -> GaussianField:
    return GaussianField(
        positions=rng.uniform(-half_extent, half_extent, (count, 3)).astype(np.float32),
        log_scales=np.full((count, 3), np.log(0.05), dtype=np.float32),
        rotations=np.tile(np.array([1, 0, 0, 0], dtype=np.float32), (count, 1)),
        opacity_logits=np.zeros(count, dtype=np.float32),
        colors=np.full((count, 3), 0.5, dtype=np.float32),
        normal_residuals=np.zeros((count, 3), dtype=np.float32),
        role=role,
    )
