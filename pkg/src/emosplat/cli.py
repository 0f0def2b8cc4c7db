"""Command-line entry points.

Every command is a thin wrapper over library operations: it validates
inputs, runs, and exits nonzero with a machine-readable JSON error on
stderr when something fails. Report paths write delimited output (JSON,
JSONL, CSV) plus matplotlib figures next to it.
"""

from __future__ import annotations

import csv
import functools
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import pngio, report
from .checkpoint import load_checkpoint, save_checkpoint
from .losses import d_ssim
from .metrics import VA_POINTS, VARecord, psnr, sign_agreement, top3_accuracy, va_rmse
from .pipeline import render_composite
from .poisson import CloneProblem, augment_frame, region_boxes, seamless_clone
from .render import benchmark, render
from .scene import GaussianField, Role, load_dataset, load_field
from .service import RenderRequest, RenderService, create_app
from .training import Trainer, TrainConfig, synth_dataset


def _fail_json(exc: Exception) -> None:
    sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")


def cli_command(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except Exception as exc:  # noqa: BLE001 - CLI boundary
            _fail_json(exc)
            sys.exit(1)

    return wrapper


@click.group()
def main():
    """Layered deformable Gaussian-splatting talking heads."""


@main.command()
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--seed", type=int)
@click.option("--scale", type=float)
@click.option("--workers", type=int)
@cli_command
def train(dataset_dir, out_dir, config_path, seed, scale, workers):
    """Run the staged schedule and write a checkpoint bundle."""
    cfg = TrainConfig() if config_path is None else TrainConfig.from_json(json.loads(Path(config_path).read_text()))
    if seed is not None:
        cfg.seed = seed
    if scale is not None:
        cfg.scale = scale
    if workers is not None:
        cfg.workers = workers
    ds = load_dataset(dataset_dir)
    gt = None
    gm, gf = Path(dataset_dir) / "gt_mouth.field", Path(dataset_dir) / "gt_face.field"
    if gm.exists() and gf.exists():
        gt = (load_field(gm), load_field(gf))
    trainer = Trainer(ds, cfg, out_dir=out_dir, gt_fields=gt)
    model = trainer.train()
    out = pngio.ensure_dir(out_dir)
    state = trainer.last_optimizer.state_tensors() if trainer.last_optimizer else None
    save_checkpoint(out / "checkpoint", model, ds.conditions, ds.background, cfg, optimizer_state=state)
    if trainer.log:
        report.loss_curves(trainer.log, out / "loss_curves.png")
    click.echo(json.dumps({"checkpoint": str(out / "checkpoint"), "steps": len(trainer.log)}))


@main.command("render")
@click.option("--checkpoint", "ckpt_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--frame", type=int, default=0)
@click.option("--v", type=float, default=None)
@click.option("--a", type=float, default=None)
@click.option("--yaw", type=float, default=0.0)
@click.option("--pitch", type=float, default=0.0)
@click.option("--width", type=int, default=None)
@click.option("--height", type=int, default=None)
@click.option("--va-sweep", is_flag=True, help="render all 12 protocol VA points into OUT as a directory")
@cli_command
def render_cmd(ckpt_dir, out_path, frame, v, a, yaw, pitch, width, height, va_sweep):
    """Render one frame (or the 12-point VA sweep) from a checkpoint."""
    svc = RenderService(load_checkpoint(ckpt_dir))
    if va_sweep:
        out = pngio.ensure_dir(out_path)
        names = []
        for pv, pa in VA_POINTS:
            png, _ = svc.render_png(RenderRequest(frame=frame, v=pv, a=pa, yaw=yaw, pitch=pitch,
                                                  width=width, height=height))
            name = f"v{pv:.2f}_a{pa:.2f}.png"
            (out / name).write_bytes(png)
            names.append(name)
        click.echo(json.dumps({"written": names}))
        return
    png, clamped = svc.render_png(
        RenderRequest(frame=frame, v=v, a=a, yaw=yaw, pitch=pitch, width=width, height=height)
    )
    Path(out_path).write_bytes(png)
    click.echo(json.dumps({"written": out_path, "clamped": clamped}))


@main.command("eval")
@click.option("--checkpoint", "ckpt_dir", required=True, type=click.Path(exists=True))
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--va-pred", "va_pred", type=click.Path(exists=True), help="JSONL of external VA predictions")
@click.option("--figures/--no-figures", default=True)
@cli_command
def eval_cmd(ckpt_dir, dataset_dir, out_path, va_pred, figures):
    """Self-reconstruction metrics plus optional VA-protocol metrics."""
    ck = load_checkpoint(ckpt_dir)
    ds = load_dataset(dataset_dir)
    rows = []
    for t in range(len(ds)):
        fr = render_composite(ck.model, ds.conditions[t], ds.background)
        # compare at the stored frames' 8-bit precision, so a model that
        # reproduces its own renders scores the exact infinity sentinel
        image = pngio.quantize_color(fr.image)
        rows.append(
            {
                "frame": t,
                "psnr": psnr(image, ds.frames[t]),
                "dssim": d_ssim(image, ds.frames[t]),
                "l1": float(np.mean(np.abs(image - ds.frames[t]))),
            }
        )
    metrics = {
        "frames": len(rows),
        "psnr_mean": float(np.mean([r["psnr"] for r in rows])),
        "dssim_mean": float(np.mean([r["dssim"] for r in rows])),
        "l1_mean": float(np.mean([r["l1"] for r in rows])),
    }
    records = []
    if va_pred:
        with open(va_pred) as f:
            for line in f:
                if line.strip():
                    obj = json.loads(line)
                    records.append(
                        VARecord(pred=obj["pred"], target=obj["target"],
                                 label_ranking=obj.get("ranking", []))
                    )
        metrics.update(
            {
                "v_rmse": va_rmse(records, "valence"),
                "a_rmse": va_rmse(records, "arousal"),
                "v_sa": sign_agreement(records, "valence"),
                "a_sa": sign_agreement(records, "arousal"),
            }
        )
        if all(r.label_ranking for r in records):
            metrics["top3_accuracy"] = top3_accuracy(records)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(metrics, indent=1, sort_keys=True))
    with open(out.with_suffix(".csv"), "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["frame", "psnr", "dssim", "l1"])
        writer.writeheader()
        writer.writerows(rows)
    if figures:
        report.psnr_curve([r["psnr"] for r in rows], out.with_name(out.stem + "_psnr.png"))
        if records:
            report.va_scatter(records, out.with_name(out.stem + "_va.png"))
    click.echo(json.dumps(metrics, sort_keys=True))


@main.command()
@click.option("--src", required=True, type=click.Path(exists=True))
@click.option("--dst", required=True, type=click.Path(exists=True))
@click.option("--mask", "mask_path", type=click.Path(exists=True))
@click.option("--landmarks", "landmarks_path", type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--tol", type=float, default=1e-6)
@click.option("--margin", type=int, default=4)
@cli_command
def clone(src, dst, mask_path, landmarks_path, out_path, tol, margin):
    """Seamless-clone source regions onto the destination image."""
    source = pngio.read_color(src)
    destination = pngio.read_color(dst)
    if (mask_path is None) == (landmarks_path is None):
        raise click.UsageError("exactly one of --mask or --landmarks is required")
    if mask_path:
        mask = pngio.read_mask(mask_path)
        out = seamless_clone(CloneProblem(source, destination, mask), tol=tol)
    else:
        landmarks = {k: np.asarray(v, dtype=np.float64)
                     for k, v in json.loads(Path(landmarks_path).read_text()).items()}
        out = augment_frame(destination, source, landmarks, margin=margin, tol=tol)
    pngio.write_color(out_path, out)
    click.echo(json.dumps({"written": out_path}))


@main.command()
@click.option("--gaussians", type=int, default=10000)
@click.option("--size", type=int, default=256)
@click.option("--repetitions", type=int, default=5)
@click.option("--workers", type=int, default=1)
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--figures/--no-figures", default=True)
@cli_command
def bench(gaussians, size, repetitions, workers, seed, out_path, figures):
    """Throughput report for a synthetic field."""
    rng = np.random.default_rng(seed)
    field = GaussianField(
        positions=rng.uniform(-1, 1, (gaussians, 3)),
        log_scales=rng.normal(np.log(0.02), 0.3, (gaussians, 3)),
        rotations=rng.normal(0, 1, (gaussians, 4)),
        opacity_logits=rng.uniform(-1, 2, gaussians),
        colors=rng.uniform(0, 1, (gaussians, 3)),
        normal_residuals=np.zeros((gaussians, 3)),
        role=Role.FACE,
    )
    from .scene import look_at_camera

    cam = look_at_camera((0, 0, 3.2), (0, 0, 0), fx=size * 0.9, fy=size * 0.9,
                         cx=size / 2, cy=size / 2, width=size, height=size)
    result = benchmark(field, cam, repetitions, workers=workers)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(result, indent=1, sort_keys=True))
    if figures:
        report.bench_figure(result, out.with_suffix(".png"))
    click.echo(json.dumps({"fps": result["fps"], "out": str(out)}))


@main.command()
@click.option("--seed", type=int, default=0)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--frames", type=int, default=24)
@click.option("--size", type=int, default=64)
@cli_command
def synth(seed, out_dir, frames, size):
    """Write a synthetic closed-loop dataset (plus ground-truth fields)."""
    ds, _ = synth_dataset(seed, out_dir=out_dir, frames=frames, size=size)
    click.echo(json.dumps({"out": out_dir, "frames": len(ds), "size": size}))


@main.command("attn-dump")
@click.option("--checkpoint", "ckpt_dir", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@cli_command
def attn_dump(ckpt_dir, out_dir):
    """Render per-Gaussian attention-gate magnitudes as grayscale splats."""
    ck = load_checkpoint(ckpt_dir)
    out = pngio.ensure_dir(out_dir)
    model = ck.model
    cam = ck.conditions[0].camera if ck.conditions else None
    if cam is None:
        raise click.UsageError("checkpoint has no conditions to take a camera from")
    jobs = {
        "audio": (model.branches.face, "audio"),
        "au": (model.branches.face, "au"),
        "va": (model.branches.emotion, "va"),
    }
    written = []
    for name, (branch, gate_name) in jobs.items():
        h, _ = branch.encoder.encode(model.face_canonical.positions.astype(np.float64))
        gate = branch.gates[gate_name].gate_values(h)
        mag = gate.mean(axis=1)
        f = model.face_canonical
        vis = GaussianField(
            f.positions, f.log_scales, f.rotations, f.opacity_logits,
            np.repeat(mag[:, None], 3, axis=1).astype(np.float32),
            np.zeros_like(f.normal_residuals), Role.FACE,
        )
        outp = render(vis, cam)
        grey = np.where(outp.alpha[:, :, None] > 1e-3, outp.color / np.maximum(outp.alpha, 1e-3)[:, :, None], 0.0)
        path = out / f"attn_{name}.png"
        pngio.write_raw(path, grey)
        written.append(str(path))
    click.echo(json.dumps({"written": written}))


@main.command()
@click.option("--checkpoint", "ckpt_dir", required=True, type=click.Path(exists=True))
@click.option("--host", default=None, help="bind address (or EMOSPLAT_BIND env var)")
@click.option("--port", type=int, default=8077)
@click.option("--threads", type=int, default=2)
@cli_command
def serve(ckpt_dir, host, port, threads):
    """Serve /v1/render, /v1/meta, and the /v1/stream websocket."""
    import os

    import uvicorn

    bind = host or os.environ.get("EMOSPLAT_BIND", "127.0.0.1")
    app = create_app(ckpt_dir, threads=threads)
    uvicorn.run(app, host=bind, port=port, log_level="warning")


if __name__ == "__main__":
    main()
