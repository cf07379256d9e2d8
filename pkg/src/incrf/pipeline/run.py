"""Reconstruct a dataset, write checkpoints, evaluate held-out views.

Output directory::

    out/config.yaml
    out/fields/field_0000.bin ...
    out/registry.json        centres, bounds, windows, checksums
    out/trajectory.txt       TUM rows for the training frames (timestamp = frame index)
    out/events.json          allocate / freeze / window events
    out/metrics.json         EvalReport
"""
from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from ..config import ReconConfig
from ..errors import CheckpointError, DatasetError
from ..geometry import Camera, align_trajectories, interpolate_pose
from ..incremental import FieldRegistry, Frame, IncrementalReconstructor, refine_pose, render_view
from ..triplane import TriplaneField
from . import io
from .dataset import Dataset
from .metrics import EvalReport, ate, ate_per_frame, image_metrics, rpe, trajectory_length

logger = logging.getLogger(__name__)


def reconstruct(cfg: ReconConfig, ds: Dataset, out=None):
    """Run the incremental reconstruction on the training split; returns the
    reconstructor (poses, registry, events) and writes checkpoints to ``out``."""
    if len(ds.train) == 0:
        raise DatasetError("empty training split")
    frames = [Frame(i, ds.image(i), ds.prior(i)) for i in ds.train]
    flow_fn = ds.flow if ds.flow_dir is not None else None
    rec = IncrementalReconstructor(cfg, ds.camera, frames, flow_fn)
    t0 = time.perf_counter()
    rec.run()
    rec.elapsed = time.perf_counter() - t0
    if out is not None:
        save_checkpoint(out, cfg, rec, ds.train)
    return rec


def save_checkpoint(out, cfg: ReconConfig, rec: IncrementalReconstructor, frame_ids):
    out = Path(out)
    (out / "fields").mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    entries = []
    for j, e in enumerate(rec.registry):
        name = f"fields/field_{j:04d}.bin"
        e.field.save(out / name)
        entries.append({
            "file": name, "center": e.center.tolist(), "bound": e.bound, "start": e.start,
            "end": e.end, "frozen": e.frozen, "checksum": e.checksum,
        })
    c = rec.cam
    cam = {"fx": c.fx, "fy": c.fy, "cx": c.cx, "cy": c.cy, "width": c.width, "height": c.height}
    (out / "registry.json").write_text(json.dumps({"camera": cam, "fields": entries}, indent=2))
    io.write_tum(out / "trajectory.txt", rec.state.poses, timestamps=list(frame_ids))
    events = [list(ev) for ev in rec.events]
    (out / "events.json").write_text(json.dumps({"events": events, "diagnostics": rec.diagnostics}, indent=2))


def load_registry(out) -> FieldRegistry:
    out = Path(out)
    path = out / "registry.json"
    if not path.is_file():
        raise CheckpointError(f"no registry at {path}")
    meta = json.loads(path.read_text())
    reg = FieldRegistry()
    for e in meta["fields"]:
        f = TriplaneField.load(out / e["file"])
        if e.get("checksum") and f.checksum() != e["checksum"]:
            raise CheckpointError(f"{e['file']}: checksum mismatch")
        ent = reg.allocate(f, e["center"], e["bound"], e["start"])
        ent.end, ent.frozen, ent.checksum = e["end"], e["frozen"], e["checksum"]
    return reg


def load_camera(out) -> Camera:
    path = Path(out) / "registry.json"
    if not path.is_file():
        raise CheckpointError(f"no registry at {path}")
    c = json.loads(path.read_text())["camera"]
    return Camera(c["fx"], c["fy"], c["cx"], c["cy"], c["width"], c["height"])


def load_trajectory(out):
    ts, poses = io.read_tum(Path(out) / "trajectory.txt")
    return [int(round(t)) for t in ts], poses


def held_out_poses(train_ids, est, test_ids, gt=None):
    """Initial poses for held-out frames: ground truth moved into the
    estimate's gauge when available, otherwise interpolated between the
    neighbouring training poses."""
    if gt is not None:
        gauge, _ = align_trajectories(est, [gt[i] for i in train_ids])
        return [gauge.apply_pose(gt[i]) for i in test_ids]
    ids = np.asarray(train_ids)
    out = []
    for i in test_ids:
        k = int(np.searchsorted(ids, i))
        if k == 0:
            out.append(est[0])
        elif k >= len(ids):
            out.append(est[-1])
        else:
            a, b = ids[k - 1], ids[k]
            out.append(interpolate_pose(est[k - 1], est[k], (i - a) / (b - a)))
    return out


def evaluate(out, ds: Dataset, cfg: ReconConfig | None = None) -> EvalReport:
    out = Path(out)
    cfg = cfg or ReconConfig.load(out / "config.yaml")
    reg = load_registry(out)
    ids, est = load_trajectory(out)
    report = EvalReport()
    gt = ds.gt_poses
    if gt is not None:
        gt_train = [gt[i] for i in ids]
        report.ate = ate(est, gt_train)
        report.rpe_r, report.rpe_t = rpe(est, gt_train)
        report.trajectory_length = trajectory_length(gt)
        report.per_frame["ate"] = {str(i): v for i, v in zip(ids, ate_per_frame(est, gt_train))}
    if ds.test:
        poses = held_out_poses(ids, est, ds.test, gt)
        rendered, observed = [], []
        for i, p in zip(ds.test, poses):
            img = ds.image(i)
            p = refine_pose(reg, ds.camera, p, img, cfg, seed=i)
            r, _ = render_view(reg, ds.camera, p, cfg, seed=i)
            rendered.append(r)
            observed.append(img)
        report.psnr, report.ssim, ps, ss = image_metrics(rendered, observed, ds.test)
        report.per_frame["psnr"], report.per_frame["ssim"] = ps, ss
    report.extra["n_fields"] = len(reg)
    (out / "metrics.json").write_text(report.to_json())
    return report


def run(cfg: ReconConfig, ds: Dataset, out):
    """Reconstruct then evaluate; returns (trajectory, registry, report)."""
    rec = reconstruct(cfg, ds, out)
    report = evaluate(out, ds, cfg)
    report.extra["runtime_s"] = getattr(rec, "elapsed", None)
    report.extra["peak_params"] = int(rec.state.peak_params)
    Path(out, "metrics.json").write_text(report.to_json())
    return rec.state.poses, rec.registry, report


def render_path(out, poses, cam=None, cfg: ReconConfig | None = None, dest=None):
    """Render novel views along camera-to-world ``poses`` from checkpoints."""
    out = Path(out)
    cfg = cfg or ReconConfig.load(out / "config.yaml")
    reg = load_registry(out)
    cam = cam or load_camera(out)
    images = []
    for k, p in enumerate(poses):
        img, _ = render_view(reg, cam, p, cfg, seed=k)
        images.append(img)
        if dest is not None:
            Path(dest).mkdir(parents=True, exist_ok=True)
            io.write_rgb(Path(dest) / f"{k:06d}.png", img)
    return images


__all__ = ["reconstruct", "evaluate", "run", "render_path", "load_registry", "load_trajectory", "load_camera",
           "save_checkpoint", "held_out_poses"]
