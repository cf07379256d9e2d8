"""File formats: 8/16-bit PNG, PFM depth, Middlebury .flo flow, TUM trajectories."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.spatial.transform import Rotation

from ..errors import DecodeError, MissingFile
from ..geometry import Pose

FLO_MAGIC = 202021.25
FLO_INVALID = 1e10


def _require(path) -> Path:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"missing file: {path}")
    return path


def read_rgb(path) -> np.ndarray:
    """RGB image as float64 in [0, 1]."""
    path = _require(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except Exception as exc:  # PIL raises a zoo of exception types
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    return arr / 255.0


def write_rgb(path, image):
    img = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path)


def write_depth_png(path, depth, scale: float = 1000.0):
    """16-bit PNG with ``value = depth * scale``; invalid depth is 0."""
    d = np.asarray(depth, dtype=np.float64)
    d = np.where(np.isfinite(d) & (d > 0), d * scale, 0.0)
    Image.fromarray(np.clip(np.round(d), 0, 65535).astype(np.uint16)).save(path)


def read_depth_png(path, scale: float = 1000.0) -> np.ndarray:
    path = _require(path)
    try:
        with Image.open(path) as im:
            arr = np.asarray(im, dtype=np.float64)
    except Exception as exc:
        raise DecodeError(f"cannot decode depth {path}: {exc}") from exc
    return arr / scale


def write_pfm(path, data):
    data = np.asarray(data, dtype="<f4")
    color = data.ndim == 3
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(b"PF\n" if color else b"Pf\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1\n")  # little endian
        f.write(np.flipud(data).tobytes())


def read_pfm(path) -> np.ndarray:
    path = _require(path)
    with open(path, "rb") as f:
        try:
            header = f.readline().strip()
            if header not in (b"PF", b"Pf"):
                raise ValueError(f"bad PFM header {header!r}")
            dims = re.match(rb"^(\d+)\s+(\d+)\s*$", f.readline())
            if not dims:
                raise ValueError("bad PFM dimensions")
            w, h = map(int, dims.groups())
            scale = float(f.readline().strip())
            dtype = "<f4" if scale < 0 else ">f4"
            ch = 3 if header == b"PF" else 1
            data = np.frombuffer(f.read(), dtype=dtype)
            data = data[: w * h * ch].reshape((h, w, ch) if ch == 3 else (h, w))
        except ValueError as exc:
            raise DecodeError(f"cannot decode PFM {path}: {exc}") from exc
    return np.flipud(data).astype(np.float64)


def write_flo(path, flow, valid=None):
    flow = np.asarray(flow, dtype=np.float64)
    if valid is not None:
        flow = np.where(np.asarray(valid)[..., None], flow, FLO_INVALID)
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        np.array([FLO_MAGIC], dtype="<f4").tofile(f)
        np.array([w, h], dtype="<i4").tofile(f)
        flow.astype("<f4").tofile(f)


def read_flo(path):
    """Returns ``(flow (H, W, 2), valid (H, W))``."""
    path = _require(path)
    raw = path.read_bytes()
    if len(raw) < 12 or np.frombuffer(raw[:4], "<f4")[0] != np.float32(FLO_MAGIC):
        raise DecodeError(f"bad .flo magic in {path}")
    w, h = np.frombuffer(raw[4:12], "<i4")
    data = np.frombuffer(raw[12:], "<f4")
    if data.size != w * h * 2:
        raise DecodeError(f"truncated .flo file {path}")
    flow = data.reshape(h, w, 2).astype(np.float64)
    valid = np.all(np.abs(flow) < 1e9, axis=-1)
    return np.where(valid[..., None], flow, 0.0), valid


def pose_to_tum_row(p: Pose):
    q = Rotation.from_matrix(p.rotation).as_quat()  # x y z w
    return [*p.translation.tolist(), *q.tolist()]


def pose_from_tum_row(row) -> Pose:
    row = np.asarray(row, dtype=np.float64)
    if row.size == 8:
        row = row[1:]
    q = row[3:7] / np.linalg.norm(row[3:7])
    return Pose(Rotation.from_quat(q).as_matrix(), row[:3])


def write_tum(path, poses, timestamps=None):
    with open(path, "w") as f:
        for i, p in enumerate(poses):
            ts = float(timestamps[i]) if timestamps is not None else float(i)
            vals = " ".join(f"{v:.17g}" for v in pose_to_tum_row(p))
            f.write(f"{ts:.6f} {vals}\n")


def read_tum(path):
    """Returns ``(timestamps, poses)``."""
    path = _require(path)
    ts, poses = [], []
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise DecodeError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
        try:
            vals = [float(v) for v in parts]
        except ValueError as exc:
            raise DecodeError(f"{path}:{ln}: {exc}") from exc
        ts.append(vals[0])
        poses.append(pose_from_tum_row(vals))
    return np.array(ts), poses
