"""On-disk dataset layout.

::

    root/dataset.yaml       camera, file layout, depth format/scale, split
    root/rgb/000000.png
    root/depth/000000.pfm   (or 16-bit .png with ``depth.scale`` units per metre)
    root/flow/000000_000001.flo
    root/poses_gt.txt       TUM rows, camera-to-world
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ..errors import BadIntrinsics, DatasetError, DecodeError, MissingFile
from ..geometry import Camera
from ..oracle import SyntheticScene, corrupt_depth
from . import io

logger = logging.getLogger(__name__)

DATASET_FILE = "dataset.yaml"
FLOW_GAPS = (1, 2)  # neighbours emitted per frame; gap 2 bridges held-out frames


@dataclass
class Dataset:
    root: Path
    camera: Camera
    rgb_paths: list
    depth_paths: list | None
    depth_scale: float
    flow_dir: Path | None
    gt_poses: list | None
    train: list
    test: list
    _images: dict = field(default_factory=dict, repr=False)
    _flows: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.rgb_paths)

    def image(self, i) -> np.ndarray:
        if i not in self._images:
            img = io.read_rgb(self.rgb_paths[i])
            if img.shape[:2] != (self.camera.height, self.camera.width):
                raise DecodeError(
                    f"{self.rgb_paths[i]}: size {img.shape[1]}x{img.shape[0]} does not match camera "
                    f"{self.camera.width}x{self.camera.height}"
                )
            self._images[i] = img
        return self._images[i]

    def prior(self, i) -> np.ndarray | None:
        if self.depth_paths is None:
            return None
        p = Path(self.depth_paths[i])
        d = io.read_pfm(p) if p.suffix == ".pfm" else io.read_depth_png(p, self.depth_scale)
        return np.where(np.isfinite(d) & (d > 0), d, 0.0)

    def flow_path(self, src, dst) -> Path | None:
        return None if self.flow_dir is None else self.flow_dir / f"{src:06d}_{dst:06d}.flo"

    def flow(self, src, dst):
        """Reference flow ``(flow, valid)`` or None when no file exists."""
        key = (src, dst)
        if key not in self._flows:
            p = self.flow_path(src, dst)
            self._flows[key] = io.read_flo(p) if p is not None and p.is_file() else None
        return self._flows[key]


def split_indices(n: int, test_every: int):
    """Every ``test_every``-th frame is held out, except frame 0, which anchors
    the trajectory at the identity and always trains."""
    if test_every <= 0:
        return list(range(n)), []
    test = [i for i in range(1, n) if i % test_every == 0]
    train = [i for i in range(n) if i == 0 or i % test_every != 0]
    return train, test


def write_dataset(scene: SyntheticScene, root, seed: int = 0, prior: dict | None = None,
                  depth_format: str = "pfm", test_every: int = 8) -> Path:
    """Emit an oracle scene in the dataset layout.  Depth priors are the exact
    depth corrupted per frame (``prior`` = kwargs of :func:`corrupt_depth`,
    ``{"noise": 0}`` plus unit scale range for exact depth)."""
    root = Path(root)
    for sub in ("rgb", "depth", "flow"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    prior = dict(prior or {})
    n = len(scene)
    ext = ".pfm" if depth_format == "pfm" else ".png"
    scale = 1000.0
    for i in range(n):
        io.write_rgb(root / "rgb" / f"{i:06d}.png", scene.images[i])
        d = corrupt_depth(scene.depths[i], rng, **prior)
        if ext == ".pfm":
            io.write_pfm(root / "depth" / f"{i:06d}.pfm", d.astype(np.float32))
        else:
            io.write_depth_png(root / "depth" / f"{i:06d}.png", d, scale)
        for g in FLOW_GAPS:
            for a, b in ((i, i + g), (i + g, i)):
                if 0 <= b < n and 0 <= a < n:
                    fl, valid = scene.flow(a, b)
                    io.write_flo(root / "flow" / f"{a:06d}_{b:06d}.flo", fl, valid)
    io.write_tum(root / "poses_gt.txt", scene.poses)
    cam = scene.camera
    meta = {
        "camera": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
                   "width": cam.width, "height": cam.height},
        "frames": n,
        "rgb": "rgb",
        "depth": {"dir": "depth", "format": depth_format, "scale": scale},
        "flow": "flow",
        "trajectory": "poses_gt.txt",
        "split": {"test_every": test_every},
        "source": {"generator": "oracle", "seed": scene.seed},
    }
    (root / DATASET_FILE).write_text(yaml.safe_dump(meta, sort_keys=False))
    return root


def _camera(meta) -> Camera:
    c = meta.get("camera")
    if not isinstance(c, dict):
        raise BadIntrinsics("dataset config has no camera block")
    try:
        return Camera(float(c["fx"]), float(c["fy"]), float(c["cx"]), float(c["cy"]),
                      int(c["width"]), int(c["height"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise BadIntrinsics(f"bad camera intrinsics: {exc}") from exc


def load_dataset(root, test_every: int | None = None) -> Dataset:
    """Validate and open a dataset directory.  ``test_every`` overrides the
    split stored in the dataset config."""
    root = Path(root)
    cfg_path = root / DATASET_FILE
    if not cfg_path.is_file():
        raise MissingFile(f"missing file: {cfg_path}")
    try:
        meta = yaml.safe_load(cfg_path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise DecodeError(f"cannot parse {cfg_path}: {exc}") from exc
    cam = _camera(meta)
    rgb_dir = root / meta.get("rgb", "rgb")
    if "frames" in meta and isinstance(meta["frames"], int):
        rgb = [rgb_dir / f"{i:06d}.png" for i in range(meta["frames"])]
    elif isinstance(meta.get("frames"), list):
        rgb = [rgb_dir / f for f in meta["frames"]]
    else:
        rgb = sorted(rgb_dir.glob("*.png"))
    if not rgb:
        raise DatasetError(f"no frames in {rgb_dir}")
    for p in rgb:
        if not Path(p).is_file():
            raise MissingFile(f"missing file: {p}")
    depth_meta = meta.get("depth") or {}
    depth_dir = root / depth_meta.get("dir", "depth")
    depth_paths = None
    if depth_dir.is_dir():
        ext = ".pfm" if depth_meta.get("format", "pfm") == "pfm" else ".png"
        depth_paths = [depth_dir / (Path(p).stem + ext) for p in rgb]
        for p in depth_paths:
            if not p.is_file():
                raise MissingFile(f"missing file: {p}")
    else:
        logger.warning("no depth directory at %s; running without depth priors", depth_dir)
    flow_dir = root / meta.get("flow", "flow")
    flow_dir = flow_dir if flow_dir.is_dir() else None
    gt = None
    traj = root / meta.get("trajectory", "poses_gt.txt")
    if traj.is_file():
        _, gt = io.read_tum(traj)
        if len(gt) != len(rgb):
            raise DatasetError(f"{traj}: {len(gt)} poses for {len(rgb)} frames")
    split = meta.get("split") or {}
    if test_every is not None:
        train, test = split_indices(len(rgb), test_every)
    elif "train" in split:
        train = sorted(int(i) for i in split["train"])
        test = sorted(int(i) for i in split.get("test", []))
    else:
        train, test = split_indices(len(rgb), int(split.get("test_every", 8)))
    bad = [i for i in train + test if not 0 <= i < len(rgb)]
    if bad:
        raise DatasetError(f"split indices out of range for {len(rgb)} frames: {bad[:5]}")
    if set(train) & set(test):
        raise DatasetError("train and test splits overlap")
    if not train:
        raise DatasetError("empty training split")
    ds = Dataset(root, cam, rgb, depth_paths, float(depth_meta.get("scale", 1000.0)), flow_dir, gt, train, test)
    for i in train + test:  # decode everything up front so errors surface at load
        ds.image(i)
    return ds
