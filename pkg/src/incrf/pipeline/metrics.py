"""Image and trajectory metrics, and the evaluation report."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from skimage.metrics import structural_similarity

from ..errors import ImageTooSmall, LengthMismatch, ShapeMismatch
from ..geometry import align_trajectories, rotation_angle

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
LUMA = np.array([0.299, 0.587, 0.114])


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def to_luma(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    return img @ LUMA if img.ndim == 3 else img


def ssim(a, b, peak: float = 1.0) -> float:
    """Gaussian-windowed SSIM (11x11, sigma 1.5) on luma."""
    a, b = _pair(a, b)
    ga, gb = to_luma(a), to_luma(b)
    if min(ga.shape) < SSIM_WINDOW:
        raise ImageTooSmall(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {ga.shape}")
    return float(structural_similarity(
        ga, gb, data_range=peak, gaussian_weights=True, sigma=SSIM_SIGMA,
        use_sample_covariance=False, K1=0.01, K2=0.03,
    ))


def ate(est, gt) -> float:
    """RMSE of positions after similarity alignment."""
    _, aligned = align_trajectories(est, gt)
    err = np.array([np.linalg.norm(a.translation - g.translation) for a, g in zip(aligned, gt)])
    return float(np.sqrt(np.mean(err**2)))


def ate_per_frame(est, gt) -> list[float]:
    _, aligned = align_trajectories(est, gt)
    return [float(np.linalg.norm(a.translation - g.translation)) for a, g in zip(aligned, gt)]


def rpe(est, gt, delta: int = 1):
    """RMSE over steps of the relative-pose error: (degrees, scene units)."""
    if len(est) != len(gt):
        raise LengthMismatch(f"{len(est)} estimated vs {len(gt)} ground-truth poses")
    if len(est) <= delta:
        raise LengthMismatch(f"need more than {delta} poses, got {len(est)}")
    rot, trans = [], []
    for i in range(len(est) - delta):
        e = est[i].inverse() @ est[i + delta]
        g = gt[i].inverse() @ gt[i + delta]
        d = g.inverse() @ e
        rot.append(np.rad2deg(rotation_angle(d.rotation)))
        trans.append(np.linalg.norm(d.translation))
    rot, trans = np.array(rot), np.array(trans)
    return float(np.sqrt(np.mean(rot**2))), float(np.sqrt(np.mean(trans**2)))


# ---------------------------------------------------------------------------
# report


def _enc(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if isinstance(v, dict):
        return {k: _enc(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_enc(x) for x in v]
    return v


def _dec(v):
    if v in ("inf", "-inf"):
        return math.inf if v == "inf" else -math.inf
    if isinstance(v, dict):
        return {k: _dec(x) for k, x in v.items()}
    if isinstance(v, list):
        return [_dec(x) for x in v]
    return v


@dataclass
class EvalReport:
    psnr: float | None = None
    ssim: float | None = None
    ate: float | None = None
    rpe_r: float | None = None
    rpe_t: float | None = None
    trajectory_length: float | None = None
    per_frame: dict = field(default_factory=dict)  # name -> {frame index (str): value}
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(_enc(asdict(self)), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**_dec(json.loads(text)))

    def summary(self) -> str:
        parts = []
        for k in ("psnr", "ssim", "ate", "rpe_r", "rpe_t"):
            v = getattr(self, k)
            if v is not None:
                parts.append(f"{k}={v:.4g}")
        return " ".join(parts)


def trajectory_length(poses) -> float:
    return float(sum(np.linalg.norm(b.translation - a.translation) for a, b in zip(poses, poses[1:])))


def image_metrics(rendered, observed, frames):
    """Mean PSNR/SSIM plus per-frame values keyed by frame index."""
    ps = {str(i): psnr(r, o) for i, r, o in zip(frames, rendered, observed)}
    ss = {str(i): ssim(r, o) for i, r, o in zip(frames, rendered, observed)}
    return float(np.mean(list(ps.values()))), float(np.mean(list(ss.values()))), ps, ss
