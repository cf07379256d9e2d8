"""Vector-matrix factorised radiance field.

A field holds, for every axis, rank-one line/plane factor pairs for one
density channel and ``n_features`` appearance channels.  World points are
mapped to field-local coordinates ``(x - center) / half_extent``, contracted
into the open cube (-2, 2)^3 and interpolated.  Density is
``softplus(g + density_shift)``; colour comes from a two-layer decoder over
the appearance feature and a degree-2 spherical-harmonic encoding of the
view direction.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _vm_kernels as K
from .errors import CheckpointError, OutOfDomain, ShrinkNotAllowed

DENSITY = "density"
APPEARANCE = "appearance"
SH_DIM = 9
_MAGIC = b"VMTF"
_VERSION = 1


# ---------------------------------------------------------------------------
# elementwise helpers


def softplus(x):
    return K.softplus(np.asarray(x))


def sigmoid(x):
    return K.sigmoid(np.asarray(x))


def contract(x):
    """Map ``(..., 3)`` points into (-2, 2)^3 with the infinity-norm warp."""
    x = np.asarray(x)
    m = np.max(np.abs(x), axis=-1, keepdims=True)
    safe = np.where(m > 1.0, m, 1.0)
    warped = (2.0 - 1.0 / safe) * (x / safe)
    return np.where(m <= 1.0, x, warped)


def contract_backward(x, g):
    """Vector-Jacobian product of :func:`contract` at ``x``."""
    x = np.asarray(x)
    absx = np.abs(x)
    k = np.argmax(absx, axis=-1)
    m = np.take_along_axis(absx, k[..., None], axis=-1)[..., 0]
    outside = m > 1.0
    ms = np.where(outside, m, 1.0)
    a = 2.0 / ms - 1.0 / ms**2
    da = -2.0 / ms**2 + 2.0 / ms**3
    sgn = np.sign(np.take_along_axis(x, k[..., None], axis=-1)[..., 0])
    dot = np.sum(x * g, axis=-1)
    gx = a[..., None] * g
    extra = da * sgn * dot
    np.put_along_axis(
        gx, k[..., None], np.take_along_axis(gx, k[..., None], axis=-1) + extra[..., None], axis=-1
    )
    return np.where(outside[..., None], gx, g)


_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005, -1.0925484305920792, 0.5462742152960396)


def sh_encode(d):
    d = np.asarray(d)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    return np.stack(
        [
            np.full_like(x, _C0),
            -_C1 * y,
            _C1 * z,
            -_C1 * x,
            _C2[0] * x * y,
            _C2[1] * y * z,
            _C2[2] * (2 * z * z - x * x - y * y),
            _C2[3] * x * z,
            _C2[4] * (x * x - y * y),
        ],
        axis=-1,
    )


def sh_backward(d, g):
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    gx = (
        -_C1 * g[..., 3]
        + _C2[0] * y * g[..., 4]
        - 2 * _C2[2] * x * g[..., 6]
        + _C2[3] * z * g[..., 7]
        + 2 * _C2[4] * x * g[..., 8]
    )
    gy = (
        -_C1 * g[..., 1]
        + _C2[0] * x * g[..., 4]
        + _C2[1] * z * g[..., 5]
        - 2 * _C2[2] * y * g[..., 6]
        - 2 * _C2[4] * y * g[..., 8]
    )
    gz = (
        _C1 * g[..., 2]
        + _C2[1] * y * g[..., 5]
        + 4 * _C2[2] * z * g[..., 6]
        + _C2[3] * x * g[..., 7]
    )
    return np.stack([gx, gy, gz], axis=-1)


# ---------------------------------------------------------------------------


def _segment_sum(values, index, n):
    """Row sums of ``values`` grouped by ``index`` into ``n`` rows."""
    if index.size and np.all(index[1:] >= index[:-1]):
        out = np.zeros((n, values.shape[1]), dtype=values.dtype)
        starts = np.flatnonzero(np.r_[True, index[1:] != index[:-1]])
        out[index[starts]] = np.add.reduceat(values, starts, axis=0)
        return out
    out = np.zeros((n, values.shape[1]), dtype=values.dtype)
    np.add.at(out, index, values)
    return out


@dataclass
class FieldSample:
    color: np.ndarray
    density: float


@dataclass
class FieldEval:
    """Intermediate values of a batched query, kept for the backward pass."""

    contracted: np.ndarray
    local: np.ndarray
    raw: np.ndarray
    sigma: np.ndarray
    rgb: np.ndarray
    hidden_pre: np.ndarray
    hidden: np.ndarray
    sh: np.ndarray
    dirs: np.ndarray
    ray_index: np.ndarray | None


@dataclass
class FieldGrads:
    lines: np.ndarray
    planes: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def items(self):
        return {
            "lines": self.lines,
            "planes": self.planes,
            "w1": self.w1,
            "b1": self.b1,
            "w2": self.w2,
            "b2": self.b2,
        }.items()

    def __iadd__(self, other: "FieldGrads"):
        for name, arr in other.items():
            getattr(self, name).__iadd__(arr)
        return self

    def scaled(self, s):
        return FieldGrads(**{k: v * s for k, v in self.items()})


class TriplaneField:
    """Rank-R vector-matrix field plus appearance decoder.

    ``rank`` is the density rank; ``app_rank`` (defaults to ``rank``) is the
    rank of each of the ``n_features`` appearance channels.
    """

    PARAM_NAMES = ("lines", "planes", "w1", "b1", "w2", "b2")

    def __init__(
        self,
        resolution: int,
        rank: int = 4,
        n_features: int = 12,
        app_rank: int | None = None,
        center=(0.0, 0.0, 0.0),
        half_extent: float = 1.0,
        density_shift: float = 0.0,
        hidden: int = 64,
        dtype=np.float32,
    ):
        if resolution < 2:
            raise ValueError("resolution must be at least 2")
        self.n = int(resolution)
        self.rank = int(rank)
        self.app_rank = int(app_rank if app_rank is not None else rank)
        self.n_features = int(n_features)
        self.center = np.asarray(center, dtype=np.float64).reshape(3)
        self.half_extent = float(half_extent)
        self.density_shift = float(density_shift)
        self.hidden = int(hidden)
        self.dtype = np.dtype(dtype)
        C = self.n_components
        self.lines = np.zeros((3, self.n, C), dtype=self.dtype)
        self.planes = np.zeros((3, self.n, self.n, C), dtype=self.dtype)
        d_in = self.n_features + SH_DIM
        self.w1 = np.zeros((d_in, self.hidden), dtype=self.dtype)
        self.b1 = np.zeros(self.hidden, dtype=self.dtype)
        self.w2 = np.zeros((self.hidden, 3), dtype=self.dtype)
        self.b2 = np.zeros(3, dtype=self.dtype)
        ch = [0] * self.rank
        for f in range(self.n_features):
            ch += [1 + f] * self.app_rank
        self.comp_ch = np.array(ch, dtype=np.int64)

    # -- construction -----------------------------------------------------

    @property
    def n_components(self) -> int:
        return self.rank + self.n_features * self.app_rank

    @property
    def n_channels(self) -> int:
        return 1 + self.n_features

    @classmethod
    def random(cls, resolution, rng, scale=0.1, decoder_scale=None, **kw):
        f = cls(resolution, **kw)
        f.lines[...] = rng.normal(0.0, scale, f.lines.shape)
        f.planes[...] = rng.normal(0.0, scale, f.planes.shape)
        f.init_decoder(rng, decoder_scale)
        return f

    def init_decoder(self, rng, scale=None):
        d_in = self.w1.shape[0]
        s1 = scale if scale is not None else np.sqrt(2.0 / d_in)
        s2 = scale if scale is not None else np.sqrt(1.0 / self.hidden)
        self.w1[...] = rng.normal(0.0, s1, self.w1.shape)
        self.w2[...] = rng.normal(0.0, s2, self.w2.shape)
        self.b1[...] = 0.0
        self.b2[...] = 0.0

    def copy(self) -> "TriplaneField":
        out = TriplaneField(
            self.n, self.rank, self.n_features, self.app_rank, self.center,
            self.half_extent, self.density_shift, self.hidden, self.dtype,
        )
        for name in self.PARAM_NAMES:
            getattr(out, name)[...] = getattr(self, name)
        return out

    def astype(self, dtype) -> "TriplaneField":
        out = TriplaneField(
            self.n, self.rank, self.n_features, self.app_rank, self.center,
            self.half_extent, self.density_shift, self.hidden, dtype,
        )
        for name in self.PARAM_NAMES:
            getattr(out, name)[...] = getattr(self, name)
        return out

    def params(self) -> dict:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def zero_grads(self) -> FieldGrads:
        return FieldGrads(**{k: np.zeros_like(v) for k, v in self.params().items()})

    # -- factor views -----------------------------------------------------

    def channel_components(self, channel) -> np.ndarray:
        if channel in (DENSITY, 0):
            return np.arange(self.rank)
        f = channel - 1
        start = self.rank + f * self.app_rank
        return np.arange(start, start + self.app_rank)

    def vector(self, axis: int, component: int) -> np.ndarray:
        return self.lines[axis, :, component]

    def matrix(self, axis: int, component: int) -> np.ndarray:
        return self.planes[axis, :, :, component]

    def param_count(self) -> int:
        """Number of factor entries: components x 3 x (n + n^2)."""
        return int(self.lines.size + self.planes.size)

    def decoder_param_count(self) -> int:
        return int(self.w1.size + self.b1.size + self.w2.size + self.b2.size)

    # -- evaluation -------------------------------------------------------

    def to_local(self, x):
        return (np.asarray(x, dtype=np.float64) - self.center) / self.half_extent

    def grid_values(self, xc) -> np.ndarray:
        """Raw channel values ``(P, 1+F)`` at contracted points ``(P, 3)``.

        Points on the closed cube boundary (where the outermost grid nodes
        sit) are accepted; anything beyond raises :class:`OutOfDomain`.
        """
        xc = np.ascontiguousarray(np.asarray(xc, dtype=self.dtype).reshape(-1, 3))
        if xc.size and (not np.all(np.isfinite(xc)) or np.max(np.abs(xc)) > 2.0):
            raise OutOfDomain("contracted coordinates must satisfy |x|_inf <= 2")
        return K.vm_forward(self.lines, self.planes, self.comp_ch, self.n_channels, xc)

    def grid_value(self, xc, channel=DENSITY):
        raw = self.grid_values(np.asarray(xc).reshape(1, 3))[0]
        if channel in (DENSITY, 0):
            return float(raw[0])
        return raw[1:]

    def evaluate(self, x, d, ray_index=None) -> FieldEval:
        """Batched query at world points ``x (P,3)``.

        ``d`` holds unit view directions, either per point ``(P,3)`` or per
        ray ``(B,3)`` together with ``ray_index (P,)`` mapping points to rays.
        """
        local = self.to_local(x).reshape(-1, 3)
        xc = contract(local)
        raw = self.grid_values(xc)
        sigma = softplus(raw[:, 0] + self.density_shift)
        d = np.asarray(d, dtype=np.float64)
        sh = sh_encode(d).astype(self.dtype)
        nf = self.n_features
        w1f, w1d = self.w1[:nf], self.w1[nf:]
        view_term = sh @ w1d
        if ray_index is not None:
            view_term = view_term[ray_index]
        pre = raw[:, 1:] @ w1f + view_term + self.b1
        hid = softplus(pre)
        rgb = sigmoid(hid @ self.w2 + self.b2)
        return FieldEval(xc, local, raw, sigma, rgb, pre, hid, sh, d, ray_index)

    def backward(self, ev: FieldEval, g_sigma, g_rgb, grads: FieldGrads | None = None,
                 want_inputs: bool = False):
        """Backpropagate ``dL/dsigma (P,)`` and ``dL/drgb (P,3)``.

        Accumulates into ``grads`` (allocated when None) and returns
        ``(grads, g_x, g_d)``; the input gradients are world-space and are
        only computed when ``want_inputs``.
        """
        if grads is None:
            grads = self.zero_grads()
        dt = self.dtype
        g_sigma = np.asarray(g_sigma, dtype=dt)
        g_rgb = np.asarray(g_rgb, dtype=dt)
        nf = self.n_features
        g_a2 = g_rgb * ev.rgb * (1.0 - ev.rgb)
        grads.w2 += ev.hidden.T @ g_a2
        grads.b2 += g_a2.sum(0)
        g_a1 = (g_a2 @ self.w2.T) * sigmoid(ev.hidden_pre)
        grads.b1 += g_a1.sum(0)
        grads.w1[:nf] += ev.raw[:, 1:].T @ g_a1
        if ev.ray_index is not None:
            g_view = _segment_sum(g_a1, ev.ray_index, ev.sh.shape[0])
        else:
            g_view = g_a1
        grads.w1[nf:] += ev.sh.T @ g_view
        g_raw = np.empty_like(ev.raw)
        g_raw[:, 0] = g_sigma * sigmoid(ev.raw[:, 0] + self.density_shift)
        g_raw[:, 1:] = g_a1 @ self.w1[:nf].T
        g_xc = np.zeros((ev.contracted.shape[0], 3), dtype=dt)
        K.vm_backward(
            self.lines, self.planes, self.comp_ch,
            np.ascontiguousarray(ev.contracted, dtype=dt), np.ascontiguousarray(g_raw),
            grads.lines, grads.planes, g_xc, want_inputs,
        )
        g_x = g_d = None
        if want_inputs:
            g_x = contract_backward(ev.local, g_xc.astype(np.float64)) / self.half_extent
            g_sh = g_view @ self.w1[nf:].T
            g_d = sh_backward(ev.dirs, g_sh.astype(np.float64))
        return grads, g_x, g_d

    def query(self, x, d) -> FieldSample:
        d = np.asarray(d, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise ValueError("view direction must be unit length")
        ev = self.evaluate(np.asarray(x).reshape(1, 3), d.reshape(1, 3))
        return FieldSample(ev.rgb[0].astype(np.float64), float(ev.sigma[0]))

    # -- resolution -------------------------------------------------------

    def upsample(self, new_n: int) -> "TriplaneField":
        if new_n <= self.n:
            raise ShrinkNotAllowed(f"new resolution {new_n} must exceed {self.n}")
        out = TriplaneField(
            new_n, self.rank, self.n_features, self.app_rank, self.center,
            self.half_extent, self.density_shift, self.hidden, self.dtype,
        )
        src = np.linspace(0.0, self.n - 1, new_n)
        i0 = np.clip(np.floor(src).astype(int), 0, self.n - 2)
        f = (src - i0)[:, None]
        lines = self.lines.astype(np.float64)
        out.lines[...] = lines[:, i0] * (1 - f) + lines[:, i0 + 1] * f
        planes = self.planes.astype(np.float64)
        rows = planes[:, i0] * (1 - f)[None, :, None] + planes[:, i0 + 1] * f[None, :, None]
        out.planes[...] = rows[:, :, i0] * (1 - f)[None, None] + rows[:, :, i0 + 1] * f[None, None]
        for name in ("w1", "b1", "w2", "b2"):
            getattr(out, name)[...] = getattr(self, name)
        return out

    # -- persistence ------------------------------------------------------

    def to_bytes(self) -> bytes:
        payload = b"".join(
            np.ascontiguousarray(getattr(self, name), dtype="<f4").tobytes() for name in self.PARAM_NAMES
        )
        header = {
            "rank": self.rank,
            "app_rank": self.app_rank,
            "n": self.n,
            "n_features": self.n_features,
            "hidden": self.hidden,
            "center": [float(c) for c in self.center],
            "half_extent": self.half_extent,
            "density_shift": self.density_shift,
            "arrays": [[name, list(getattr(self, name).shape)] for name in self.PARAM_NAMES],
            "sha256": hashlib.sha256(payload).hexdigest(),
        }
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        return _MAGIC + struct.pack("<II", _VERSION, len(hb)) + hb + payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "TriplaneField":
        if len(data) < 12 or data[:4] != _MAGIC:
            raise CheckpointError("not a field checkpoint")
        version, hlen = struct.unpack("<II", data[4:12])
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"bad checkpoint header: {exc}") from exc
        payload = data[12 + hlen :]
        if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
            raise CheckpointError("checkpoint payload checksum mismatch")
        f = cls(
            header["n"], header["rank"], header["n_features"], header["app_rank"],
            header["center"], header["half_extent"], header["density_shift"],
            header["hidden"], np.float32,
        )
        off = 0
        for name, shape in header["arrays"]:
            count = int(np.prod(shape))
            if off + 4 * count > len(payload):
                raise CheckpointError("truncated checkpoint")
            getattr(f, name)[...] = np.frombuffer(payload, dtype="<f4", count=count, offset=off).reshape(shape)
            off += 4 * count
        if off != len(payload):
            raise CheckpointError("trailing bytes in checkpoint")
        return f

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "TriplaneField":
        return cls.from_bytes(Path(path).read_bytes())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in self.PARAM_NAMES:
            h.update(np.ascontiguousarray(getattr(self, name)).tobytes())
        h.update(self.center.tobytes())
        return h.hexdigest()
