"""Numba kernels for vector-matrix factor interpolation.

Factor layout (C components, last axis contiguous)::

    lines  : (3, n, C)      line a runs along axis a
    planes : (3, n, n, C)   plane a spans the other two axes in increasing order
                            (a=0 -> (y, z), a=1 -> (x, z), a=2 -> (x, y))

Coordinates are contracted points in [-2, 2]^3 mapped linearly onto node
indices [0, n-1].  ``comp_ch[c]`` is the output channel of component c.
The backward kernel is serial so gradient accumulation is deterministic.
"""
import numpy as np
from numba import njit, vectorize

_OTHER = np.array([[1, 2], [0, 2], [0, 1]], dtype=np.int64)


@njit(cache=True, inline="always")
def _locate(x, n):
    u = (x + 2.0) * 0.25 * (n - 1)
    i = int(np.floor(u))
    if i < 0:
        i = 0
    elif i > n - 2:
        i = n - 2
    f = u - i
    if f < 0.0:
        f = 0.0
    elif f > 1.0:
        f = 1.0
    return i, f


@njit(cache=True)
def vm_forward(lines, planes, comp_ch, n_ch, pts):
    P = pts.shape[0]
    n = lines.shape[1]
    C = lines.shape[2]
    out = np.zeros((P, n_ch), dtype=lines.dtype)
    idx = np.empty(3, dtype=np.int64)
    frac = np.empty(3, dtype=lines.dtype)
    for p in range(P):
        for a in range(3):
            i, f = _locate(pts[p, a], n)
            idx[a] = i
            frac[a] = f
        for a in range(3):
            b = _OTHER[a, 0]
            c = _OTHER[a, 1]
            ia, fa = idx[a], frac[a]
            ib, fb = idx[b], frac[b]
            ic, fc = idx[c], frac[c]
            w00 = (1 - fb) * (1 - fc)
            w01 = (1 - fb) * fc
            w10 = fb * (1 - fc)
            w11 = fb * fc
            for k in range(C):
                lv = lines[a, ia, k] * (1 - fa) + lines[a, ia + 1, k] * fa
                pv = (
                    planes[a, ib, ic, k] * w00
                    + planes[a, ib, ic + 1, k] * w01
                    + planes[a, ib + 1, ic, k] * w10
                    + planes[a, ib + 1, ic + 1, k] * w11
                )
                out[p, comp_ch[k]] += lv * pv
    return out


@njit(cache=True)
def vm_backward(lines, planes, comp_ch, pts, g_out, g_lines, g_planes, g_pts, want_pts):
    """Accumulate d(loss)/d(factors) into ``g_lines``/``g_planes`` and,
    if ``want_pts``, d(loss)/d(pts) into ``g_pts``."""
    P = pts.shape[0]
    n = lines.shape[1]
    C = lines.shape[2]
    scale = 0.25 * (n - 1)
    idx = np.empty(3, dtype=np.int64)
    frac = np.empty(3, dtype=lines.dtype)
    inside = np.empty(3, dtype=np.bool_)
    for p in range(P):
        for a in range(3):
            u = (pts[p, a] + 2.0) * scale
            i, f = _locate(pts[p, a], n)
            idx[a] = i
            frac[a] = f
            # clamped coordinates carry no positional gradient
            inside[a] = u >= 0.0 and u <= n - 1
        gx0 = 0.0
        gx1 = 0.0
        gx2 = 0.0
        for a in range(3):
            b = _OTHER[a, 0]
            c = _OTHER[a, 1]
            ia, fa = idx[a], frac[a]
            ib, fb = idx[b], frac[b]
            ic, fc = idx[c], frac[c]
            w00 = (1 - fb) * (1 - fc)
            w01 = (1 - fb) * fc
            w10 = fb * (1 - fc)
            w11 = fb * fc
            ga = 0.0
            gb = 0.0
            gc = 0.0
            for k in range(C):
                g = g_out[p, comp_ch[k]]
                if g == 0.0:
                    continue
                l0 = lines[a, ia, k]
                l1 = lines[a, ia + 1, k]
                lv = l0 * (1 - fa) + l1 * fa
                p00 = planes[a, ib, ic, k]
                p01 = planes[a, ib, ic + 1, k]
                p10 = planes[a, ib + 1, ic, k]
                p11 = planes[a, ib + 1, ic + 1, k]
                pv = p00 * w00 + p01 * w01 + p10 * w10 + p11 * w11
                gl = g * pv
                g_lines[a, ia, k] += gl * (1 - fa)
                g_lines[a, ia + 1, k] += gl * fa
                gp = g * lv
                g_planes[a, ib, ic, k] += gp * w00
                g_planes[a, ib, ic + 1, k] += gp * w01
                g_planes[a, ib + 1, ic, k] += gp * w10
                g_planes[a, ib + 1, ic + 1, k] += gp * w11
                if want_pts:
                    ga += g * (l1 - l0) * pv
                    gb += gp * ((p10 - p00) * (1 - fc) + (p11 - p01) * fc)
                    gc += gp * ((p01 - p00) * (1 - fb) + (p11 - p10) * fb)
            if want_pts:
                # accumulate per-axis positional gradients (in node units)
                if a == 0:
                    gx0 += ga
                    gx1 += gb
                    gx2 += gc
                elif a == 1:
                    gx1 += ga
                    gx0 += gb
                    gx2 += gc
                else:
                    gx2 += ga
                    gx0 += gb
                    gx1 += gc
        if want_pts:
            g_pts[p, 0] = gx0 * scale if inside[0] else 0.0
            g_pts[p, 1] = gx1 * scale if inside[1] else 0.0
            g_pts[p, 2] = gx2 * scale if inside[2] else 0.0


@vectorize(["float32(float32)", "float64(float64)"], cache=True)
def softplus(x):
    if x > 0:
        return x + np.log1p(np.exp(-x))
    return np.log1p(np.exp(x))


@vectorize(["float32(float32)", "float64(float64)"], cache=True)
def sigmoid(x):
    if x >= 0:
        return 1.0 / (1.0 + np.exp(-x))
    e = np.exp(x)
    return e / (1.0 + e)
