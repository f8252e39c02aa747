"""Hot inner loops: patch extraction for convolutions and polygon rasterization.

Each kernel has a numba-compiled version and a pure-numpy version with the
same signature. The numba path is used when numba imports and the
environment variable ``FUNDSEG_DISABLE_NUMBA`` is unset (or "0"). Both paths
produce bit-identical results; the test-suite checks this.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_disabled = os.environ.get("FUNDSEG_DISABLE_NUMBA", "0").strip().lower() not in ("", "0", "false", "no")

try:
    if _disabled:
        raise ImportError("disabled by FUNDSEG_DISABLE_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


# --------------------------------------------------------------------------
# numpy reference kernels

def im2col_np(xp, kh, kw, stride, ho, wo):
    """Gather (N, C, Hp, Wp) padded input into (N, C*kh*kw, ho*wo) columns."""
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, ho, wo, kh, kw) -> (N, C, kh, kw, ho, wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)


def col2im_np(cols, c, hp, wp, kh, kw, stride, ho, wo):
    """Scatter-add columns back into a zero (N, C, hp, wp) buffer (adjoint of im2col)."""
    n = cols.shape[0]
    out = np.zeros((n, c, hp, wp))
    c6 = cols.reshape(n, c, kh, kw, ho, wo)
    hi = (ho - 1) * stride + 1
    wi = (wo - 1) * stride + 1
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki : ki + hi : stride, kj : kj + wi : stride] += c6[:, :, ki, kj]
    return out


def rasterize_np(xs, ys, width, height, tol):
    """Even-odd fill of a closed polygon sampled at integer pixel centers.

    Pixel (i, j) has its center at (x=j, y=i). Centers within ``tol`` of an
    edge count as inside.
    """
    py, px = np.mgrid[0:height, 0:width].astype(np.float64)
    inside = np.zeros((height, width), dtype=bool)
    on_edge = np.zeros((height, width), dtype=bool)
    m = len(xs)
    for k in range(m):
        x1, y1 = xs[k], ys[k]
        x2, y2 = xs[(k + 1) % m], ys[(k + 1) % m]
        if y2 != y1:
            crosses = (y1 > py) != (y2 > py)
            xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
            inside ^= crosses & (px < xint)
        dx, dy = x2 - x1, y2 - y1
        seg2 = dx * dx + dy * dy
        cross = (px - x1) * dy - (py - y1) * dx
        dot = (px - x1) * dx + (py - y1) * dy
        if seg2 > 0:
            on_edge |= (np.abs(cross) <= tol * np.sqrt(seg2)) & (dot >= -tol) & (dot <= seg2 + tol)
    return inside | on_edge


# --------------------------------------------------------------------------
# numba kernels

if HAVE_NUMBA:

    # Outputs are allocated by numpy and filled in place: arrays created inside
    # jitted code pay page-fault costs that numpy's allocator amortizes.

    @njit(cache=True, nogil=True)
    def _im2col_fill(xp, kh, kw, stride, ho, wo, cols):
        n, c = xp.shape[0], xp.shape[1]
        for b in range(n):
            for ch in range(c):
                for ki in range(kh):
                    for kj in range(kw):
                        row = (ch * kh + ki) * kw + kj
                        for i in range(ho):
                            src = i * stride + ki
                            base = i * wo
                            for j in range(wo):
                                cols[b, row, base + j] = xp[b, ch, src, j * stride + kj]

    def im2col_nb(xp, kh, kw, stride, ho, wo):
        cols = np.empty((xp.shape[0], xp.shape[1] * kh * kw, ho * wo))
        _im2col_fill(xp, kh, kw, stride, ho, wo, cols)
        return cols

    @njit(cache=True, nogil=True)
    def _col2im_fill(cols, c, kh, kw, stride, ho, wo, out):
        n = cols.shape[0]
        # same (ki, kj) accumulation order as the numpy kernel -> identical rounding
        for ki in range(kh):
            for kj in range(kw):
                for b in range(n):
                    for ch in range(c):
                        row = (ch * kh + ki) * kw + kj
                        for i in range(ho):
                            dst = i * stride + ki
                            base = i * wo
                            for j in range(wo):
                                out[b, ch, dst, j * stride + kj] += cols[b, row, base + j]

    def col2im_nb(cols, c, hp, wp, kh, kw, stride, ho, wo):
        out = np.zeros((cols.shape[0], c, hp, wp))
        _col2im_fill(cols, c, kh, kw, stride, ho, wo, out)
        return out

    @njit(cache=True, nogil=True)
    def rasterize_nb(xs, ys, width, height, tol):
        m = xs.shape[0]
        mask = np.zeros((height, width), dtype=np.bool_)
        for i in range(height):
            py = float(i)
            for j in range(width):
                px = float(j)
                inside = False
                edge = False
                for k in range(m):
                    x1 = xs[k]
                    y1 = ys[k]
                    k2 = k + 1 if k + 1 < m else 0
                    x2 = xs[k2]
                    y2 = ys[k2]
                    if ((y1 > py) != (y2 > py)) and y2 != y1:
                        xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
                        if px < xint:
                            inside = not inside
                    dx = x2 - x1
                    dy = y2 - y1
                    seg2 = dx * dx + dy * dy
                    if seg2 > 0 and not edge:
                        cross = (px - x1) * dy - (py - y1) * dx
                        dot = (px - x1) * dx + (py - y1) * dy
                        if abs(cross) <= tol * np.sqrt(seg2) and dot >= -tol and dot <= seg2 + tol:
                            edge = True
                mask[i, j] = inside or edge
        return mask

    im2col = im2col_nb
    col2im = col2im_nb
    rasterize_kernel = rasterize_nb
else:
    im2col = im2col_np
    col2im = col2im_np
    rasterize_kernel = rasterize_np


BACKEND = "numba" if HAVE_NUMBA else "numpy"
