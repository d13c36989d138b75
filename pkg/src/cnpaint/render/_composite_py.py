"""NumPy fallback for the compositing kernel.

Mirrors the Cython extension bit-for-bit up to float rounding: both compute
the inverse warp and the bilinear lookup in double precision and store the
blended result back into the float32 canvas.
"""

from __future__ import annotations

import numpy as np


def composite_region(canvas, prim, inv, origin, color, x0, x1, y0, y1):
    """Alpha-composite one warped primitive over canvas[y0:y1, x0:x1].

    ``inv`` is the 2x2 inverse of the stroke's linear part, ``origin`` the
    stroke center in pixel coordinates. Pixel centers sit at integer + 0.5.
    """
    if x0 >= x1 or y0 >= y1:
        return
    S = prim.shape[0]
    ys = np.arange(y0, y1, dtype=np.float64) + 0.5 - origin[1]
    xs = np.arange(x0, x1, dtype=np.float64) + 0.5 - origin[0]
    dx, dy = np.meshgrid(xs, ys)
    u = inv[0, 0] * dx + inv[0, 1] * dy + 0.5
    v = inv[1, 0] * dx + inv[1, 1] * dy + 0.5

    # Bilinear sample with zero outside the primitive.
    su = u * S - 0.5
    sv = v * S - 0.5
    i0 = np.floor(su).astype(np.int64)
    j0 = np.floor(sv).astype(np.int64)
    fu = su - i0
    fv = sv - j0

    prim64 = prim.astype(np.float64, copy=False)

    def tap(jj, ii):
        ok = (ii >= 0) & (ii < S) & (jj >= 0) & (jj < S)
        out = np.zeros(ii.shape, dtype=np.float64)
        out[ok] = prim64[jj[ok], ii[ok]]
        return out

    a00 = tap(j0, i0)
    a01 = tap(j0, i0 + 1)
    a10 = tap(j0 + 1, i0)
    a11 = tap(j0 + 1, i0 + 1)
    alpha = (a00 * (1 - fu) + a01 * fu) * (1 - fv) + (a10 * (1 - fu) + a11 * fu) * fv

    region = canvas[y0:y1, x0:x1, :].astype(np.float64)
    blended = region * (1.0 - alpha[..., None]) + np.asarray(color, dtype=np.float64) * alpha[..., None]
    canvas[y0:y1, x0:x1, :] = blended.astype(np.float32)
