# Compositing hot loop: inverse-warp the brush alpha into the canvas region
# and alpha-blend in place. Double precision internally, float32 storage,
# matching the NumPy fallback in _composite_py.

import numpy as np

cimport numpy as cnp

cnp.import_array()

cdef extern from "math.h":
    double libc_floor "floor"(double x) nogil


def composite_region(cnp.float32_t[:, :, ::1] canvas,
                     cnp.float32_t[:, ::1] prim,
                     cnp.float64_t[:, ::1] inv,
                     (double, double) origin,
                     (double, double, double) color,
                     Py_ssize_t x0, Py_ssize_t x1,
                     Py_ssize_t y0, Py_ssize_t y1):
    cdef Py_ssize_t S = prim.shape[0]
    cdef double i00 = inv[0, 0], i01 = inv[0, 1], i10 = inv[1, 0], i11 = inv[1, 1]
    cdef double ox = origin[0], oy = origin[1]
    cdef double cr = color[0], cg = color[1], cb = color[2]
    cdef Py_ssize_t px, py, i0, j0
    cdef double dx, dy, u, v, su, sv, fu, fv
    cdef double a00, a01, a10, a11, alpha, keep

    if x0 >= x1 or y0 >= y1:
        return

    for py in range(y0, y1):
        dy = (py + 0.5) - oy
        for px in range(x0, x1):
            dx = (px + 0.5) - ox
            u = i00 * dx + i01 * dy + 0.5
            v = i10 * dx + i11 * dy + 0.5
            su = u * S - 0.5
            sv = v * S - 0.5
            i0 = <Py_ssize_t>libc_floor(su)
            j0 = <Py_ssize_t>libc_floor(sv)
            fu = su - i0
            fv = sv - j0
            a00 = prim[j0, i0] if 0 <= i0 < S and 0 <= j0 < S else 0.0
            a01 = prim[j0, i0 + 1] if 0 <= i0 + 1 < S and 0 <= j0 < S else 0.0
            a10 = prim[j0 + 1, i0] if 0 <= i0 < S and 0 <= j0 + 1 < S else 0.0
            a11 = prim[j0 + 1, i0 + 1] if 0 <= i0 + 1 < S and 0 <= j0 + 1 < S else 0.0
            alpha = (a00 * (1 - fu) + a01 * fu) * (1 - fv) + (a10 * (1 - fu) + a11 * fu) * fv
            if alpha == 0.0:
                continue
            keep = 1.0 - alpha
            canvas[py, px, 0] = <cnp.float32_t>(canvas[py, px, 0] * keep + cr * alpha)
            canvas[py, px, 1] = <cnp.float32_t>(canvas[py, px, 1] * keep + cg * alpha)
            canvas[py, px, 2] = <cnp.float32_t>(canvas[py, px, 2] * keep + cb * alpha)
