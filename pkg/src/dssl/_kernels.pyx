# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled pixel kernels for the augmentation pipeline.

Every routine here has a numpy twin in ``_fallback.py`` that performs the
same float64 arithmetic in the same order, so both backends agree to the
last bit on the reference platform. Loops release the GIL so thread-pool
data workers can run them concurrently.
"""
import numpy as np

from libc.math cimport floor, fmod


def warp_affine(const float[:, :, ::1] img, double[:, ::1] matrix,
                int out_h, int out_w, float fill, bint clamp):
    """Bilinear resampling of a CHW image through an output->input affine map.

    ``matrix`` is 2x3 and maps output pixel centres ``(col, row, 1)`` to
    input coordinates ``(x, y)``. Samples outside the source read ``fill``
    unless ``clamp`` is set, in which case edge pixels are replicated.
    """
    cdef Py_ssize_t C = img.shape[0], H = img.shape[1], W = img.shape[2]
    out = np.empty((C, out_h, out_w), dtype=np.float32)
    cdef float[:, :, ::1] o = out
    cdef double m00 = matrix[0, 0], m01 = matrix[0, 1], m02 = matrix[0, 2]
    cdef double m10 = matrix[1, 0], m11 = matrix[1, 1], m12 = matrix[1, 2]
    cdef Py_ssize_t c, i, j, x0, y0, x1, y1
    cdef double sx, sy, fx, fy, p00, p01, p10, p11, f = fill
    cdef bint in00, in01, in10, in11
    with nogil:
        for i in range(out_h):
            for j in range(out_w):
                sx = m00 * j + m01 * i + m02
                sy = m10 * j + m11 * i + m12
                if clamp:
                    if sx < 0:
                        sx = 0
                    elif sx > W - 1:
                        sx = W - 1
                    if sy < 0:
                        sy = 0
                    elif sy > H - 1:
                        sy = H - 1
                x0 = <Py_ssize_t>floor(sx)
                y0 = <Py_ssize_t>floor(sy)
                fx = sx - x0
                fy = sy - y0
                x1 = x0 + 1
                y1 = y0 + 1
                if clamp:
                    if x1 > W - 1:
                        x1 = W - 1
                    if y1 > H - 1:
                        y1 = H - 1
                in00 = 0 <= x0 < W and 0 <= y0 < H
                in01 = 0 <= x1 < W and 0 <= y0 < H
                in10 = 0 <= x0 < W and 0 <= y1 < H
                in11 = 0 <= x1 < W and 0 <= y1 < H
                for c in range(C):
                    p00 = img[c, y0, x0] if in00 else f
                    p01 = img[c, y0, x1] if in01 else f
                    p10 = img[c, y1, x0] if in10 else f
                    p11 = img[c, y1, x1] if in11 else f
                    o[c, i, j] = <float>((1.0 - fy) * ((1.0 - fx) * p00 + fx * p01)
                                         + fy * ((1.0 - fx) * p10 + fx * p11))
    return out


cdef inline Py_ssize_t _reflect(Py_ssize_t k, Py_ssize_t n) nogil:
    # mirror without repeating the edge sample (numpy "reflect")
    if k < 0:
        return -k
    if k >= n:
        return 2 * (n - 1) - k
    return k


def separable_filter(const float[:, :, ::1] img, const double[::1] taps):
    """Convolve rows then columns with a symmetric odd-length kernel."""
    cdef Py_ssize_t C = img.shape[0], H = img.shape[1], W = img.shape[2]
    cdef Py_ssize_t K = taps.shape[0], r = K // 2
    tmp = np.empty((C, H, W), dtype=np.float64)
    out = np.empty((C, H, W), dtype=np.float32)
    cdef double[:, :, ::1] t = tmp
    cdef float[:, :, ::1] o = out
    cdef Py_ssize_t c, i, j, k
    cdef double acc
    with nogil:
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    acc = 0.0
                    for k in range(K):
                        acc = acc + taps[k] * img[c, i, _reflect(j + k - r, W)]
                    t[c, i, j] = acc
            for i in range(H):
                for j in range(W):
                    acc = 0.0
                    for k in range(K):
                        acc = acc + taps[k] * t[c, _reflect(i + k - r, H), j]
                    o[c, i, j] = <float>acc
    return out


def shift_hue(const float[:, :, ::1] img, double shift):
    """Rotate hue by ``shift`` turns; saturation and value are preserved."""
    cdef Py_ssize_t H = img.shape[1], W = img.shape[2]
    out = np.empty((3, H, W), dtype=np.float32)
    cdef float[:, :, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double r, g, b, mx, mn, d, h, s, v, f, p, q, t, hh
    cdef int sector
    with nogil:
        for i in range(H):
            for j in range(W):
                r = img[0, i, j]
                g = img[1, i, j]
                b = img[2, i, j]
                mx = r if r > g else g
                mx = mx if mx > b else b
                mn = r if r < g else g
                mn = mn if mn < b else b
                d = mx - mn
                v = mx
                if mx > 0:
                    s = d / mx
                else:
                    s = 0.0
                if d == 0:
                    h = 0.0
                elif mx == r:
                    h = fmod((g - b) / d, 6.0)
                    if h < 0:
                        h = h + 6.0
                elif mx == g:
                    h = (b - r) / d + 2.0
                else:
                    h = (r - g) / d + 4.0
                h = h / 6.0 + shift
                h = h - floor(h)
                hh = h * 6.0
                sector = <int>floor(hh)
                if sector >= 6:
                    sector = 0
                f = hh - sector
                p = v * (1.0 - s)
                q = v * (1.0 - s * f)
                t = v * (1.0 - s * (1.0 - f))
                if sector == 0:
                    r, g, b = v, t, p
                elif sector == 1:
                    r, g, b = q, v, p
                elif sector == 2:
                    r, g, b = p, v, t
                elif sector == 3:
                    r, g, b = p, q, v
                elif sector == 4:
                    r, g, b = t, p, v
                else:
                    r, g, b = v, p, q
                o[0, i, j] = <float>r
                o[1, i, j] = <float>g
                o[2, i, j] = <float>b
    return out
