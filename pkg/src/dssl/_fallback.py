"""Pure-numpy twins of the compiled kernels in ``_kernels.pyx``.

Arithmetic is carried out in float64 in the same order as the compiled
loops, so outputs match the extension bit for bit on IEEE-754 hardware.
"""
import numpy as np


def warp_affine(img, matrix, out_h, out_w, fill, clamp):
    img = np.asarray(img, dtype=np.float32)
    C, H, W = img.shape
    m = np.asarray(matrix, dtype=np.float64)
    jj, ii = np.meshgrid(np.arange(out_w, dtype=np.float64),
                         np.arange(out_h, dtype=np.float64))
    sx = m[0, 0] * jj + m[0, 1] * ii + m[0, 2]
    sy = m[1, 0] * jj + m[1, 1] * ii + m[1, 2]
    if clamp:
        sx = np.clip(sx, 0, W - 1)
        sy = np.clip(sy, 0, H - 1)
    x0 = np.floor(sx).astype(np.intp)
    y0 = np.floor(sy).astype(np.intp)
    fx = sx - x0
    fy = sy - y0
    x1 = x0 + 1
    y1 = y0 + 1
    if clamp:
        x1 = np.minimum(x1, W - 1)
        y1 = np.minimum(y1, H - 1)
    f = np.float64(np.float32(fill))
    src = img.astype(np.float64)

    def sample(y, x):
        valid = (x >= 0) & (x < W) & (y >= 0) & (y < H)
        vals = src[:, np.clip(y, 0, H - 1), np.clip(x, 0, W - 1)]
        return np.where(valid, vals, f)

    p00, p01 = sample(y0, x0), sample(y0, x1)
    p10, p11 = sample(y1, x0), sample(y1, x1)
    out = (1.0 - fy) * ((1.0 - fx) * p00 + fx * p01) + fy * ((1.0 - fx) * p10 + fx * p11)
    return out.astype(np.float32)


def separable_filter(img, taps):
    img = np.asarray(img, dtype=np.float32)
    taps = np.asarray(taps, dtype=np.float64)
    K = taps.shape[0]
    r = K // 2
    C, H, W = img.shape
    padded = np.pad(img.astype(np.float64), ((0, 0), (0, 0), (r, r)), mode="reflect")
    tmp = np.zeros((C, H, W), dtype=np.float64)
    for k in range(K):
        tmp = tmp + taps[k] * padded[:, :, k:k + W]
    padded = np.pad(tmp, ((0, 0), (r, r), (0, 0)), mode="reflect")
    out = np.zeros((C, H, W), dtype=np.float64)
    for k in range(K):
        out = out + taps[k] * padded[:, k:k + H, :]
    return out.astype(np.float32)


def shift_hue(img, shift):
    img = np.asarray(img, dtype=np.float32).astype(np.float64)
    r, g, b = img[0], img[1], img[2]
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    d = mx - mn
    v = mx
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(mx > 0, d / mx, 0.0)
        hr = np.fmod((g - b) / d, 6.0)
        hr = np.where(hr < 0, hr + 6.0, hr)
        hg = (b - r) / d + 2.0
        hb = (r - g) / d + 4.0
    h = np.select([d == 0, mx == r, mx == g], [0.0, hr, hg], default=hb)
    h = h / 6.0 + shift
    h = h - np.floor(h)
    hh = h * 6.0
    sector = np.floor(hh).astype(np.intp)
    sector[sector >= 6] = 0
    f = hh - sector
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    conds = [sector == k for k in range(5)]
    out = np.empty((3,) + r.shape, dtype=np.float64)
    out[0] = np.select(conds, [v, q, p, p, t], default=v)
    out[1] = np.select(conds, [t, v, v, q, p], default=p)
    out[2] = np.select(conds, [p, p, t, v, v], default=q)
    return out.astype(np.float32)
