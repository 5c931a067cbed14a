"""Independent brute-force references the fast implementations are tested against.

Everything here is deliberately written as direct loops over the defining
formulas and shares no code with hypercol.ops.
"""

import numpy as np


def conv2d_naive(x, w, bias=None, stride=(1, 1), padding=(0, 0)):
    """Direct 6-loop cross-correlation."""
    n, ci, h, wd = x.shape
    oc, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    xp = np.zeros((n, ci, h + 2 * ph, wd + 2 * pw), dtype=np.float64)
    xp[:, :, ph:ph + h, pw:pw + wd] = x
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (wd + 2 * pw - kw) // sw + 1
    out = np.zeros((n, oc, oh, ow), dtype=np.float64)
    for b in range(n):
        for o in range(oc):
            for oy in range(oh):
                for ox in range(ow):
                    acc = 0.0
                    for c in range(ci):
                        for dy in range(kh):
                            for dx in range(kw):
                                acc += xp[b, c, oy * sh + dy, ox * sw + dx] * w[o, c, dy, dx]
                    out[b, o, oy, ox] = acc
            if bias is not None:
                out[b, o] += bias.reshape(-1)[o]
    return out


def max_pool2d_naive(x, kernel, stride):
    n, c, h, w = x.shape
    kh, kw = kernel
    sh, sw = stride
    oh = (h - kh) // sh + 1
    ow = (w - kw) // sw + 1
    out = np.zeros((n, c, oh, ow), dtype=np.float64)
    for b in range(n):
        for ch in range(c):
            for oy in range(oh):
                for ox in range(ow):
                    out[b, ch, oy, ox] = x[b, ch, oy * sh:oy * sh + kh,
                                           ox * sw:ox * sw + kw].max()
    return out


def linear_naive(x, w, bias):
    """Double-loop matmul: x (n, f), w (o, f), bias (o,)."""
    n, f = x.shape
    o = w.shape[0]
    out = np.zeros((n, o), dtype=np.float64)
    for i in range(n):
        for j in range(o):
            acc = bias[j]
            for k in range(f):
                acc += x[i, k] * w[j, k]
            out[i, j] = acc
    return out


def bilinear_naive(x, out_h, out_w):
    """Per-output-pixel align-corners interpolation."""
    n, c, h, w = x.shape
    out = np.zeros((n, c, out_h, out_w), dtype=np.float64)
    for oy in range(out_h):
        sy = oy * (h - 1) / (out_h - 1) if out_h > 1 else 0.0
        y0 = min(int(np.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for ox in range(out_w):
            sx = ox * (w - 1) / (out_w - 1) if out_w > 1 else 0.0
            x0 = min(int(np.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[:, :, oy, ox] = (
                x[:, :, y0, x0] * (1 - fy) * (1 - fx)
                + x[:, :, y0, x1] * (1 - fy) * fx
                + x[:, :, y1, x0] * fy * (1 - fx)
                + x[:, :, y1, x1] * fy * fx
            )
    return out


def softmax_naive(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.zeros_like(z)
    for i in range(z.shape[0]):
        e = np.exp(z[i] - z[i].max())
        out[i] = e / e.sum()
    return out


def cross_entropy_naive(z, labels):
    p = softmax_naive(z)
    return float(np.mean([-np.log(p[i, labels[i]]) for i in range(len(labels))]))
