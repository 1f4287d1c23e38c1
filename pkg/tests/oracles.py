"""Brute-force loop implementations used only as test oracles."""

import math

import numpy as np


def conv2d_loops(x, w, b, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for a in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    s = b[o]
                    for c in range(cin):
                        for p in range(kh):
                            for q in range(kw):
                                r, cc = i * stride + p - pad, j * stride + q - pad
                                if 0 <= r < h and 0 <= cc < wd:
                                    s += x[a, c, r, cc] * w[o, c, p, q]
                    out[a, o, i, j] = s
    return out


def max_pool_loops(x, k, stride, pad=0):
    n, c, h, w = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for a in range(n):
        for ch in range(c):
            for i in range(ho):
                for j in range(wo):
                    best = -math.inf
                    for p in range(k):
                        for q in range(k):
                            r, cc = i * stride + p - pad, j * stride + q - pad
                            if 0 <= r < h and 0 <= cc < w:
                                best = max(best, x[a, ch, r, cc])
                    out[a, ch, i, j] = best
    return out


def linear_loops(x, w, b):
    out = np.zeros((x.shape[0], w.shape[0]))
    for i in range(x.shape[0]):
        for o in range(w.shape[0]):
            out[i, o] = b[o] + sum(x[i, k] * w[o, k] for k in range(x.shape[1]))
    return out


def bilinear_loops(x, f):
    n, c, h, w = x.shape
    out = np.zeros((n, c, h * f, w * f))

    def src(d, size):
        s = max((d + 0.5) / f - 0.5, 0.0)
        i0 = min(int(math.floor(s)), size - 1)
        i1 = min(i0 + 1, size - 1)
        return i0, i1, s - i0

    for a in range(n):
        for ch in range(c):
            for i in range(h * f):
                y0, y1, ly = src(i, h)
                for j in range(w * f):
                    x0, x1, lx = src(j, w)
                    top = (1 - lx) * x[a, ch, y0, x0] + lx * x[a, ch, y0, x1]
                    bot = (1 - lx) * x[a, ch, y1, x0] + lx * x[a, ch, y1, x1]
                    out[a, ch, i, j] = (1 - ly) * top + ly * bot
    return out


def softmax_direct(z):
    e = [math.exp(v) for v in z]
    s = sum(e)
    return [v / s for v in e]


def cosine_direct(u, v):
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    return dot / (nu * nv)
