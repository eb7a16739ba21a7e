"""Slow, obviously-correct reference implementations used as test oracles."""

import math

import numpy as np


def conv2d_loops(x, w, b=None, stride=1, padding=0):
    n, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    xp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding))
    xp[:, :, padding:padding + h, padding:padding + wd] = x
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    out = np.zeros((n, co, ho, wo))
    for bi in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for cc in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[bi, cc, i * stride + di, j * stride + dj] * w[o, cc, di, dj]
                    out[bi, o, i, j] = acc + (0.0 if b is None else b[o])
    return out


def window_scan_min(z, k):
    """Masked min pooling by scanning each window: min of positive entries, 0 if none."""
    r = k // 2
    h, w = z.shape
    out = np.zeros_like(z)
    for i in range(h):
        for j in range(w):
            best = math.inf
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    y, x = i + di, j + dj
                    if 0 <= y < h and 0 <= x < w and z[y, x] > 0 and z[y, x] < best:
                        best = z[y, x]
            out[i, j] = 0.0 if best == math.inf else best
    return out


def window_scan_max(z, k):
    """Max pooling with zero padding by scanning each window."""
    r = k // 2
    h, w = z.shape
    out = np.zeros_like(z)
    for i in range(h):
        for j in range(w):
            best = 0.0
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    y, x = i + di, j + dj
                    if 0 <= y < h and 0 <= x < w:
                        best = max(best, z[y, x])
            out[i, j] = best
    return out


def bilinear_point(img, u, v):
    """4-neighbour bilinear value of img (c, h, w) at column u, row v (in-bounds)."""
    h, w = img.shape[1:]
    x0 = min(int(math.floor(u)), w - 2)
    y0 = min(int(math.floor(v)), h - 2)
    a, b = u - x0, v - y0
    return ((1 - a) * (1 - b) * img[:, y0, x0] + a * (1 - b) * img[:, y0, x0 + 1]
            + (1 - a) * b * img[:, y0 + 1, x0] + a * b * img[:, y0 + 1, x0 + 1])


def sparse_grid(rng, h, w, density):
    """Random positive depths on a random support, with distinct values (no ties)."""
    z = np.zeros((h, w))
    mask = rng.random((h, w)) < density
    z[mask] = rng.permutation(np.linspace(0.5, 10.0, mask.sum())) if mask.any() else []
    return z


def ssim_loops(a, b, c1=0.01 ** 2, c2=0.03 ** 2):
    """Per-pixel SSIM of two 2-D arrays with reflect-padded 3x3 windows."""
    pa, pb = np.pad(a, 1, mode="reflect"), np.pad(b, 1, mode="reflect")
    out = np.empty(a.shape)
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            x = pa[i:i + 3, j:j + 3].ravel()
            y = pb[i:i + 3, j:j + 3].ravel()
            mx, my = x.mean(), y.mean()
            vx, vy = ((x - mx) ** 2).mean(), ((y - my) ** 2).mean()
            cxy = ((x - mx) * (y - my)).mean()
            out[i, j] = (2 * mx * my + c1) * (2 * cxy + c2) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
    return out
