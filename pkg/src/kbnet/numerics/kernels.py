"""Hot inner loops: masked pooling, bilinear gather/scatter and col2im.

Each kernel exists twice: a numba ``@njit`` version and a pure-numpy
version with identical semantics.  The numba path is used when numba
imports cleanly and ``KBNET_DISABLE_NUMBA`` is unset (or ``0``).  Both
implementations are importable by name (``*_nb`` / ``*_np``) so tests and
the benchmark can compare them directly.

Conventions shared by all kernels:

* arrays are float64, NCHW, C-contiguous;
* pooling is stride 1, odd window, same-size output; the returned index
  map holds, per output pixel, the flat ``row * w + col`` position of the
  winning input pixel, or ``-1`` when no input pixel qualifies;
* ties break toward the smallest flat index;
* both pooling paths are separable (column pass, then row pass), O(k)
  work per pixel;
* bilinear coordinates index pixel centres at integers starting from 0.
"""

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
    from numba import njit
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

_flag = os.environ.get("KBNET_DISABLE_NUMBA", "").strip().lower()
USE_NUMBA = numba is not None and _flag in ("", "0", "false", "no")


# ----------------------------------------------------------------------------
# numpy implementations
# ----------------------------------------------------------------------------

def _separable_best(padded, k, h, w, pick, best):
    # Vertical pass keeps the first (smallest-row) winner per column; the
    # horizontal pass then breaks value ties by smallest flat index.
    r = k // 2
    col_win = sliding_window_view(padded, k, axis=2)
    rows = pick(col_win, axis=-1)
    col_val = np.take_along_axis(col_win, rows[..., None], axis=-1)[..., 0]
    flat = (np.arange(h)[:, None] + rows - r) * w + np.arange(w)[None, :]
    fill = np.inf if best is np.min else -np.inf
    col_val = np.pad(col_val, ((0, 0), (0, 0), (0, 0), (r, r)), constant_values=fill)
    flat = np.pad(flat, ((0, 0), (0, 0), (0, 0), (r, r)), constant_values=np.iinfo(np.int64).max)
    val_win = sliding_window_view(col_val, k, axis=3)
    idx_win = sliding_window_view(flat, k, axis=3)
    val = best(val_win, axis=-1)
    cand = np.where(val_win == val[..., None], idx_win, np.iinfo(np.int64).max)
    return val, cand.min(axis=-1)


def masked_min_pool_np(z, k):
    r = k // 2
    zp = np.where(z > 0, z, np.inf)
    zp = np.pad(zp, ((0, 0), (0, 0), (r, r), (0, 0)), constant_values=np.inf)
    val, flat = _separable_best(zp, k, z.shape[2], z.shape[3], np.argmin, np.min)
    valid = np.isfinite(val)
    return np.where(valid, val, 0.0), np.where(valid, flat, -1).astype(np.int64)


def max_pool_np(z, k):
    r = k // 2
    # -inf padding never wins, so the winner is always an in-bounds pixel;
    # for nonnegative inputs this equals zero padding.
    zp = np.pad(z, ((0, 0), (0, 0), (r, r), (0, 0)), constant_values=-np.inf)
    val, flat = _separable_best(zp, k, z.shape[2], z.shape[3], np.argmax, np.max)
    return np.ascontiguousarray(val), flat.astype(np.int64)


def pool_backward_np(grad, index, h, w):
    n, c = grad.shape[:2]
    out = np.zeros((n * c, h * w))
    g = grad.reshape(n * c, -1)
    ix = index.reshape(n * c, -1)
    for p in range(n * c):
        sel = ix[p] >= 0
        out[p] = np.bincount(ix[p][sel], weights=g[p][sel], minlength=h * w)
    return out.reshape(n, c, h, w)


def _bilinear_setup(u, v, h, w):
    ok = (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    us = np.where(ok, u, 0.0)
    vs = np.where(ok, v, 0.0)
    x0 = np.clip(np.floor(us), 0, max(w - 2, 0)).astype(np.int64)
    y0 = np.clip(np.floor(vs), 0, max(h - 2, 0)).astype(np.int64)
    fx = us - x0
    fy = vs - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return ok, x0, y0, x1, y1, fx, fy


def bilinear_forward_np(image, u, v):
    n, c, h, w = image.shape
    ok, x0, y0, x1, y1, fx, fy = _bilinear_setup(u, v, h, w)
    out = np.empty((n, c) + u.shape[1:])
    for b in range(n):
        img = image[b]
        i00 = img[:, y0[b], x0[b]]
        i01 = img[:, y0[b], x1[b]]
        i10 = img[:, y1[b], x0[b]]
        i11 = img[:, y1[b], x1[b]]
        a = fx[b]
        e = fy[b]
        val = (i00 * (1.0 - a) + i01 * a) * (1.0 - e) + (i10 * (1.0 - a) + i11 * a) * e
        out[b] = np.where(ok[b], val, 0.0)
    return out, ok


def bilinear_backward_np(grad, image, u, v):
    n, c, h, w = image.shape
    ok, x0, y0, x1, y1, fx, fy = _bilinear_setup(u, v, h, w)
    g_img = np.zeros((n, c, h * w))
    g_u = np.zeros(u.shape)
    g_v = np.zeros(v.shape)
    for b in range(n):
        img = image[b]
        gb = np.where(ok[b], grad[b], 0.0)
        a = fx[b]
        e = fy[b]
        i00 = img[:, y0[b], x0[b]]
        i01 = img[:, y0[b], x1[b]]
        i10 = img[:, y1[b], x0[b]]
        i11 = img[:, y1[b], x1[b]]
        g_u[b] = np.sum(gb * ((i01 - i00) * (1.0 - e) + (i11 - i10) * e), axis=0)
        g_v[b] = np.sum(gb * ((i10 - i00) * (1.0 - a) + (i11 - i01) * a), axis=0)
        corners = (
            (y0[b], x0[b], (1.0 - a) * (1.0 - e)),
            (y0[b], x1[b], a * (1.0 - e)),
            (y1[b], x0[b], (1.0 - a) * e),
            (y1[b], x1[b], a * e),
        )
        for yy, xx, wt in corners:
            flat = (yy * w + xx).ravel()
            for ch in range(c):
                g_img[b, ch] += np.bincount(flat, weights=(gb[ch] * wt).ravel(), minlength=h * w)
    return g_img.reshape(n, c, h, w), g_u, g_v


def col2im_np(cols, shape, k, stride, padding):
    """Scatter-add columns (n, c, k, k, ho, wo) back onto an (n, c, h, w) image."""
    n, c, h, w = shape
    ho, wo = cols.shape[4:]
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding))
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return np.ascontiguousarray(out)


# ----------------------------------------------------------------------------
# numba implementations
# ----------------------------------------------------------------------------

if numba is not None:

    @njit(cache=True)
    def _pool_nb(z, k, is_min):
        n, c, h, w = z.shape
        r = k // 2
        out = np.zeros(z.shape)
        index = np.full(z.shape, -1, dtype=np.int64)
        col_val = np.empty(w)
        col_idx = np.empty(w, dtype=np.int64)
        for b in range(n):
            for ch in range(c):
                for y in range(h):
                    # vertical pass: best per column, smallest row on ties
                    for x in range(w):
                        best = np.inf if is_min else -np.inf
                        arg = -1
                        for yy in range(max(y - r, 0), min(y + r + 1, h)):
                            val = z[b, ch, yy, x]
                            if is_min:
                                if val > 0.0 and val < best:
                                    best = val
                                    arg = yy * w + x
                            elif val > best:
                                best = val
                                arg = yy * w + x
                        col_val[x] = best
                        col_idx[x] = arg
                    # horizontal pass: smallest flat index on ties
                    for x in range(w):
                        best = np.inf if is_min else -np.inf
                        arg = -1
                        for xx in range(max(x - r, 0), min(x + r + 1, w)):
                            j = col_idx[xx]
                            if j < 0:
                                continue
                            val = col_val[xx]
                            better = val < best if is_min else val > best
                            if better or (val == best and j < arg):
                                best = val
                                arg = j
                        if arg >= 0:
                            out[b, ch, y, x] = best
                            index[b, ch, y, x] = arg
        return out, index

    def masked_min_pool_nb(z, k):
        return _pool_nb(np.ascontiguousarray(z), k, True)

    def max_pool_nb(z, k):
        return _pool_nb(np.ascontiguousarray(z), k, False)

    @njit(cache=True)
    def pool_backward_nb(grad, index, h, w):
        n, c = grad.shape[:2]
        out = np.zeros((n, c, h * w))
        for b in range(n):
            for ch in range(c):
                for y in range(grad.shape[2]):
                    for x in range(grad.shape[3]):
                        p = index[b, ch, y, x]
                        if p >= 0:
                            out[b, ch, p] += grad[b, ch, y, x]
        return out.reshape(n, c, h, w)

    @njit(cache=True)
    def _corner(u, v, h, w):
        x0 = int(np.floor(u))
        y0 = int(np.floor(v))
        if x0 > w - 2:
            x0 = max(w - 2, 0)
        if y0 > h - 2:
            y0 = max(h - 2, 0)
        return x0, y0, min(x0 + 1, w - 1), min(y0 + 1, h - 1), u - x0, v - y0

    @njit(cache=True)
    def bilinear_forward_nb(image, u, v):
        n, c, h, w = image.shape
        ho, wo = u.shape[1], u.shape[2]
        out = np.zeros((n, c, ho, wo))
        ok = np.zeros(u.shape, dtype=np.bool_)
        for b in range(n):
            for y in range(ho):
                for x in range(wo):
                    uu = u[b, y, x]
                    vv = v[b, y, x]
                    if not (uu >= 0.0 and uu <= w - 1 and vv >= 0.0 and vv <= h - 1):
                        continue
                    ok[b, y, x] = True
                    x0, y0, x1, y1, a, e = _corner(uu, vv, h, w)
                    for ch in range(c):
                        i00 = image[b, ch, y0, x0]
                        i01 = image[b, ch, y0, x1]
                        i10 = image[b, ch, y1, x0]
                        i11 = image[b, ch, y1, x1]
                        out[b, ch, y, x] = ((i00 * (1.0 - a) + i01 * a) * (1.0 - e)
                                            + (i10 * (1.0 - a) + i11 * a) * e)
        return out, ok

    @njit(cache=True)
    def bilinear_backward_nb(grad, image, u, v):
        n, c, h, w = image.shape
        ho, wo = u.shape[1], u.shape[2]
        g_img = np.zeros(image.shape)
        g_u = np.zeros(u.shape)
        g_v = np.zeros(v.shape)
        for b in range(n):
            for y in range(ho):
                for x in range(wo):
                    uu = u[b, y, x]
                    vv = v[b, y, x]
                    if not (uu >= 0.0 and uu <= w - 1 and vv >= 0.0 and vv <= h - 1):
                        continue
                    x0, y0, x1, y1, a, e = _corner(uu, vv, h, w)
                    su = 0.0
                    sv = 0.0
                    for ch in range(c):
                        g = grad[b, ch, y, x]
                        i00 = image[b, ch, y0, x0]
                        i01 = image[b, ch, y0, x1]
                        i10 = image[b, ch, y1, x0]
                        i11 = image[b, ch, y1, x1]
                        su += g * ((i01 - i00) * (1.0 - e) + (i11 - i10) * e)
                        sv += g * ((i10 - i00) * (1.0 - a) + (i11 - i01) * a)
                        g_img[b, ch, y0, x0] += g * (1.0 - a) * (1.0 - e)
                        g_img[b, ch, y0, x1] += g * a * (1.0 - e)
                        g_img[b, ch, y1, x0] += g * (1.0 - a) * e
                        g_img[b, ch, y1, x1] += g * a * e
                    g_u[b, y, x] = su
                    g_v[b, y, x] = sv
        return g_img, g_u, g_v

    @njit(cache=True)
    def _col2im_core(cols, hp, wp, stride):
        n, c, k, _, ho, wo = cols.shape
        out = np.zeros((n, c, hp, wp))
        for b in range(n):
            for ch in range(c):
                for i in range(k):
                    for j in range(k):
                        for y in range(ho):
                            for x in range(wo):
                                out[b, ch, y * stride + i, x * stride + j] += cols[b, ch, i, j, y, x]
        return out

    def col2im_nb(cols, shape, k, stride, padding):
        n, c, h, w = shape
        out = _col2im_core(np.ascontiguousarray(cols), h + 2 * padding, w + 2 * padding, stride)
        if padding:
            out = out[:, :, padding:-padding, padding:-padding]
        return np.ascontiguousarray(out)


if USE_NUMBA:
    masked_min_pool = masked_min_pool_nb
    max_pool = max_pool_nb
    pool_backward = pool_backward_nb
    bilinear_forward = bilinear_forward_nb
    bilinear_backward = bilinear_backward_nb
    col2im = col2im_nb
else:
    masked_min_pool = masked_min_pool_np
    max_pool = max_pool_np
    pool_backward = pool_backward_np
    bilinear_forward = bilinear_forward_np
    bilinear_backward = bilinear_backward_np
    col2im = col2im_np
