"""Differentiable operations on :class:`Tensor`.

Every function accepts Tensors or plain arrays/scalars (treated as
constants) and returns a Tensor.  Backward closures capture only what
they need from the forward pass.
"""

import numpy as np

from kbnet.errors import ShapeError
from kbnet.numerics import kernels
from kbnet.numerics.tensor import as_tensor, record


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise ---------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), bw)


def square(x):
    x = as_tensor(x)
    return record(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,))


def absolute(x):
    """|x| with subgradient sign(x) (0 at the kink)."""
    x = as_tensor(x)
    return record(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def sigmoid(x):
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return record(out, (x,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(x, slope=0.1):
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope)
    return record(x.data * scale, (x,), lambda g: (g * scale,))


def clip(x, lo, hi):
    """Clamp to [lo, hi]; gradient passes only where lo < x < hi."""
    x = as_tensor(x)
    inside = (x.data > lo) & (x.data < hi)
    return record(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# -- reductions and shape ------------------------------------------------

def sum(x, axis=None, keepdims=False):
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(out, (x,), bw)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape):
    x = as_tensor(x)
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def getitem(x, key):
    x = as_tensor(x)

    def bw(g):
        gx = np.zeros_like(x.data)
        gx[key] += g
        return (gx,)

    return record(x.data[key], (x,), bw)


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return record(out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return record(a.data @ b.data, (a, b), bw)


# -- spatial ops ---------------------------------------------------------

def pad(x, p, mode="zero"):
    """Pad the two spatial axes of an NCHW tensor by ``p`` on every side.

    ``mode`` is ``zero``, ``reflect`` (mirror without repeating the edge)
    or ``edge``.
    """
    x = as_tensor(x)
    if p == 0:
        return x
    h, w = x.shape[2:]
    if mode == "zero":
        out = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
        return record(out, (x,), lambda g: (g[:, :, p:-p, p:-p].copy(),))
    np_mode = {"reflect": "reflect", "edge": "edge"}[mode]
    ih = np.pad(np.arange(h), p, mode=np_mode)
    iw = np.pad(np.arange(w), p, mode=np_mode)
    out = x.data[:, :, ih][:, :, :, iw]

    def bw(g):
        gw = np.zeros(g.shape[:3] + (w,))
        np.add.at(gw, (slice(None), slice(None), slice(None), iw), g)
        gh = np.zeros(x.shape)
        np.add.at(gh, (slice(None), slice(None), ih), gw)
        return (gh,)

    return record(out, (x,), bw)


def _box_sum(a, k):
    # valid k x k window sums over the last two axes
    c = np.cumsum(np.cumsum(a, axis=-2), axis=-1)
    c = np.pad(c, ((0, 0),) * (a.ndim - 2) + ((1, 0), (1, 0)))
    return c[..., k:, k:] - c[..., :-k, k:] - c[..., k:, :-k] + c[..., :-k, :-k]


def avg_pool2d(x, k):
    """Mean over valid k x k windows, stride 1."""
    x = as_tensor(x)
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))
    out = win.sum(axis=(-2, -1)) / (k * k)

    def bw(g):
        gp = np.pad(g, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
        return (_box_sum(gp, k) / (k * k),)

    return record(out, (x,), bw)


def upsample_nearest2x(x):
    x = as_tensor(x)
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        n, c, h, w = x.shape
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record(out, (x,), bw)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation, NCHW input, weight (c_out, c_in, k, k)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got input {x.shape} and weight {weight.shape}")
    c_out, c_in, k, k2 = weight.shape
    if k != k2 or x.shape[1] != c_in:
        raise ShapeError(f"conv2d shape mismatch: input {x.shape} vs weight {weight.shape}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be >= 1, got {stride}")
    n, _, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty: input {x.shape} vs weight {weight.shape}")
    wmat = weight.data.reshape(c_out, -1)
    if k == 1 and stride == 1 and padding == 0:
        cols = x.data.reshape(n, c_in, h * w)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        # (n, c, k, k, ho, wo) so that rows of the column matrix are (c, i, j)
        cols = np.ascontiguousarray(win[:, :, :ho, :wo].transpose(0, 1, 4, 5, 2, 3)).reshape(n, c_in * k * k, ho * wo)
    out = np.matmul(wmat, cols).reshape(n, c_out, ho, wo)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data.reshape(1, -1, 1, 1)
        inputs.append(bias)

    def bw(g):
        gm = g.reshape(n, c_out, ho * wo)
        gw = None
        if weight.requires_grad:
            gw = gm[0] @ cols[0].T
            for b in range(1, n):
                gw += gm[b] @ cols[b].T
            gw = gw.reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wmat.T, gm)
            if k == 1 and stride == 1 and padding == 0:
                gx = gcols.reshape(x.shape)
            else:
                gx = kernels.col2im(gcols.reshape(n, c_in, k, k, ho, wo), x.shape, k, stride, padding)
        res = [gx, gw]
        if bias is not None:
            res.append(g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)
        return tuple(res)

    return record(out, inputs, bw)


def _check_pool_kernel(k):
    if k < 1 or k % 2 == 0:
        raise ShapeError(f"pooling kernel must be a positive odd size, got {k}")


def masked_min_pool(z, k):
    """Min over k x k windows of strictly positive entries; 0 where none."""
    z = as_tensor(z)
    _check_pool_kernel(k)
    out, index = kernels.masked_min_pool(z.data, k)
    h, w = z.shape[2:]
    return record(out, (z,), lambda g: (kernels.pool_backward(np.ascontiguousarray(g), index, h, w),))


def max_pool(z, k):
    """Max over k x k windows, stride 1, zero-padded borders."""
    z = as_tensor(z)
    _check_pool_kernel(k)
    out, index = kernels.max_pool(z.data, k)
    h, w = z.shape[2:]
    return record(out, (z,), lambda g: (kernels.pool_backward(np.ascontiguousarray(g), index, h, w),))


def bilinear_sample(image, u, v):
    """Sample ``image`` (n, c, h, w) at per-pixel coordinates ``u``, ``v``.

    ``u``/``v`` have shape (n, ho, wo) (column, row; pixel centres at
    integers).  Returns the sampled (n, c, ho, wo) Tensor and a boolean
    (n, ho, wo) validity mask; out-of-range or non-finite coordinates give
    0 and are masked.  Gradients flow to the image and both coordinate maps.
    """
    image, u, v = as_tensor(image), as_tensor(u), as_tensor(v)
    if u.shape != v.shape or u.ndim != 3 or u.shape[0] != image.shape[0]:
        raise ShapeError(f"bilinear_sample coordinate shapes {u.shape}/{v.shape} do not fit image {image.shape}")
    out, ok = kernels.bilinear_forward(image.data, u.data, v.data)

    def bw(g):
        gi, gu, gv = kernels.bilinear_backward(np.ascontiguousarray(g), image.data, u.data, v.data)
        return gi, gu, gv

    return record(out, (image, u, v), bw), ok
