"""Unsupervised training objective: photometric, sparse-depth and smoothness terms."""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from kbnet.errors import DegenerateWarpError, ShapeError, TrainingFault
from kbnet.numerics import ops
from kbnet.numerics.tensor import Tensor, as_tensor

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass(frozen=True)
class LossWeights:
    w_ph: float = 1.0
    w_co: float = 0.15
    w_st: float = 0.95
    w_sz: float = 0.6
    w_sm: float = 0.04

    def __post_init__(self):
        for name in ("w_ph", "w_co", "w_st", "w_sz", "w_sm"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {getattr(self, name)}")

    @classmethod
    def preset(cls, dataset):
        if dataset == "kitti":
            return cls()
        if dataset in ("void", "nyuv2", "synthetic"):
            return cls(w_sz=2.0, w_sm=2.0)
        raise ValueError(f"no loss-weight preset for {dataset!r}")


def _box3(x):
    return ops.avg_pool2d(ops.pad(x, 1, mode="reflect"), 3)


def ssim(a, b):
    """Per-pixel, per-channel SSIM over 3x3 uniform windows (reflect-padded)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim inputs differ in shape: {a.shape} vs {b.shape}")
    mu_a = _box3(a)
    mu_b = _box3(b)
    mu_aa = ops.square(mu_a)
    mu_bb = ops.square(mu_b)
    mu_ab = ops.mul(mu_a, mu_b)
    var_a = ops.sub(_box3(ops.square(a)), mu_aa)
    var_b = ops.sub(_box3(ops.square(b)), mu_bb)
    cov = ops.sub(_box3(ops.mul(a, b)), mu_ab)
    num = ops.mul(ops.add(ops.mul(mu_ab, 2.0), SSIM_C1), ops.add(ops.mul(cov, 2.0), SSIM_C2))
    den = ops.mul(ops.add(ops.add(mu_aa, mu_bb), SSIM_C1), ops.add(ops.add(var_a, var_b), SSIM_C2))
    return ops.div(num, den)


def photometric_loss(image_t, reconstructions, w):
    """Masked L1 + SSIM reprojection error, averaged over the adjacent frames.

    ``reconstructions`` is a sequence of (image_hat, mask) pairs as returned
    by :func:`kbnet.camera.reconstruct`.  Each frame's error is normalised
    by its own valid-pixel count.  Masked pixels of ``image_hat`` are
    replaced by the target before the SSIM windows see them, so their
    values never matter.
    """
    image_t = as_tensor(image_t)
    terms = []
    for image_hat, mask in reconstructions:
        image_hat = as_tensor(image_hat)
        if image_hat.shape != image_t.shape:
            raise ShapeError(f"reconstruction {image_hat.shape} vs target {image_t.shape}")
        m = np.asarray(mask, dtype=np.float64).reshape(image_t.shape[0], 1, *image_t.shape[2:])
        count = m.sum()
        if count == 0:
            raise DegenerateWarpError("no valid pixels in a reconstruction")
        blended = ops.add(ops.mul(image_hat, m), image_t.data * (1.0 - m))
        l1 = ops.mean(ops.absolute(ops.sub(blended, image_t)), axis=1, keepdims=True)
        dissim = ops.sub(1.0, ops.mean(ssim(blended, image_t), axis=1, keepdims=True))
        per_pixel = ops.add(ops.mul(l1, w.w_co), ops.mul(dissim, w.w_st))
        terms.append(ops.mul(ops.sum(ops.mul(per_pixel, m)), 1.0 / count))
    total = terms[0]
    for t in terms[1:]:
        total = ops.add(total, t)
    return ops.mul(total, 1.0 / len(terms))


def sparse_consistency_loss(depth, z):
    """Mean |depth - z| over pixels with a measurement (z > 0)."""
    depth = as_tensor(depth)
    z = np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64)
    if z.shape != depth.shape:
        raise ShapeError(f"prediction {depth.shape} and sparse depth {z.shape} are not aligned")
    mask = (z > 0).astype(np.float64)
    count = mask.sum()
    if count == 0:
        warnings.warn("sparse depth has no measurements; sparse consistency term is 0", RuntimeWarning)
        return Tensor(0.0)
    return ops.mul(ops.sum(ops.mul(ops.absolute(ops.sub(depth, z)), mask)), 1.0 / count)


def _image_grad_weights(image):
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    gx = np.mean(np.abs(img[:, :, :, 1:] - img[:, :, :, :-1]), axis=1, keepdims=True)
    gy = np.mean(np.abs(img[:, :, 1:, :] - img[:, :, :-1, :]), axis=1, keepdims=True)
    return np.exp(-gx), np.exp(-gy)


def smoothness_loss(depth, image):
    """Edge-aware L1 on forward differences of depth, normalised by |Omega|."""
    depth = as_tensor(depth)
    n, _, h, w = depth.shape
    if tuple(np.shape(image.data if isinstance(image, Tensor) else image)[2:]) != (h, w):
        raise ShapeError("depth and image are not aligned")
    lam_x, lam_y = _image_grad_weights(image)
    dx = ops.sub(depth[:, :, :, 1:], depth[:, :, :, :-1])
    dy = ops.sub(depth[:, :, 1:, :], depth[:, :, :-1, :])
    total = ops.add(ops.sum(ops.mul(ops.absolute(dx), lam_x)), ops.sum(ops.mul(ops.absolute(dy), lam_y)))
    return ops.mul(total, 1.0 / (n * h * w))


def total_loss(terms, w):
    """w_ph * ph + w_sz * sz + w_sm * sm; ``terms`` maps 'ph', 'sz', 'sm' to scalars."""
    for name in ("ph", "sz", "sm"):
        val = terms[name]
        val = val.item() if isinstance(val, Tensor) else float(val)
        if not math.isfinite(val):
            raise TrainingFault(f"loss term {name!r} is not finite ({val})")
    out = ops.mul(terms["ph"], w.w_ph)
    out = ops.add(out, ops.mul(terms["sz"], w.w_sz))
    return ops.add(out, ops.mul(terms["sm"], w.w_sm))
