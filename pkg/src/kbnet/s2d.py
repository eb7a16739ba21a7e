"""Sparse-to-dense densification of a sparse depth map.

Min pooling ignores empty pixels (they are treated as +inf and any window
with no measurement yields 0); max pooling needs no masking because empty
pixels are 0 and depths are positive.  The pooled maps from all kernel
sizes are mixed by three 1x1 convolutions and fused back with the raw
input by a 3x3 convolution.
"""

from dataclasses import dataclass

import numpy as np

from kbnet.errors import ShapeError
from kbnet.numerics import ops
from kbnet.numerics.tensor import as_tensor

LEAKY_SLOPE = 0.1

# Kernel sets per dataset (min pool, max pool).
KERNEL_PRESETS = {
    "kitti": ((5, 7, 9, 11, 13), (15, 17)),
    "void": ((15, 17), (23, 27, 29)),
    "nyuv2": ((15, 17), (23, 27)),
}


@dataclass(frozen=True)
class S2DConfig:
    min_kernels: tuple = KERNEL_PRESETS["void"][0]
    max_kernels: tuple = KERNEL_PRESETS["void"][1]
    mid_channels: int = 8
    out_channels: int = 16

    def __post_init__(self):
        object.__setattr__(self, "min_kernels", tuple(int(k) for k in self.min_kernels))
        object.__setattr__(self, "max_kernels", tuple(int(k) for k in self.max_kernels))
        if not self.min_kernels or not self.max_kernels:
            raise ValueError("min_kernels and max_kernels must both be non-empty")
        for k in self.min_kernels + self.max_kernels:
            if k < 3 or k % 2 == 0:
                raise ValueError(f"pooling kernel sizes must be odd and >= 3, got {k}")
        if self.mid_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")

    @classmethod
    def preset(cls, name, **overrides):
        mins, maxs = KERNEL_PRESETS[name]
        return cls(min_kernels=mins, max_kernels=maxs, **overrides)

    @property
    def n_branches(self):
        return len(self.min_kernels) + len(self.max_kernels)


def masked_min_pool(z, k):
    return ops.masked_min_pool(z, k)


def masked_max_pool(z, k):
    return ops.max_pool(z, k)


def param_shapes(cfg, prefix="s2d"):
    m = cfg.mid_channels
    return {
        f"{prefix}.conv1.weight": (m, cfg.n_branches, 1, 1),
        f"{prefix}.conv1.bias": (m,),
        f"{prefix}.conv2.weight": (m, m, 1, 1),
        f"{prefix}.conv2.bias": (m,),
        f"{prefix}.conv3.weight": (m, m, 1, 1),
        f"{prefix}.conv3.bias": (m,),
        f"{prefix}.fuse.weight": (cfg.out_channels, m + 1, 3, 3),
        f"{prefix}.fuse.bias": (cfg.out_channels,),
    }


def pool_stack(z, cfg):
    """All pooled branches concatenated along channels (min kernels first)."""
    branches = [masked_min_pool(z, k) for k in cfg.min_kernels]
    branches += [masked_max_pool(z, k) for k in cfg.max_kernels]
    return ops.concat(branches, axis=1)


def s2d_forward(z, params, cfg, prefix="s2d"):
    """Dense depth features (n, out_channels, h, w) from sparse z (n, 1, h, w)."""
    z = as_tensor(z)
    if z.ndim != 4 or z.shape[1] != 1:
        raise ShapeError(f"sparse depth must have shape (n, 1, h, w), got {z.shape}")
    p = lambda name: params[f"{prefix}.{name}"]
    if p("conv1.weight").shape[1] != cfg.n_branches:
        raise ShapeError(f"s2d conv1 expects {p('conv1.weight').shape[1]} branches, config has {cfg.n_branches}")
    x = pool_stack(z, cfg)
    for name in ("conv1", "conv2", "conv3"):
        x = ops.leaky_relu(ops.conv2d(x, p(f"{name}.weight"), p(f"{name}.bias")), LEAKY_SLOPE)
    x = ops.concat([x, z], axis=1)
    return ops.leaky_relu(ops.conv2d(x, p("fuse.weight"), p("fuse.bias"), padding=1), LEAKY_SLOPE)


def zero_fraction(x):
    return float(np.mean(np.asarray(x) == 0))
