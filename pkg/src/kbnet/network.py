"""Depth completion network with calibrated backprojection layers.

Layout (H x W input, L = 5 levels):

* S2D densifies the sparse depth; two 3x3 stem convolutions map the image
  to ``fused_channels[0]`` and the dense depth to ``depth_channels[0]``.
* KB layer ``l`` runs at H/2^l with intrinsics scaled by 2^-l.  It
  compresses the depth features to one scalar per pixel, backprojects the
  pixel rays with it (3-channel positional encoding), concatenates that
  with the image features and the previous layer's fused output (brought
  down to this resolution by a stride-2 3x3 "carry" convolution) and
  fuses them with a 1x1 convolution.  The fused map is the decoder skip.
  Depth and image features continue through separate stride-2 3x3 convs.
* The bottleneck (H/32) concatenates the last depth and image features;
  the decoder runs five (nearest 2x upsample, concat skip, 3x3 conv)
  stages and a final 3x3 conv mapped into [d_min, d_max], either by a
  scaled sigmoid or by a clamped identity around the range midpoint.
"""

from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from kbnet import camera, s2d
from kbnet.errors import ShapeError
from kbnet.numerics import ops
from kbnet.numerics.tensor import Tensor, as_tensor

LEAKY_SLOPE = 0.1
OUTPUTS = ("sigmoid", "linear")


def geometric_plan(first, last, levels):
    return tuple(int(round(first * (last / first) ** (i / (levels - 1)))) for i in range(levels))


@dataclass(frozen=True)
class NetworkConfig:
    levels: int = 5
    depth_channels: tuple = geometric_plan(16, 128, 5)
    fused_channels: tuple = geometric_plan(48, 386, 5)
    decoder_channels: tuple = (256, 128, 128, 64, 32)
    d_min: float = 0.1
    d_max: float = 8.0
    pose_channels: tuple = (16, 32, 64, 96, 128)
    output: str = "sigmoid"  # or "linear"

    def __post_init__(self):
        for name in ("depth_channels", "fused_channels", "decoder_channels", "pose_channels"):
            object.__setattr__(self, name, tuple(int(c) for c in getattr(self, name)))
        if len(self.depth_channels) != self.levels or len(self.fused_channels) != self.levels:
            raise ValueError(f"depth_channels and fused_channels need {self.levels} entries")
        if len(self.decoder_channels) != self.levels:
            raise ValueError(f"decoder_channels needs {self.levels} entries")
        if not (self.d_max > self.d_min >= 0):
            raise ValueError(f"need d_max > d_min >= 0, got [{self.d_min}, {self.d_max}]")
        if self.output not in OUTPUTS:
            raise ValueError(f"output must be one of {OUTPUTS}, got {self.output!r}")

    @property
    def multiple(self):
        return 2 ** self.levels

    @classmethod
    def slim(cls, **overrides):
        """Narrow variant for desk-scale training runs."""
        base = dict(depth_channels=(8, 8, 12, 16, 24), fused_channels=(12, 16, 24, 32, 48),
                    decoder_channels=(48, 32, 24, 16, 12), pose_channels=(8, 16, 24, 32, 48))
        base.update(overrides)
        return cls(**base)


# -- parameters ----------------------------------------------------------------

def _conv(name, c_out, c_in, k, bias=True):
    shapes = {f"{name}.weight": (c_out, c_in, k, k)}
    if bias:
        shapes[f"{name}.bias"] = (c_out,)
    return shapes


def depth_param_shapes(cfg, s2d_cfg):
    """Shapes of every depth-network weight, in serialization order."""
    M, N, D = cfg.depth_channels, cfg.fused_channels, cfg.decoder_channels
    shapes = OrderedDict(s2d.param_shapes(s2d_cfg))
    shapes.update(_conv("enc.stem_image", N[0], 3, 3))
    shapes.update(_conv("enc.stem_depth", M[0], s2d_cfg.out_channels, 3))
    for l in range(cfg.levels):
        nxt = min(l + 1, cfg.levels - 1)
        pre = f"enc.kb{l}"
        shapes[f"{pre}.q"] = (M[l],)
        if l > 0:
            shapes.update(_conv(f"{pre}.carry", N[l - 1], N[l - 1], 3))
        fuse_in = N[l] + (N[l - 1] if l > 0 else 0) + 3
        shapes.update(_conv(f"{pre}.fuse", N[l], fuse_in, 1))
        shapes.update(_conv(f"{pre}.depth_conv", M[nxt], M[l], 3))
        shapes.update(_conv(f"{pre}.image_conv", N[nxt], N[l], 3))
    x = M[-1] + N[-1]
    for s in range(cfg.levels):
        skip = N[cfg.levels - 1 - s]
        shapes.update(_conv(f"dec.up{s}", D[s], x + skip, 3))
        x = D[s]
    shapes.update(_conv("dec.out", 1, x, 3))
    return shapes


def pose_param_shapes(cfg):
    shapes = OrderedDict()
    c_in = 6
    for i, c in enumerate(cfg.pose_channels):
        shapes.update(_conv(f"pose.conv{i}", c, c_in, 3))
        c_in = c
    shapes["pose.fc.weight"] = (c_in, 6)
    shapes["pose.fc.bias"] = (6,)
    return shapes


def param_shapes(cfg, s2d_cfg, with_pose=True):
    shapes = depth_param_shapes(cfg, s2d_cfg)
    if with_pose:
        shapes.update(pose_param_shapes(cfg))
    return shapes


def init_params(cfg, s2d_cfg, seed=0, with_pose=True):
    """He-uniform weights and zero biases, drawn in serialization order."""
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in param_shapes(cfg, s2d_cfg, with_pose).items():
        if name.endswith(".bias"):
            data = np.zeros(shape)
        elif name.endswith(".q"):
            data = rng.uniform(-1.0, 1.0, shape) / np.sqrt(shape[0])
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, shape)
        if name == "dec.out.weight":
            data *= 0.1
        if name == "pose.fc.weight":
            data *= 0.01
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def count_params(params, prefixes=("s2d.", "enc.", "dec.")):
    return int(sum(t.size for name, t in params.items() if name.startswith(prefixes)))


def _conv_act(x, params, name, stride=1, act=True):
    w = params[f"{name}.weight"]
    k = w.shape[-1]
    out = ops.conv2d(x, w, params.get(f"{name}.bias"), stride=stride, padding=k // 2)
    return ops.leaky_relu(out, LEAKY_SLOPE) if act else out


# -- forward passes --------------------------------------------------------------

def positional_encoding(d, K_level):
    """Per-pixel 3-D points K^-1 [u, v, 1] * d(u, v); d is (n, 1, h, w)."""
    d = as_tensor(d)
    h, w = d.shape[2:]
    if isinstance(K_level, camera.Intrinsics):
        rays = camera.ray_grid(K_level, h, w)[None]
    else:
        rays = np.stack([camera.ray_grid(k, h, w) for k in K_level])
    return ops.mul(d, rays)


def _scaled(K, level):
    if isinstance(K, camera.Intrinsics):
        return camera.scale_intrinsics(K, level)
    return [camera.scale_intrinsics(k, level) for k in K]


def kb_layer_forward(phi, psi, psi3d, K_level, params, level):
    """One calibrated backprojection layer.

    Returns (phi_next, psi_next, fused): the stride-2 depth and image
    features for the next level and the fused RGB-3D map at this level.
    ``psi3d`` is the previous layer's fused map (twice this resolution)
    or None at the first layer.
    """
    pre = f"enc.kb{level}"
    q = params[f"{pre}.q"]
    if phi.shape[1] != q.shape[0]:
        raise ShapeError(f"KB layer {level}: depth features have {phi.shape[1]} channels, q has {q.shape[0]}")
    d = ops.conv2d(phi, ops.reshape(q, (1, q.shape[0], 1, 1)))
    xyz = positional_encoding(d, K_level)
    parts = [psi]
    if psi3d is not None:
        parts.append(_conv_act(psi3d, params, f"{pre}.carry", stride=2))
    parts.append(xyz)
    fuse_w = params[f"{pre}.fuse.weight"]
    n_in = sum(p.shape[1] for p in parts)
    if n_in != fuse_w.shape[1]:
        raise ShapeError(f"KB layer {level}: fuse conv expects {fuse_w.shape[1]} input channels, got {n_in}")
    fused = _conv_act(ops.concat(parts, axis=1), params, f"{pre}.fuse")
    phi_next = _conv_act(phi, params, f"{pre}.depth_conv", stride=2)
    psi_next = _conv_act(psi, params, f"{pre}.image_conv", stride=2)
    return phi_next, psi_next, fused


def encoder_forward(image, dense_z, K, params, cfg):
    image, dense_z = as_tensor(image), as_tensor(dense_z)
    h, w = image.shape[2:]
    if h % cfg.multiple or w % cfg.multiple:
        raise ShapeError(f"image size {h}x{w} must be a multiple of {cfg.multiple} in both dimensions")
    if dense_z.shape[2:] != (h, w):
        raise ShapeError(f"image {image.shape} and depth {dense_z.shape} are not aligned")
    psi = _conv_act(image, params, "enc.stem_image")
    phi = _conv_act(dense_z, params, "enc.stem_depth")
    fused = None
    skips = []
    for level in range(cfg.levels):
        phi, psi, fused = kb_layer_forward(phi, psi, fused, _scaled(K, level), params, level)
        skips.append(fused)
    return skips, ops.concat([phi, psi], axis=1)


def decoder_forward(skips, bottleneck, params, cfg):
    x = bottleneck
    for s, skip in enumerate(reversed(skips)):
        x = ops.upsample_nearest2x(x)
        x = _conv_act(ops.concat([x, skip], axis=1), params, f"dec.up{s}")
    y = _conv_act(x, params, "dec.out", act=False)
    if cfg.output == "linear":
        return ops.clip(ops.add(y, 0.5 * (cfg.d_min + cfg.d_max)), cfg.d_min, cfg.d_max)
    return ops.add(ops.mul(ops.sigmoid(y), cfg.d_max - cfg.d_min), cfg.d_min)


def kbnet_forward(image, z, K, params, cfg, s2d_cfg):
    """Dense depth (n, 1, h, w) from image (n, 3, h, w), sparse z and K."""
    dense = s2d.s2d_forward(z, params, s2d_cfg)
    skips, bottleneck = encoder_forward(image, dense, K, params, cfg)
    return decoder_forward(skips, bottleneck, params, cfg)


def pose_net_vector(image_t, image_tau, params, cfg):
    x = ops.concat([as_tensor(image_t), as_tensor(image_tau)], axis=1)
    for i in range(len(cfg.pose_channels)):
        x = _conv_act(x, params, f"pose.conv{i}", stride=2)
    feat = ops.mean(x, axis=(2, 3))
    vec = ops.add(ops.matmul(feat, params["pose.fc.weight"]), params["pose.fc.bias"])
    return ops.mul(vec, 0.01)


def pose_net_forward(image_t, image_tau, params, cfg):
    """Relative pose current -> tau as differentiable (R, t) Tensors."""
    return camera.pose_from_vector_op(pose_net_vector(image_t, image_tau, params, cfg))


def poses_from_tensors(R, t):
    return [camera.Pose(R.data[i], t.data[i]) for i in range(R.shape[0])]
