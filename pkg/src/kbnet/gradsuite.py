"""Finite-difference check of every differentiable op, every loss term and the full training loss.

Each check returns (name, max relative error).  Inputs are built so that
no central-difference probe straddles a kink: L1 residuals stay away from
zero, bilinear coordinates avoid integer lines and pooled values are
distinct.
"""

import dataclasses
import zlib
from contextlib import contextmanager

import numpy as np

from kbnet import camera, losses
from kbnet.camera import Intrinsics
from kbnet.data.synth import SceneSpec, synth_scene
from kbnet.losses import LossWeights
from kbnet.network import NetworkConfig, init_params, pose_net_forward
from kbnet.numerics import Tape, Tensor, backward, finite_diff_check, no_grad, ops
from kbnet.s2d import S2DConfig

TOLERANCE = 1e-4
EPS = 1e-5

TINY_NET = NetworkConfig.slim(depth_channels=(4, 4, 4, 6, 6), fused_channels=(4, 6, 6, 8, 8),
                              decoder_channels=(8, 6, 6, 4, 4), pose_channels=(4, 4, 6, 6, 8), d_max=12.0)
TINY_NET_LINEAR = dataclasses.replace(TINY_NET, output="linear")
TINY_S2D = S2DConfig(min_kernels=(3, 5), max_kernels=(7,), mid_channels=4, out_channels=4)


def _rng(name, seed):
    return np.random.default_rng([zlib.crc32(name.encode()), seed])


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)


def _sparse(rng, h, w, density):
    z = np.zeros((h, w))
    n = max(1, int(density * h * w))
    idx = rng.choice(h * w, n, replace=False)
    z.reshape(-1)[idx] = np.sort(rng.uniform(0.5, 5.0, n))[rng.permutation(n)] + np.arange(n) * 1e-3
    return z


_ELEMENTWISE = {
    "add": lambda x, r: ops.add(x, r.normal(size=(1, x.shape[1], 1, 1))),
    "sub": lambda x, r: ops.sub(1.0, x),
    "mul": lambda x, r: ops.mul(x, r.normal(size=(1, 1, x.shape[2], 1))),
    "div": lambda x, r: ops.div(x, ops.add(ops.square(x), 1.0)),
    "square": lambda x, r: ops.square(x),
    "exp": lambda x, r: ops.exp(ops.mul(x, 0.3)),
    "absolute": lambda x, r: ops.absolute(x),
    "sigmoid": lambda x, r: ops.sigmoid(x),
    "leaky_relu": lambda x, r: ops.leaky_relu(x, 0.1),
    "clip": lambda x, r: ops.clip(x, -0.5, 0.8),
    "sum": lambda x, r: ops.sum(x, axis=(2, 3)),
    "mean": lambda x, r: ops.mean(x, axis=1, keepdims=True),
    "reshape": lambda x, r: ops.reshape(x, (x.shape[0], -1)),
    "getitem": lambda x, r: x[:, :, 1:, :-1],
    "concat": lambda x, r: ops.concat([x, ops.mul(x, 2.0)], axis=1),
    "pad_zero": lambda x, r: ops.pad(x, 2, "zero"),
    "pad_reflect": lambda x, r: ops.pad(x, 1, "reflect"),
    "pad_edge": lambda x, r: ops.pad(x, 1, "edge"),
    "avg_pool2d": lambda x, r: ops.avg_pool2d(x, 3),
    "upsample_nearest2x": lambda x, r: ops.upsample_nearest2x(x),
    "matmul": lambda x, r: ops.matmul(ops.reshape(x, (x.shape[0], 6, -1)), r.normal(size=(15, 4))),
}


def _probe_check(name, fn, x, rng):
    probe = rng.normal(size=fn(x.data, np.random.default_rng(0)).shape)
    return finite_diff_check(lambda: ops.sum(ops.mul(fn(x, np.random.default_rng(0)), probe)), x, eps=EPS)


def op_checks(seed=0):
    out = []
    for name, fn in _ELEMENTWISE.items():
        rng = _rng(name, seed)
        x = Tensor(_away_from_zero(rng, (2, 3, 5, 6)), requires_grad=True)
        out.append((f"op.{name}", _probe_check(name, fn, x, rng)))

    rng = _rng("conv2d", seed)
    for stride, pad in ((1, 1), (2, 1), (1, 0)):
        x = Tensor(rng.normal(size=(2, 3, 7, 8)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=4), requires_grad=True)
        probe = rng.normal(size=ops.conv2d(x.data, w.data, b.data, stride, pad).shape)
        f = lambda: ops.sum(ops.mul(ops.conv2d(x, w, b, stride, pad), probe))
        err = max(finite_diff_check(f, t, eps=EPS) for t in (x, w, b))
        out.append((f"op.conv2d[s{stride}p{pad}]", err))

    rng = _rng("bilinear", seed)
    img = Tensor(rng.normal(size=(1, 2, 7, 8)), requires_grad=True)
    u = Tensor(np.floor(rng.uniform(0, 6, (1, 3, 4))) + rng.uniform(0.1, 0.9, (1, 3, 4)), requires_grad=True)
    v = Tensor(np.floor(rng.uniform(0, 5, (1, 3, 4))) + rng.uniform(0.1, 0.9, (1, 3, 4)), requires_grad=True)
    tgt = rng.normal(size=(1, 2, 3, 4))
    f = lambda: ops.sum(ops.square(ops.sub(ops.bilinear_sample(img, u, v)[0], tgt)))
    out.append(("op.bilinear_sample", max(finite_diff_check(f, t, eps=EPS) for t in (img, u, v))))

    for name, fn in (("masked_min_pool", ops.masked_min_pool), ("max_pool", ops.max_pool)):
        rng = _rng(name, seed)
        z = Tensor(_sparse(rng, 9, 10, 1.0)[None, None], requires_grad=True)
        probe = rng.normal(size=z.shape)
        out.append((f"op.{name}", finite_diff_check(lambda: ops.sum(ops.mul(fn(z, 3), probe)), z, eps=EPS)))

    rng = _rng("so3_exp", seed)
    omega = Tensor(rng.normal(size=(3, 3)) * 0.7, requires_grad=True)
    probe = rng.normal(size=(3, 3, 3))
    out.append(("op.so3_exp", finite_diff_check(lambda: ops.sum(ops.mul(camera.so3_exp_op(omega), probe)),
                                                omega, eps=EPS)))
    return out


def _warp_setup(seed):
    rng = _rng("warp", seed)
    K = Intrinsics(20.0, 21.0, 7.3, 5.6)
    img = rng.uniform(0.2, 0.8, (1, 3, 12, 16))
    # smooth texture so the warp has informative, kink-free gradients
    yy, xx = np.mgrid[:12, :16]
    for c in range(3):
        img[0, c] = 0.5 + 0.2 * np.sin(0.5 * xx + c) * np.cos(0.4 * yy - c)
    depth = Tensor(rng.uniform(2.0, 3.0, (1, 1, 12, 16)), requires_grad=True)
    vec = Tensor(np.array([[0.01, -0.02, 0.015, 0.05, -0.03, 0.02]]), requires_grad=True)
    return K, img, depth, vec


def camera_checks(seed=0):
    K, img, depth, vec = _warp_setup(seed)
    target = img + 0.05

    def f():
        R, t = camera.pose_from_vector_op(vec)
        rec, mask = camera.reconstruct(img, depth, (R, t), K)
        return ops.sum(ops.mul(ops.square(ops.sub(rec, target)), mask[:, None].astype(float)))

    return [("camera.reconstruct[depth]", finite_diff_check(f, depth, eps=EPS)),
            ("camera.reconstruct[pose]", finite_diff_check(f, vec, eps=EPS))]


def loss_checks(seed=0):
    w = LossWeights.preset("kitti")
    out = []
    rng = _rng("ssim", seed)
    a = Tensor(rng.uniform(0.1, 0.9, (1, 2, 6, 7)), requires_grad=True)
    b = rng.uniform(0.1, 0.9, (1, 2, 6, 7))
    probe = rng.normal(size=(1, 2, 6, 7))
    out.append(("loss.ssim", finite_diff_check(lambda: ops.sum(ops.mul(losses.ssim(a, b), probe)), a, eps=EPS)))

    rng = _rng("photometric", seed)
    img = rng.uniform(0.2, 0.8, (1, 3, 6, 7))
    rec = Tensor(img + rng.uniform(0.05, 0.1, img.shape) * rng.choice([-1, 1], img.shape), requires_grad=True)
    mask = rng.random((1, 1, 6, 7)) < 0.8
    out.append(("loss.photometric", finite_diff_check(lambda: losses.photometric_loss(img, [(rec, mask)], w),
                                                      rec, eps=EPS)))

    rng = _rng("sparse", seed)
    z = _sparse(rng, 6, 7, 0.3)[None, None]
    d = Tensor(z + rng.uniform(0.1, 0.5, z.shape) * rng.choice([-1, 1], z.shape), requires_grad=True)
    out.append(("loss.sparse_consistency", finite_diff_check(lambda: losses.sparse_consistency_loss(d, z),
                                                             d, eps=EPS)))

    rng = _rng("smoothness", seed)
    steps = rng.uniform(0.1, 0.3, (1, 1, 6, 7))
    d2 = Tensor(np.cumsum(np.cumsum(steps, axis=3), axis=2), requires_grad=True)
    image = rng.random((1, 3, 6, 7))
    out.append(("loss.smoothness", finite_diff_check(lambda: losses.smoothness_loss(d2, image), d2, eps=EPS)))

    x = Tensor(rng.uniform(0.5, 1.0, 3), requires_grad=True)
    f = lambda: losses.total_loss({"ph": ops.sum(ops.square(x)), "sz": ops.sum(x), "sm": ops.sum(ops.exp(x))}, w)
    out.append(("loss.total", finite_diff_check(f, x, eps=EPS)))
    return out


@contextmanager
def _regimes(store):
    """Record which linear piece every kinked op is on while a loss is evaluated."""
    relu, absolute, bilinear, clip = ops.leaky_relu, ops.absolute, ops.bilinear_sample, ops.clip

    def relu_spy(x, slope=0.1):
        store.append(np.asarray(x.data if isinstance(x, Tensor) else x) > 0)
        return relu(x, slope)

    def abs_spy(x):
        store.append(np.asarray(x.data if isinstance(x, Tensor) else x) > 0)
        return absolute(x)

    def bilinear_spy(image, u, v):
        out, ok = bilinear(image, u, v)
        ud, vd = (np.asarray(c.data if isinstance(c, Tensor) else c) for c in (u, v))
        store.extend([ok, np.floor(np.where(ok, ud, 0)), np.floor(np.where(ok, vd, 0))])
        return out, ok

    def clip_spy(x, lo, hi):
        xd = np.asarray(x.data if isinstance(x, Tensor) else x)
        store.extend([xd > lo, xd < hi])
        return clip(x, lo, hi)

    ops.leaky_relu, ops.absolute, ops.bilinear_sample, ops.clip = relu_spy, abs_spy, bilinear_spy, clip_spy
    try:
        yield
    finally:
        ops.leaky_relu, ops.absolute, ops.bilinear_sample, ops.clip = relu, absolute, bilinear, clip


def _same_regime(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def smooth_coordinate_check(f, theta, n_samples, rng, eps=EPS, max_draws=None):
    """Central differences on coordinates whose +-eps probes stay on one linear piece.

    Coordinates whose probes flip a ReLU sign, an L1 sign, a bilinear cell or
    a validity mask are redrawn, and only coordinates carrying at least 1e-3 of
    the tensor's largest gradient are drawn.  Returns (max relative error, checked, skipped).
    """
    with Tape() as tape:
        loss = f()
    analytic = backward(loss, tape, [theta])[0].reshape(-1)
    flat = theta.data.reshape(-1)
    # coordinates whose gradient is negligible next to the tensor's largest are
    # dominated by summation round-off at eps=1e-5 and say nothing about the adjoint
    live = np.flatnonzero(np.abs(analytic) >= 1e-3 * np.max(np.abs(analytic)))
    order = rng.permutation(live)[: max_draws or 4 * n_samples]
    worst, checked, skipped = 0.0, 0, 0
    with no_grad():
        for i in order:
            if checked == n_samples:
                break
            saved = flat[i]
            values, regimes = [], []
            for delta in (eps, -eps):
                store = []
                flat[i] = saved + delta
                with _regimes(store):
                    values.append(f().item())
                regimes.append(store)
            flat[i] = saved
            if not _same_regime(*regimes):
                skipped += 1
                continue
            numeric = (values[0] - values[1]) / (2 * eps)
            a = analytic[i]
            worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), 1e-12))
            checked += 1
    return worst, checked, skipped


def network_checks(seed=0, samples_per_tensor=3):
    """Full training loss of a tiny KBNet wrt sampled coordinates of every parameter tensor."""
    from kbnet.trainer import loss_on_batch

    frames = synth_scene(SceneSpec(n_frames=3, height=32, width=64, seed=seed, density=0.05))
    batch = [tuple(frames)]
    params = init_params(TINY_NET, TINY_S2D, seed=seed, with_pose=True)
    rng = np.random.default_rng(seed)
    # zero biases put empty-input pixels exactly on the leaky-ReLU corner, and a
    # near-identity pose puts border pixels exactly on the validity edge
    for name, p in params.items():
        if name.endswith(".bias"):
            p.data = rng.normal(scale=0.1, size=p.shape)
    params["pose.fc.bias"].data = np.array([1.0, -2.0, 1.5, 4.0, -3.0, 6.0])
    # larger head weights lift pose-branch gradients well above summation round-off
    params["pose.fc.weight"].data *= 30.0
    out = []
    for label, source, net in (("gt", "gt", TINY_NET), ("gt, linear output", "gt", TINY_NET_LINEAR),
                               ("pose-net", "pose-net", TINY_NET)):
        # pose weights only see the photometric term; dropping the others keeps the
        # loss small so round-off does not swamp their (small) gradients
        w = LossWeights.preset("void") if source == "gt" else LossWeights(w_sz=0.0, w_sm=0.0)
        f = lambda: loss_on_batch(params, batch, net, TINY_S2D, w, source)[0]
        worst, worst_name, checked, skipped = 0.0, "", 0, 0
        for name, p in params.items():
            if source == "gt" and name.startswith("pose."):
                continue
            if source == "pose-net" and not name.startswith("pose.fc."):
                continue
            err, c, s = smooth_coordinate_check(f, p, samples_per_tensor, rng)
            checked += c
            skipped += s
            if err >= worst:
                worst, worst_name = err, name
        out.append((f"kbnet.loss[{label}] {checked} coords ({skipped} kink-straddling skipped), "
                    f"worst={worst_name}", worst))

    # the pose trunk is checked against a loss linear in (R, t): its gradients through
    # the photometric term are too small for eps=1e-5 to resolve above round-off
    probe_r, probe_t = rng.normal(size=(1, 3, 3)), rng.normal(size=(1, 3))
    image_t, image_tau = frames[1].image[None], frames[2].image[None]

    def g():
        R, t = pose_net_forward(image_t, image_tau, params, TINY_NET)
        return ops.add(ops.sum(ops.mul(R, probe_r)), ops.sum(ops.mul(t, probe_t)))

    worst, worst_name = 0.0, ""
    for name, p in params.items():
        if name.startswith("pose.conv"):
            err, _, _ = smooth_coordinate_check(g, p, samples_per_tensor, rng)
            if err >= worst:
                worst, worst_name = err, name
    out.append((f"pose_net.trunk worst={worst_name}", worst))
    return out


def run_suite(seed=0, include_network=True):
    results = op_checks(seed) + camera_checks(seed) + loss_checks(seed)
    if include_network:
        results += network_checks(seed)
    return results
