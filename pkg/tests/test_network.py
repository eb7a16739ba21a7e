import numpy as np
import pytest

from kbnet import camera, network
from kbnet.camera import Intrinsics
from kbnet.errors import ShapeError
from kbnet.network import NetworkConfig
from kbnet.numerics import Tape, Tensor, backward, finite_diff_check, ops
from kbnet.s2d import S2DConfig
from oracles import sparse_grid

SLIM = NetworkConfig.slim()
S2D = S2DConfig()
K = Intrinsics(60.0, 60.0, 47.5, 31.5)


@pytest.fixture(scope="module")
def params():
    return network.init_params(SLIM, S2D, seed=0)


def inputs(seed=0, n=1, h=64, w=96):
    rng = np.random.default_rng(seed)
    image = rng.random((n, 3, h, w))
    z = np.stack([sparse_grid(rng, h, w, 0.01) for _ in range(n)])[:, None]
    return image, z


def test_default_channel_plan_endpoints():
    cfg = NetworkConfig()
    assert cfg.depth_channels[0] == 16 and cfg.depth_channels[-1] == 128
    assert cfg.fused_channels[0] == 48 and cfg.fused_channels[-1] == 386
    assert list(cfg.depth_channels) == sorted(cfg.depth_channels)


def test_default_parameter_count_in_band():
    cfg = NetworkConfig()
    shapes = network.depth_param_shapes(cfg, S2DConfig())
    count = sum(int(np.prod(s)) for s in shapes.values())
    assert abs(count - 6.9e6) <= 0.15 * 6.9e6


def test_pose_net_is_small():
    shapes = network.pose_param_shapes(NetworkConfig())
    count = sum(int(np.prod(s)) for s in shapes.values())
    assert 0.1e6 < count < 0.3e6


def test_kb_layer_basis_q_and_positional_encoding():
    rng = np.random.default_rng(1)
    level = 1
    M, N = SLIM.depth_channels[level], SLIM.fused_channels[level]
    params = network.init_params(SLIM, S2D, seed=1)
    params[f"enc.kb{level}.q"].data[:] = np.eye(M)[0]
    phi = Tensor(rng.uniform(0.5, 3, (1, M, 8, 12)))
    psi = Tensor(rng.random((1, N, 8, 12)))
    psi3d = Tensor(rng.random((1, SLIM.fused_channels[level - 1], 16, 24)))
    Kl = camera.scale_intrinsics(K, level)
    d = ops.conv2d(phi, ops.reshape(params[f"enc.kb{level}.q"], (1, M, 1, 1)))
    np.testing.assert_array_equal(d.data[0, 0], phi.data[0, 0])
    xyz = network.positional_encoding(d, Kl)
    v, u = np.mgrid[:8, :12]
    np.testing.assert_allclose(np.moveaxis(xyz.data[0], 0, -1), camera.backproject(Kl, u, v, phi.data[0, 0]),
                               rtol=0, atol=1e-12)
    phi_n, psi_n, fused = network.kb_layer_forward(phi, psi, psi3d, Kl, params, level)
    assert phi_n.shape == (1, SLIM.depth_channels[level + 1], 4, 6)
    assert psi_n.shape == (1, SLIM.fused_channels[level + 1], 4, 6)
    assert fused.shape == (1, N, 8, 12)


def test_positional_encoding_identity_K_constant_depth():
    d = np.full((1, 1, 4, 5), 2.5)
    xyz = network.positional_encoding(d, Intrinsics(1, 1, 0, 0)).data[0]
    v, u = np.mgrid[:4, :5]
    np.testing.assert_array_equal(xyz[0], u * 2.5)
    np.testing.assert_array_equal(xyz[1], v * 2.5)
    np.testing.assert_array_equal(xyz[2], np.full((4, 5), 2.5))


def test_kb_layer_rejects_channel_mismatch(params):
    with pytest.raises(ShapeError):
        network.kb_layer_forward(Tensor(np.zeros((1, 3, 8, 8))), Tensor(np.zeros((1, SLIM.fused_channels[0], 8, 8))),
                                 None, K, params, 0)


def test_positional_encoding_matches_camera_at_every_level(params, monkeypatch):
    seen = []
    real = network.positional_encoding

    def spy(d, K_level):
        out = real(d, K_level)
        h, w = d.shape[2:]
        v, u = np.mgrid[:h, :w]
        np.testing.assert_allclose(np.moveaxis(out.data[0], 0, -1), camera.backproject(K_level, u, v, d.data[0, 0]),
                                   rtol=0, atol=1e-12)
        seen.append((K_level, (h, w)))
        return out

    monkeypatch.setattr(network, "positional_encoding", spy)
    image, z = inputs()
    skips, bottleneck = network.encoder_forward(image, network.s2d.s2d_forward(z, params, S2D), K, params, SLIM)
    assert [s for _, s in seen] == [(64, 96), (32, 48), (16, 24), (8, 12), (4, 6)]
    assert [k for k, _ in seen] == [camera.scale_intrinsics(K, l) for l in range(5)]
    assert [s.shape[2:] for s in skips] == [(64, 96), (32, 48), (16, 24), (8, 12), (4, 6)]
    assert bottleneck.shape[2:] == (2, 3)


def test_encoder_rejects_bad_size(params):
    with pytest.raises(ShapeError, match="multiple of 32"):
        network.kbnet_forward(np.zeros((1, 3, 48, 96)), np.zeros((1, 1, 48, 96)), K, params, SLIM, S2D)


def test_forward_bounds_determinism_and_empty_input(params):
    image, z = inputs(n=2)
    a = network.kbnet_forward(image, z, K, params, SLIM, S2D).data
    b = network.kbnet_forward(image, z, K, params, SLIM, S2D).data
    assert a.shape == (2, 1, 64, 96)
    assert a.tobytes() == b.tobytes()
    assert np.all(np.isfinite(a)) and a.min() >= SLIM.d_min and a.max() <= SLIM.d_max
    empty = network.kbnet_forward(image, np.zeros_like(z), K, params, SLIM, S2D).data
    assert np.all(np.isfinite(empty)) and empty.min() > 0


def test_calibration_is_a_live_input(params):
    image, z = inputs()
    a = network.kbnet_forward(image, z, K, params, SLIM, S2D).data
    b = network.kbnet_forward(image, z, K.perturbed("f", 0.25), params, SLIM, S2D).data
    assert np.max(np.abs(a - b)) > 0


def test_every_skip_and_bottleneck_receives_gradient(params):
    image, z = inputs()
    dense = network.s2d.s2d_forward(z, params, S2D)
    skips, bottleneck = network.encoder_forward(image, dense, K, params, SLIM)
    leaves = [Tensor(s.data, requires_grad=True) for s in skips]
    neck = Tensor(bottleneck.data, requires_grad=True)
    with Tape() as tape:
        out = network.decoder_forward(leaves, neck, params, SLIM)
        loss = ops.mean(out)
    grads = backward(loss, tape, leaves + [neck])
    assert all(np.linalg.norm(g) > 0 for g in grads)


def test_pose_net_identity_and_orthonormal(params):
    rng = np.random.default_rng(2)
    a, b = rng.random((2, 3, 64, 96)), rng.random((2, 3, 64, 96))
    R, t = network.pose_net_forward(a, b, params, SLIM)
    for Ri in R.data:
        assert np.max(np.abs(Ri.T @ Ri - np.eye(3))) < 1e-9
    zeroed = dict(params)
    zeroed["pose.fc.weight"] = Tensor(np.zeros_like(params["pose.fc.weight"].data))
    zeroed["pose.fc.bias"] = Tensor(np.zeros_like(params["pose.fc.bias"].data))
    R, t = network.pose_net_forward(a, b, zeroed, SLIM)
    np.testing.assert_array_equal(R.data, np.broadcast_to(np.eye(3), (2, 3, 3)))
    np.testing.assert_array_equal(t.data, np.zeros((2, 3)))


def test_pose_net_gradient():
    cfg = NetworkConfig.slim(pose_channels=(4, 4, 4, 4, 4))
    params = network.init_params(cfg, S2D, seed=3)
    params["pose.fc.weight"].data *= 100  # move away from the near-identity init
    rng = np.random.default_rng(3)
    a, b = rng.random((1, 3, 32, 32)), rng.random((1, 3, 32, 32))
    pr, pt = rng.normal(size=(1, 3, 3)), rng.normal(size=(1, 3))

    # linear in (R, t) so the loss stays O(1) and round-off does not swamp small gradients
    def f():
        R, t = network.pose_net_forward(a, b, params, cfg)
        return ops.add(ops.sum(ops.mul(R, pr)), ops.sum(ops.mul(t, pt)))

    for name in ("pose.fc.weight", "pose.conv4.weight", "pose.conv0.weight"):
        assert finite_diff_check(f, params[name], n_samples=16, rng=np.random.default_rng(0)) < 1e-4


def test_inference_signature_has_no_pose():
    import inspect
    assert "pose" not in " ".join(inspect.signature(network.kbnet_forward).parameters)


def test_checkpoint_param_names_are_stable():
    a = list(network.param_shapes(SLIM, S2D))
    b = list(network.param_shapes(SLIM, S2D))
    assert a == b
    assert a[0].startswith("s2d.") and a[-1].startswith("pose.")
