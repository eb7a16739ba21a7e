import numpy as np
import png
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kbnet import camera, losses
from kbnet.camera import Intrinsics
from kbnet.data import (AugmentConfig, Frame, SceneSpec, augment, covisible_mask, read_dataset, read_depth_png,
                        read_image_png, remove_points, shift_frame, subsample_sparse, synth_dataset, synth_scene,
                        triples, write_dataset, write_depth_png, write_image_png)
from kbnet.data.pngio import encode_depth
from kbnet.errors import NoValidPixelsError


def _write_raw(path, rows, bitdepth, planes=1):
    with open(path, "wb") as fh:
        png.Writer(len(rows[0]) // planes, len(rows), bitdepth=bitdepth, greyscale=planes == 1,
                   alpha=planes == 4).write(fh, rows)


def test_depth_png_stored_value_convention(tmp_path):
    p = tmp_path / "d.png"
    _write_raw(p, [[1280, 0], [256, 65535]], 16)
    np.testing.assert_array_equal(read_depth_png(p), [[5.0, 0.0], [1.0, 65535 / 256]])


def test_depth_png_round_trip(tmp_path):
    p = tmp_path / "d.png"
    write_depth_png(np.array([[5.0, 0.0]]), p)
    assert read_depth_png(p)[0, 0] == 5.0 and read_depth_png(p)[0, 1] == 0.0
    rng = np.random.default_rng(0)
    d = rng.uniform(0.01, 255.99, (100, 100))
    write_depth_png(d, p)
    back = read_depth_png(p)
    assert np.max(np.abs(back - d)) <= 1 / 512
    lattice = np.rint(d * 256) / 256
    write_depth_png(lattice, p)
    np.testing.assert_array_equal(read_depth_png(p), lattice)


def test_depth_encoding_monotone_and_invalid():
    d = np.array([0.0, -1.0, np.nan, 0.5, 1.0, 1.01, 200.0])
    enc = encode_depth(d)
    assert enc.dtype == np.uint16
    assert list(enc[:3]) == [0, 0, 0]
    assert np.all(np.diff(enc[3:].astype(int)) > 0)


def test_depth_png_rejects_wrong_format(tmp_path):
    p = tmp_path / "bad.png"
    _write_raw(p, [[1, 2], [3, 4]], 8)
    with pytest.raises(ValueError, match="16-bit"):
        read_depth_png(p)
    _write_raw(p, [[1, 2, 3, 4, 5, 6]], 16, planes=3)
    with pytest.raises(ValueError):
        read_depth_png(p)


def test_image_png_round_trip(tmp_path):
    p = tmp_path / "i.png"
    img = np.random.default_rng(1).integers(0, 256, (3, 5, 7)) / 255.0
    write_image_png(img, p)
    np.testing.assert_allclose(read_image_png(p), img, atol=1e-12)
    _write_raw(p, [[0, 255, 0, 255, 51, 102, 153, 0]], 8, planes=4)
    np.testing.assert_allclose(read_image_png(p)[:, 0, :] * 255, [[0, 51], [255, 102], [0, 153]], atol=1e-9)
    with pytest.raises(ValueError):
        _write_raw(p, [[1, 2]], 16)
        read_image_png(p)


def test_subsample_count_paper_density():
    dense = np.full((480, 640), 3.0)
    z = subsample_sparse(dense, 0.005, seed=0)
    assert np.count_nonzero(z) == 1536


@pytest.mark.parametrize("density", [0.0005, 0.0015, 0.005, 0.05])
@pytest.mark.parametrize("strategy", ["uniform-random", "grid"])
def test_subsample_count_formula(density, strategy):
    rng = np.random.default_rng(2)
    dense = rng.uniform(0.5, 10, (120, 160))
    dense[rng.random(dense.shape) < 0.3] = 0.0
    valid = np.count_nonzero(dense)
    z = subsample_sparse(dense, density, strategy, seed=3)
    assert np.count_nonzero(z) == int(np.floor(density * valid + 1e-9))
    sel = z > 0
    np.testing.assert_array_equal(z[sel], dense[sel])
    np.testing.assert_array_equal(subsample_sparse(dense, density, strategy, seed=3), z)


def test_subsample_errors():
    with pytest.raises(NoValidPixelsError):
        subsample_sparse(np.zeros((4, 4)), 0.5)
    with pytest.raises(ValueError):
        subsample_sparse(np.ones((4, 4)), 0.0)
    with pytest.raises(ValueError):
        subsample_sparse(np.ones((4, 4)), 0.5, strategy="harris")


def _frame(rng, n_points=1000, h=40, w=50):
    sparse = np.zeros((h, w))
    sparse.reshape(-1)[rng.choice(h * w, n_points, replace=False)] = rng.uniform(1, 5, n_points)
    gt = np.where(sparse > 0, sparse, rng.uniform(1, 5, (h, w)))
    return Frame(image=rng.random((3, h, w)), sparse_depth=sparse, K=Intrinsics(40, 40, 24.5, 19.5), gt_depth=gt)


def test_removal_count():
    rng = np.random.default_rng(4)
    fr = _frame(rng)
    out = remove_points(fr.sparse_depth, 0.65, np.random.default_rng(0))
    assert np.count_nonzero(out) == 350
    assert set(np.flatnonzero(out)) <= set(np.flatnonzero(fr.sparse_depth))


def test_augment_disabled_is_identity():
    rng = np.random.default_rng(5)
    frames = [_frame(rng) for _ in range(3)]
    cfg = AugmentConfig(removal_fraction_range=(0.0, 0.0), h_shift_range=(0.0, 0.0), apply_probability=1.0)
    out = augment(frames, cfg, 0)
    for a, b in zip(frames, out):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.sparse_depth, b.sparse_depth)
        assert a.K == b.K


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_augment_never_grows_and_shifts_jointly(seed):
    rng = np.random.default_rng(seed)
    frames = [_frame(rng, n_points=200) for _ in range(3)]
    cfg = AugmentConfig(removal_fraction_range=(0.3, 0.6), h_shift_range=(0.05, 0.2), apply_probability=0.7)
    out = augment(frames, cfg, np.random.default_rng(seed))
    shifts = {o.K.cx - f.K.cx for f, o in zip(frames, out)}
    assert len(shifts) == 1
    s = int(shifts.pop())
    for f, o in zip(frames, out):
        assert np.count_nonzero(o.sparse_depth) <= np.count_nonzero(f.sparse_depth)
        moved = shift_frame(f, s)
        np.testing.assert_array_equal(o.image, moved.image)
        assert np.all((o.sparse_depth == 0) | (o.sparse_depth == moved.sparse_depth))
        assert np.all(o.gt_depth == moved.gt_depth)


def test_shift_frame_alignment():
    rng = np.random.default_rng(6)
    fr = _frame(rng, n_points=20, h=8, w=10)
    for s in (3, -2):
        out = shift_frame(fr, s)
        src = slice(0, 10 - s) if s > 0 else slice(-s, 10)
        dst = slice(s, 10) if s > 0 else slice(0, 10 + s)
        np.testing.assert_array_equal(out.image[:, :, dst], fr.image[:, :, src])
        np.testing.assert_array_equal(out.sparse_depth[:, dst], fr.sparse_depth[:, src])
        assert out.K.cx == fr.K.cx + s
    # a shifted pixel still lifts to the same ray
    out = shift_frame(fr, 3)
    np.testing.assert_allclose(camera.lift(out.K, 5 + 3, 4), camera.lift(fr.K, 5, 4))


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(removal_fraction_range=(0.7, 0.6))
    with pytest.raises(ValueError):
        AugmentConfig(h_shift_range=(0.0, 1.0))
    with pytest.raises(ValueError):
        AugmentConfig(apply_probability=1.5)


def test_frame_shape_checks():
    with pytest.raises(ValueError):
        Frame(image=np.zeros((3, 4, 5)), sparse_depth=np.zeros((4, 4)), K=Intrinsics(1, 1, 0, 0))


@pytest.fixture(scope="module")
def small_seq():
    return synth_scene(SceneSpec(n_frames=4, motion="translation", seed=7), return_ids=True)


def test_synth_is_deterministic(small_seq):
    again, _ = synth_scene(SceneSpec(n_frames=4, motion="translation", seed=7), return_ids=True)
    for a, b in zip(small_seq[0], again):
        assert a.image.tobytes() == b.image.tobytes()
        assert a.sparse_depth.tobytes() == b.sparse_depth.tobytes()
        assert a.gt_depth.tobytes() == b.gt_depth.tobytes()


def test_synth_frame_contract(small_seq):
    frames, _ = small_seq
    for fr in frames:
        assert fr.image.shape == (3, 64, 96)
        assert fr.image.min() >= 0 and fr.image.max() <= 1
        assert np.all(fr.gt_depth > 0)
        sel = fr.sparse_depth > 0
        assert np.count_nonzero(sel) == int(0.005 * 64 * 96)
        np.testing.assert_array_equal(fr.sparse_depth[sel], fr.gt_depth[sel])
    with pytest.raises(ValueError):
        SceneSpec(height=60)


def test_identity_motion_photometric_zero():
    frames = synth_scene(SceneSpec(n_frames=3, motion="identity", seed=8))
    w = losses.LossWeights()
    t = frames[1]
    recs = []
    for tau in (frames[0], frames[2]):
        pose = camera.relative_pose(t.pose_to_world, tau.pose_to_world)
        out, mask = camera.reconstruct(tau.image[None], t.gt_depth[None, None], pose, t.K)
        recs.append((out, mask))
    assert losses.photometric_loss(t.image[None], recs, w).item() == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("motion", ["translation", "smooth"])
def test_warp_residual_on_covisible_pixels(motion):
    frames, ids = synth_scene(SceneSpec(n_frames=3, motion=motion, seed=9), return_ids=True)
    for i, j in ((1, 2), (1, 0)):
        t, tau = frames[i], frames[j]
        pose = camera.relative_pose(t.pose_to_world, tau.pose_to_world)
        out, mask = camera.reconstruct(tau.image[None], t.gt_depth[None, None], pose, t.K)
        cov = covisible_mask(t, tau, ids[i], ids[j]) & np.asarray(mask)[0]
        assert cov.mean() > 0.5
        resid = np.abs(out.data[0] - t.image)[:, cov]
        assert resid.mean() < 1e-3


def test_synth_dataset_seeds_differ():
    a, b = synth_dataset(2, SceneSpec(n_frames=2), seed=3)
    assert a[0].image.tobytes() != b[0].image.tobytes()
    again = synth_dataset(2, SceneSpec(n_frames=2), seed=3)
    assert again[1][1].gt_depth.tobytes() == b[1].gt_depth.tobytes()


def test_triples():
    assert triples([1, 2, 3, 4]) == [(1, 2, 3), (2, 3, 4)]
    assert triples([1, 2]) == []
    assert triples([1, 2, 3, 4], ends=True) == [(2, 1, 2), (1, 2, 3), (2, 3, 4), (3, 4, 3)]
    assert triples([1, 2], ends=True) == [(2, 1, 2), (1, 2, 1)]
    assert triples([1], ends=True) == []


def test_dataset_round_trip(tmp_path):
    seqs = synth_dataset(2, SceneSpec(n_frames=3), seed=4)
    manifest = write_dataset(tmp_path, seqs)
    lines = manifest.read_text().splitlines()
    assert len(lines) == 6 and len(lines[0].split()) == 4
    back = read_dataset(manifest)
    assert [len(s) for s in back] == [3, 3]
    for s_in, s_out in zip(seqs, back):
        for a, b in zip(s_in, s_out):
            assert np.max(np.abs(a.image - b.image)) <= 0.5 / 255 + 1e-12
            assert np.max(np.abs(a.sparse_depth - b.sparse_depth)) <= 1 / 512
            assert np.array_equal(a.sparse_depth > 0, b.sparse_depth > 0)
            assert np.max(np.abs(a.gt_depth - b.gt_depth)) <= 1 / 512
            assert b.K == a.K
            np.testing.assert_array_equal(b.pose_to_world.R, a.pose_to_world.R)
            np.testing.assert_array_equal(b.pose_to_world.t, a.pose_to_world.t)
