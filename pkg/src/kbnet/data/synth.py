"""Synthetic piecewise-planar scenes with exact depth, pose and calibration.

A scene is a floor, a (possibly yawed) back wall, a few fronto-parallel
boxes and a slanted quad, ray-cast per pixel.  Surface colour is a smooth
Fourier mixture evaluated at the point's projection into a fixed
"projector" camera, so every view of a world point sees the same colour
and the texture stays band-limited in image space.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from kbnet.camera import Intrinsics, Pose, ray_grid, relative_pose, so3_exp
from kbnet.data.frames import Frame, subsample_sparse

MOTIONS = ("identity", "translation", "smooth")


@dataclass(frozen=True)
class SceneSpec:
    n_frames: int = 20
    height: int = 64
    width: int = 96
    K: Optional[Intrinsics] = None
    motion: str = "smooth"
    seed: int = 0
    density: float = 0.005
    sampling: str = "uniform-random"
    step: float = 0.08  # meters of forward travel per frame
    min_wavelength: float = 20.0  # pixels, in the projector view

    def __post_init__(self):
        if self.height % 32 or self.width % 32:
            raise ValueError(f"resolution {self.height}x{self.width} must be divisible by 32")
        if self.motion not in MOTIONS:
            raise ValueError(f"motion must be one of {MOTIONS}, got {self.motion!r}")
        if self.n_frames < 1:
            raise ValueError("n_frames must be >= 1")

    @property
    def intrinsics(self):
        if self.K is not None:
            return self.K
        f = 0.625 * self.width
        return Intrinsics(f, f, (self.width - 1) / 2.0, (self.height - 1) / 2.0)


@dataclass
class Surface:
    normal: np.ndarray
    offset: float  # n . X = offset
    base: np.ndarray  # (3,) colour
    freqs: np.ndarray  # (m, 2) cycles per projector pixel
    amps: np.ndarray  # (m, 3) per component and channel
    phases: np.ndarray  # (m,)
    center: Optional[np.ndarray] = None  # bounded quads only
    axes: Optional[np.ndarray] = None  # (2, 3) in-plane unit axes
    half: Optional[np.ndarray] = None  # (2,) half extents


@dataclass
class Scene:
    surfaces: list
    projector: Intrinsics
    extras: dict = field(default_factory=dict)


def _texture(rng, min_wavelength, n_comp=3):
    base = rng.uniform(0.3, 0.7, size=3)
    wavelength = rng.uniform(min_wavelength, 2.5 * min_wavelength, size=n_comp)
    angle = rng.uniform(0, np.pi, size=n_comp)
    freqs = np.stack([np.cos(angle), np.sin(angle)], axis=1) / wavelength[:, None]
    amps = rng.uniform(0.04, 0.08, size=(n_comp, 1)) * rng.uniform(0.5, 1.0, size=(n_comp, 3))
    phases = rng.uniform(0, 2 * np.pi, size=n_comp)
    return dict(base=base, freqs=freqs, amps=amps, phases=phases)


def _yawed_normal(yaw):
    return np.array([np.sin(yaw), 0.0, np.cos(yaw)])


def build_scene(rng, projector, min_wavelength=20.0):
    """Random room: floor, back wall, 2-3 boxes and one slanted quad."""
    surfaces = []
    cam_height = rng.uniform(0.9, 1.3)
    surfaces.append(Surface(np.array([0.0, 1.0, 0.0]), cam_height, **_texture(rng, min_wavelength)))
    wall_yaw = np.deg2rad(rng.uniform(-20, 20))
    wall_dist = rng.uniform(6.0, 8.0)
    surfaces.append(Surface(_yawed_normal(wall_yaw), wall_dist, **_texture(rng, min_wavelength)))
    for _ in range(rng.integers(2, 4)):
        z = rng.uniform(3.0, wall_dist - 1.0)
        x = rng.uniform(-0.5, 0.5) * z
        hw, hh = rng.uniform(0.3, 0.8), rng.uniform(0.3, 0.8)
        center = np.array([x, cam_height - hh * rng.uniform(1.0, 2.0), z])
        surfaces.append(Surface(
            np.array([0.0, 0.0, 1.0]), z, center=center,
            axes=np.array([[1.0, 0, 0], [0, 1.0, 0]]), half=np.array([hw, hh]),
            **_texture(rng, min_wavelength)))
    yaw = np.deg2rad(rng.choice([-1, 1]) * rng.uniform(25, 45))
    n = _yawed_normal(yaw)
    z = rng.uniform(3.5, wall_dist - 1.0)
    center = np.array([rng.uniform(-0.4, 0.4) * z, cam_height - rng.uniform(0.6, 1.2), z])
    e1 = np.array([np.cos(yaw), 0.0, -np.sin(yaw)])
    surfaces.append(Surface(
        n, float(n @ center), center=center, axes=np.stack([e1, [0.0, 1.0, 0.0]]),
        half=np.array([rng.uniform(0.4, 0.8), rng.uniform(0.4, 0.8)]),
        **_texture(rng, min_wavelength)))
    return Scene(surfaces, projector, dict(cam_height=cam_height, wall_dist=wall_dist))


def render(scene, pose_to_world, K, height, width):
    """Ray-cast one view: (image (3,h,w), depth (h,w), surface id (h,w))."""
    rays = ray_grid(K, height, width).reshape(3, -1)  # camera frame, z = 1
    dirs = pose_to_world.R @ rays
    origin = pose_to_world.t
    best = np.full(rays.shape[1], np.inf)
    ids = np.full(rays.shape[1], -1)
    for i, s in enumerate(scene.surfaces):
        denom = s.normal @ dirs
        with np.errstate(divide="ignore", invalid="ignore"):
            lam = (s.offset - s.normal @ origin) / denom
        hit = np.isfinite(lam) & (lam > 1e-3)
        if s.center is not None:
            pts = origin[:, None] + dirs * np.where(hit, lam, 0.0)
            rel = pts - s.center[:, None]
            hit &= (np.abs(s.axes[0] @ rel) <= s.half[0]) & (np.abs(s.axes[1] @ rel) <= s.half[1])
        closer = hit & (lam < best)
        best[closer] = lam[closer]
        ids[closer] = i
    if np.any(ids < 0):
        raise RuntimeError("scene does not cover the whole view")
    points = origin[:, None] + dirs * best
    image = np.empty((3, rays.shape[1]))
    P = scene.projector
    z0 = np.maximum(points[2], 0.1)
    u0 = P.fx * points[0] / z0 + P.cx
    v0 = P.fy * points[1] / z0 + P.cy
    for i, s in enumerate(scene.surfaces):
        sel = ids == i
        if not sel.any():
            continue
        phase = 2 * np.pi * (np.outer(s.freqs[:, 0], u0[sel]) + np.outer(s.freqs[:, 1], v0[sel])) + s.phases[:, None]
        image[:, sel] = s.base[:, None] + s.amps.T @ np.sin(phase)
    # depth along the optical axis equals the ray parameter since rays have z = 1
    return image.reshape(3, height, width), best.reshape(height, width), ids.reshape(height, width)


def trajectory(spec, rng):
    """Camera-to-world poses; frame 0 is the world origin."""
    n = spec.n_frames
    if spec.motion == "identity":
        return [Pose.identity() for _ in range(n)]
    lateral = rng.uniform(-0.5, 0.5) * spec.step
    vertical = rng.uniform(-0.1, 0.1) * spec.step
    if spec.motion == "translation":
        v = np.array([lateral, vertical, spec.step])
        return [Pose(np.eye(3), i * v) for i in range(n)]
    amp_x = rng.uniform(0.3, 0.6)
    amp_yaw = np.deg2rad(rng.uniform(1.5, 3.0))
    period = rng.uniform(12, 24)
    phase = rng.uniform(0, 2 * np.pi)
    poses = []
    for i in range(n):
        s = np.sin(2 * np.pi * i / period + phase) - np.sin(phase)
        t = np.array([amp_x * s + lateral * i, vertical * i, spec.step * i])
        R = so3_exp(np.array([0.0, amp_yaw * s, 0.0]))
        poses.append(Pose(R, t))
    return poses


def synth_scene(spec, return_ids=False):
    """Render one sequence of Frames with dense gt depth, sparse samples and true poses."""
    rng = np.random.default_rng(spec.seed)
    K = spec.intrinsics
    scene = build_scene(rng, K, spec.min_wavelength)
    poses = trajectory(spec, rng)
    frames, ids = [], []
    for i, pose in enumerate(poses):
        image, depth, sid = render(scene, pose, K, spec.height, spec.width)
        sparse = subsample_sparse(depth, spec.density, spec.sampling, seed=[spec.seed, i])
        frames.append(Frame(image=image, sparse_depth=sparse, K=K, gt_depth=depth, pose_to_world=pose, index=i))
        ids.append(sid)
    return (frames, ids) if return_ids else frames


def synth_dataset(n_sequences, spec, seed=0):
    """Independent sequences whose scene seeds derive from ``seed``."""
    seeds = np.random.default_rng(seed).integers(0, 2 ** 31 - 1, size=n_sequences)
    out = []
    for s in seeds:
        params = {k: getattr(spec, k) for k in spec.__dataclass_fields__}
        params["seed"] = int(s)
        out.append(synth_scene(SceneSpec(**params)))
    return out


def covisible_mask(frame_t, frame_tau, ids_t, ids_tau, rel_depth_tol=1e-3):
    """Pixels of frame t whose surface point is visible in frame tau.

    The reprojected point must land strictly inside frame tau, all four
    bilinear neighbours must show the same surface, and their depth must
    agree with the reprojected depth (no occluder in between).
    """
    K = frame_t.K
    h, w = frame_t.shape
    rel = relative_pose(frame_t.pose_to_world, frame_tau.pose_to_world)
    pts = ray_grid(K, h, w).reshape(3, -1) * frame_t.gt_depth.reshape(1, -1)
    q = rel.R @ pts + rel.t[:, None]
    z = q[2]
    ok = z > 1e-6
    zs = np.where(ok, z, 1.0)
    u = frame_tau.K.fx * q[0] / zs + frame_tau.K.cx
    v = frame_tau.K.fy * q[1] / zs + frame_tau.K.cy
    ok &= (u >= 0) & (u <= w - 1) & (v >= 0) & (v <= h - 1)
    x0 = np.clip(np.floor(np.where(ok, u, 0)).astype(int), 0, w - 2)
    y0 = np.clip(np.floor(np.where(ok, v, 0)).astype(int), 0, h - 2)
    own = ids_t.reshape(-1)
    for dy in (0, 1):
        for dx in (0, 1):
            ok &= ids_tau[y0 + dy, x0 + dx] == own
    # depth check on the interpolated gt of tau (planar surfaces interpolate exactly up to bilinear error)
    fx_, fy_ = u - x0, v - y0
    d = frame_tau.gt_depth
    interp = ((1 - fx_) * (1 - fy_) * d[y0, x0] + fx_ * (1 - fy_) * d[y0, x0 + 1]
              + (1 - fx_) * fy_ * d[y0 + 1, x0] + fx_ * fy_ * d[y0 + 1, x0 + 1])
    ok &= np.abs(interp - z) <= rel_depth_tol * z + 1e-2
    return ok.reshape(h, w)
