"""Pinhole geometry, SE(3) poses and differentiable view reconstruction.

Pixel convention (used everywhere in the package): ``u`` is the column and
``v`` the row, pixel centres sit at integer coordinates starting from 0.
"""

from dataclasses import dataclass

import numpy as np

from kbnet.errors import BehindCameraError, ShapeError
from kbnet.numerics import ops
from kbnet.numerics.tensor import Tensor, as_tensor, record


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")

    @property
    def matrix(self):
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])

    @classmethod
    def from_matrix(cls, K):
        K = np.asarray(K, dtype=np.float64)
        if K.shape != (3, 3):
            raise ValueError(f"intrinsics matrix must be 3x3, got {K.shape}")
        if K[0, 1] != 0 or K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise ValueError("only zero-skew upper-triangular K with K[2,2] = 1 is supported")
        return cls(K[0, 0], K[1, 1], K[0, 2], K[1, 2])

    def perturbed(self, param, delta):
        """Copy with ``param`` in {'f', 'fx', 'fy', 'cx', 'cy'} scaled by ``1 + delta``."""
        s = 1.0 + delta
        if param == "f":
            return Intrinsics(self.fx * s, self.fy * s, self.cx, self.cy)
        if param in ("fx", "fy", "cx", "cy"):
            vals = dict(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy)
            vals[param] *= s
            return Intrinsics(**vals)
        raise ValueError(f"unknown intrinsics parameter {param!r}")

    def to_line(self):
        return f"{self.fx!r} {self.fy!r} {self.cx!r} {self.cy!r}"


def parse_calibration_line(line):
    parts = line.split()
    if len(parts) != 4:
        raise ValueError(f"calibration line needs 4 floats 'fx fy cx cy', got {len(parts)}: {line!r}")
    return Intrinsics(*(float(p) for p in parts))


def read_calibration(path):
    """One camera per non-empty line: ``fx fy cx cy``."""
    with open(path) as fh:
        return [parse_calibration_line(line) for line in fh if line.strip() and not line.startswith("#")]


def write_calibration(path, cameras):
    with open(path, "w") as fh:
        for K in cameras:
            fh.write(K.to_line() + "\n")


def scale_intrinsics(K, level):
    """Intrinsics for a feature map downsampled ``level`` times by 2."""
    if level < 0:
        raise ValueError(f"level must be >= 0, got {level}")
    s = 2.0 ** level
    return Intrinsics(K.fx / s, K.fy / s, K.cx / s, K.cy / s)


def lift(K, u, v):
    """Ray K^-1 [u, v, 1]; works elementwise on arrays, stacks on the last axis."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return np.stack([(u - K.cx) / K.fx, (v - K.cy) / K.fy, np.ones_like(u)], axis=-1)


def backproject(K, u, v, depth):
    return lift(K, u, v) * np.asarray(depth, dtype=np.float64)[..., None]


def project(K, points):
    """Perspective projection of (..., 3) points; raises if any Z <= 0."""
    points = np.asarray(points, dtype=np.float64)
    z = points[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError(f"{int(np.sum(z <= 0))} point(s) at or behind the camera plane")
    return np.stack([K.fx * points[..., 0] / z + K.cx, K.fy * points[..., 1] / z + K.cy], axis=-1)


def pixel_grid(h, w):
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return u, v


def ray_grid(K, h, w):
    """(3, h, w) map of lifted pixel rays."""
    u, v = pixel_grid(h, w)
    return np.moveaxis(lift(K, u, v), -1, 0)


# -- SE(3) -------------------------------------------------------------------

def skew(w):
    return np.array([[0.0, -w[2], w[1]],
                     [w[2], 0.0, -w[0]],
                     [-w[1], w[0], 0.0]])


def _rodrigues_coeffs(theta):
    # A = sin(t)/t, B = (1 - cos t)/t^2 and their derivatives divided by t
    if theta < 1e-4:
        t2 = theta * theta
        a = 1.0 - t2 / 6.0 + t2 * t2 / 120.0
        b = 0.5 - t2 / 24.0 + t2 * t2 / 720.0
        da = -1.0 / 3.0 + t2 / 30.0
        db = -1.0 / 12.0 + t2 / 180.0
        return a, b, da, db
    s, c = np.sin(theta), np.cos(theta)
    a = s / theta
    b = (1.0 - c) / theta ** 2
    da = (theta * c - s) / theta ** 3
    db = (theta * s - 2.0 * (1.0 - c)) / theta ** 4
    return a, b, da, db


def so3_exp(w):
    w = np.asarray(w, dtype=np.float64)
    a, b, _, _ = _rodrigues_coeffs(float(np.linalg.norm(w)))
    W = skew(w)
    return np.eye(3) + a * W + b * (W @ W)


@dataclass(frozen=True)
class Pose:
    """Rigid transform x -> R x + t."""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {R.shape}")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=np.float64)
        return cls(T[:3, :3], T[:3, 3])

    @property
    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def is_valid(self, tol=1e-9):
        return (np.max(np.abs(self.R.T @ self.R - np.eye(3))) < tol
                and abs(np.linalg.det(self.R) - 1.0) < tol)

    def compose(self, other):
        """self after other."""
        return Pose(self.R @ other.R, self.R @ other.t + self.t)

    def inverse(self):
        return Pose(self.R.T, -self.R.T @ self.t)

    def apply(self, points):
        return np.asarray(points) @ self.R.T + self.t


def exp_se3(v):
    """Pose from a 6-vector (axis-angle rotation, translation)."""
    v = np.asarray(v, dtype=np.float64).reshape(6)
    return Pose(so3_exp(v[:3]), v[3:].copy())


def relative_pose(pose_t_to_world, pose_tau_to_world):
    """Transform taking camera-t coordinates to camera-tau coordinates."""
    return pose_tau_to_world.inverse().compose(pose_t_to_world)


def so3_exp_op(omega):
    """Differentiable batched Rodrigues map: (n, 3) Tensor -> (n, 3, 3) Tensor."""
    omega = as_tensor(omega)
    w = omega.data.reshape(-1, 3)
    n = w.shape[0]
    out = np.empty((n, 3, 3))
    jac = np.empty((n, 3, 3, 3))  # d R / d w_k stored at [:, k]
    for i in range(n):
        theta = float(np.linalg.norm(w[i]))
        a, b, da, db = _rodrigues_coeffs(theta)
        W = skew(w[i])
        W2 = W @ W
        out[i] = np.eye(3) + a * W + b * W2
        for k in range(3):
            E = skew(np.eye(3)[k])
            jac[i, k] = da * w[i, k] * W + a * E + db * w[i, k] * W2 + b * (E @ W + W @ E)

    def bw(g):
        return (np.einsum("nij,nkij->nk", g, jac).reshape(omega.shape),)

    return record(out, (omega,), bw)


def pose_from_vector_op(vec):
    """(n, 6) Tensor -> (R (n,3,3), t (n,3)) Tensors, via exp_se3."""
    vec = as_tensor(vec)
    return so3_exp_op(ops.getitem(vec, (slice(None), slice(0, 3)))), ops.getitem(vec, (slice(None), slice(3, 6)))


def _pose_tensors(pose, n):
    if isinstance(pose, Pose):
        pose = [pose] * n
    if isinstance(pose, (list, tuple)) and pose and isinstance(pose[0], Pose):
        if len(pose) != n:
            raise ShapeError(f"got {len(pose)} poses for a batch of {n}")
        return Tensor(np.stack([p.R for p in pose])), Tensor(np.stack([p.t for p in pose]))
    R, t = pose
    return as_tensor(R), as_tensor(t)


def _per_sample(K, n):
    if isinstance(K, Intrinsics):
        return [K] * n
    if len(K) != n:
        raise ShapeError(f"got {len(K)} intrinsics for a batch of {n}")
    return list(K)


def reconstruct(image_tau, depth, pose, K):
    """Warp ``image_tau`` into the current view using ``depth`` and ``pose``.

    ``depth`` is (n, 1, h, w) in the current camera; ``pose`` maps current
    camera coordinates to the tau camera and is a Pose, a list of Poses or
    a pair of (R, t) Tensors shaped (n, 3, 3) and (n, 3).  ``K`` is one
    Intrinsics or one per batch element.

    Returns the reconstruction (n, c, h, w) and a boolean (n, h, w) mask;
    pixels that land outside the tau image or behind its camera are 0 and
    masked out.
    """
    image_tau, depth = as_tensor(image_tau), as_tensor(depth)
    n, _, h, w = depth.shape
    if image_tau.shape[0] != n or image_tau.shape[2:] != (h, w):
        raise ShapeError(f"image {image_tau.shape} and depth {depth.shape} do not align")
    Ks = _per_sample(K, n)
    R, t = _pose_tensors(pose, n)
    rays = np.stack([ray_grid(k, h, w).reshape(3, h * w) for k in Ks])
    points = ops.mul(ops.reshape(depth, (n, 1, h * w)), rays)
    moved = ops.add(ops.matmul(R, points), ops.reshape(t, (n, 3, 1)))
    x = ops.getitem(moved, (slice(None), 0))
    y = ops.getitem(moved, (slice(None), 1))
    z = ops.getitem(moved, (slice(None), 2))
    behind = z.data <= 1e-6
    front = (~behind).astype(np.float64)
    z_safe = ops.add(ops.mul(z, front), behind.astype(np.float64))
    fx = np.array([k.fx for k in Ks])[:, None]
    fy = np.array([k.fy for k in Ks])[:, None]
    cx = np.array([k.cx for k in Ks])[:, None]
    cy = np.array([k.cy for k in Ks])[:, None]
    off = np.where(behind, -1.0, 0.0)
    u = ops.add(ops.mul(ops.add(ops.mul(ops.div(x, z_safe), fx), cx), front), off)
    v = ops.add(ops.mul(ops.add(ops.mul(ops.div(y, z_safe), fy), cy), front), off)
    out, ok = ops.bilinear_sample(image_tau, ops.reshape(u, (n, h, w)), ops.reshape(v, (n, h, w)))
    return out, ok & ~behind.reshape(n, h, w)
