"""Frames, sparse subsampling, augmentation and on-disk datasets."""

import math
import os
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from kbnet.camera import Intrinsics, Pose, read_calibration, write_calibration
from kbnet.data.pngio import read_depth_png, read_image_png, write_depth_png, write_image_png
from kbnet.errors import NoValidPixelsError


@dataclass
class Frame:
    image: np.ndarray  # (3, h, w) in [0, 1]
    sparse_depth: np.ndarray  # (h, w) meters, 0 = no measurement
    K: Intrinsics
    gt_depth: Optional[np.ndarray] = None  # (h, w) meters, 0 = invalid
    pose_to_world: Optional[Pose] = None
    index: int = 0

    def __post_init__(self):
        h, w = self.image.shape[1:]
        if self.sparse_depth.shape != (h, w):
            raise ValueError(f"sparse depth {self.sparse_depth.shape} does not match image {self.image.shape}")
        if self.gt_depth is not None and self.gt_depth.shape != (h, w):
            raise ValueError(f"ground truth {self.gt_depth.shape} does not match image {self.image.shape}")

    @property
    def shape(self):
        return self.image.shape[1:]


def _count(fraction, n):
    return int(math.floor(fraction * n + 1e-9))


def subsample_sparse(dense, density, strategy="uniform-random", seed=0):
    """Keep floor(density * #valid) valid pixels of ``dense``; zero elsewhere."""
    if not 0 < density <= 1:
        raise ValueError(f"density must be in (0, 1], got {density}")
    dense = np.asarray(dense, dtype=np.float64)
    valid = np.flatnonzero(np.isfinite(dense) & (dense > 0))
    if valid.size == 0:
        raise NoValidPixelsError("dense depth has no valid pixels to sample")
    count = _count(density, valid.size)
    rng = np.random.default_rng(seed)
    if strategy == "uniform-random":
        chosen = rng.choice(valid, size=count, replace=False)
    elif strategy == "grid":
        h, w = dense.shape
        step = max(1, int(math.floor(math.sqrt(1.0 / density))))
        oy, ox = rng.integers(0, step, size=2)
        lattice = (np.arange(oy, h, step)[:, None] * w + np.arange(ox, w, step)[None, :]).ravel()
        lattice = np.intersect1d(lattice, valid)
        if lattice.size >= count:
            chosen = rng.choice(lattice, size=count, replace=False)
        else:
            rest = np.setdiff1d(valid, lattice)
            chosen = np.concatenate([lattice, rng.choice(rest, size=count - lattice.size, replace=False)])
    else:
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    out = np.zeros_like(dense)
    flat = out.reshape(-1)
    flat[chosen] = dense.reshape(-1)[chosen]
    return out


def remove_points(sparse, fraction, rng):
    """Zero a uniform random subset so that floor(count * (1 - fraction)) survive."""
    support = np.flatnonzero(sparse > 0)
    keep = _count(1.0 - fraction, support.size)
    out = np.zeros_like(sparse)
    if keep:
        kept = rng.choice(support, size=keep, replace=False)
        out.reshape(-1)[kept] = sparse.reshape(-1)[kept]
    return out


def _shift_columns(arr, s, fill_edge):
    if s == 0:
        return arr.copy()
    out = np.empty_like(arr)
    if s > 0:
        out[..., s:] = arr[..., :-s]
        out[..., :s] = arr[..., :1] if fill_edge else 0.0
    else:
        out[..., :s] = arr[..., -s:]
        out[..., s:] = arr[..., -1:] if fill_edge else 0.0
    return out


def shift_frame(frame, s):
    """Move content ``s`` pixels to the right (left if negative), keeping the size.

    Vacated image columns replicate the edge, vacated depth columns become
    invalid, and the principal point moves with the content.
    """
    K = frame.K
    return replace(
        frame,
        image=_shift_columns(frame.image, s, True),
        sparse_depth=_shift_columns(frame.sparse_depth, s, False),
        gt_depth=None if frame.gt_depth is None else _shift_columns(frame.gt_depth, s, False),
        K=Intrinsics(K.fx, K.fy, K.cx + s, K.cy),
    )


@dataclass(frozen=True)
class AugmentConfig:
    removal_fraction_range: tuple = (0.3, 0.6)
    h_shift_range: tuple = (0.0, 0.0)  # fraction of the width
    apply_probability: float = 0.5

    def __post_init__(self):
        for name in ("removal_fraction_range", "h_shift_range"):
            lo, hi = getattr(self, name)
            if not (0 <= lo <= hi < 1):
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi < 1, got {(lo, hi)}")
        if not 0 <= self.apply_probability <= 1:
            raise ValueError("apply_probability must be in [0, 1]")


def augment(frames, cfg, rng):
    """Apply point removal and a joint horizontal shift to a frame triple.

    Each augmentation fires independently with ``cfg.apply_probability``.
    The same shift is applied to every frame (and its intrinsics) so the
    triple stays geometrically consistent.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    frames = list(frames)
    lo, hi = cfg.removal_fraction_range
    if hi > 0 and rng.random() < cfg.apply_probability:
        f = rng.uniform(lo, hi)
        frames = [replace(fr, sparse_depth=remove_points(fr.sparse_depth, f, rng)) for fr in frames]
    lo, hi = cfg.h_shift_range
    if hi > 0 and rng.random() < cfg.apply_probability:
        w = frames[0].shape[1]
        s = int(round(rng.uniform(lo, hi) * w)) * (1 if rng.random() < 0.5 else -1)
        frames = [shift_frame(fr, s) for fr in frames]
    return frames


def triples(sequence, ends=False):
    """(previous, current, next) windows over one sequence.

    With ``ends`` the first and last frames are also targets; their only
    neighbour stands in on both sides.
    """
    n = len(sequence)
    if not ends:
        return [(sequence[i - 1], sequence[i], sequence[i + 1]) for i in range(1, n - 1)]
    if n < 2:
        return []
    return [(sequence[i - 1 if i > 0 else 1], sequence[i], sequence[i + 1 if i < n - 1 else n - 2])
            for i in range(n)]


# -- on-disk datasets -------------------------------------------------------------

def _pose_line(pose):
    return " ".join(repr(float(x)) for x in np.hstack([pose.R, pose.t[:, None]]).ravel())


def write_dataset(root, sequences):
    """Write sequences as PNGs plus ``manifest.txt``, ``calib.txt`` and ``poses.txt``.

    Manifest lines are ``image depth gt calib_index`` with paths relative to
    ``root``; consecutive lines in one sequence directory are adjacent
    frames.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    cameras, lines, poses = [], [], []
    for s, seq in enumerate(sequences):
        seq_dir = root / f"seq{s:03d}"
        seq_dir.mkdir(exist_ok=True)
        for i, fr in enumerate(seq):
            if fr.K not in cameras:
                cameras.append(fr.K)
            stem = f"seq{s:03d}/{i:05d}"
            write_image_png(fr.image, root / f"{stem}_image.png")
            write_depth_png(fr.sparse_depth, root / f"{stem}_sparse.png")
            entry = [f"{stem}_image.png", f"{stem}_sparse.png"]
            if fr.gt_depth is not None:
                write_depth_png(fr.gt_depth, root / f"{stem}_gt.png")
                entry.append(f"{stem}_gt.png")
            entry.append(str(cameras.index(fr.K)))
            lines.append(" ".join(entry))
            poses.append(_pose_line(fr.pose_to_world) if fr.pose_to_world is not None else "-")
    write_calibration(root / "calib.txt", cameras)
    (root / "manifest.txt").write_text("\n".join(lines) + "\n")
    (root / "poses.txt").write_text("\n".join(poses) + "\n")
    return root / "manifest.txt"


def parse_manifest_line(line):
    parts = line.split()
    if len(parts) not in (3, 4):
        raise ValueError(f"manifest line needs 'image depth [gt] calib_index', got {line!r}")
    gt = parts[2] if len(parts) == 4 else None
    return parts[0], parts[1], gt, int(parts[-1])


def read_dataset(manifest, calib=None, poses=None):
    """Load a manifest into a list of sequences (grouped by image directory)."""
    manifest = Path(manifest)
    root = manifest.parent
    cameras = read_calibration(calib or root / "calib.txt")
    pose_path = Path(poses) if poses else root / "poses.txt"
    pose_lines = pose_path.read_text().splitlines() if pose_path.exists() else None
    sequences, current, last_dir = [], [], None
    lines = [ln for ln in manifest.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
    for i, line in enumerate(lines):
        img_p, depth_p, gt_p, cam = parse_manifest_line(line)
        pose = None
        if pose_lines is not None and pose_lines[i].strip() not in ("", "-"):
            vals = np.array([float(x) for x in pose_lines[i].split()]).reshape(3, 4)
            pose = Pose(vals[:, :3], vals[:, 3])
        fr = Frame(
            image=read_image_png(root / img_p),
            sparse_depth=read_depth_png(root / depth_p),
            gt_depth=read_depth_png(root / gt_p) if gt_p else None,
            K=cameras[cam],
            pose_to_world=pose,
            index=i,
        )
        d = os.path.dirname(img_p)
        if d != last_dir and current:
            sequences.append(current)
            current = []
        current.append(fr)
        last_dir = d
    if current:
        sequences.append(current)
    return sequences
