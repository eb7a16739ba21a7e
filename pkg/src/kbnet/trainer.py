"""Adam, learning-rate schedules, the training loop and evaluation sweeps."""

import csv
import dataclasses
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from kbnet import camera
from kbnet.camera import Intrinsics, relative_pose
from kbnet.checkpoint import check_shapes, load_checkpoint, save_checkpoint
from kbnet.data.frames import AugmentConfig, augment, subsample_sparse, triples
from kbnet.errors import CheckpointError, TrainingFault
from kbnet.losses import LossWeights, photometric_loss, smoothness_loss, sparse_consistency_loss, total_loss
from kbnet.metrics import evaluate, mean_result
from kbnet.network import NetworkConfig, kbnet_forward, param_shapes, pose_net_forward
from kbnet.numerics.tensor import Tape, Tensor, backward, no_grad
from kbnet.s2d import S2DConfig

# (start_epoch, end_epoch, rate); end is exclusive
SCHEDULES = {
    "kitti": ((0, 2, 5e-5), (2, 8, 1e-4), (8, 20, 1.5e-4), (20, 30, 1e-4), (30, 45, 5e-5), (45, 60, 2e-5)),
    "void": ((0, 10, 1e-4), (10, 15, 5e-5)),
    "nyuv2": ((0, 10, 1e-4), (10, 15, 5e-5)),
    "desk": ((0, 6, 1e-4), (6, 10, 5e-5)),
}


def validate_schedule(schedule, epochs):
    expect = 0
    for start, end, rate in schedule:
        if start != expect or end <= start:
            raise ValueError(f"schedule ranges must be contiguous from 0; found [{start}, {end}) after {expect}")
        if not rate > 0:
            raise ValueError(f"learning rate must be positive, got {rate}")
        expect = end
    if expect != epochs:
        raise ValueError(f"schedule covers epochs [0, {expect}) but training runs {epochs} epochs")


def learning_rate(schedule, epoch):
    for start, end, rate in schedule:
        if start <= epoch < end:
            return rate
    raise ValueError(f"epoch {epoch} is not covered by the schedule")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    crop: tuple = (64, 96)
    weights: LossWeights = LossWeights.preset("synthetic")
    lr_schedule: tuple = SCHEDULES["desk"]
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    augment: AugmentConfig = AugmentConfig()
    pose_source: str = "gt"
    end_frames: bool = False  # sequence ends become targets too (see data.triples)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "lr_schedule", tuple(tuple(s) for s in self.lr_schedule))
        object.__setattr__(self, "crop", tuple(int(c) for c in self.crop))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        validate_schedule(self.lr_schedule, self.epochs)
        if not all(0 < b < 1 for b in self.betas):
            raise ValueError(f"Adam betas must lie in (0, 1), got {self.betas}")
        if self.pose_source not in ("gt", "pose-net"):
            raise ValueError(f"pose_source must be 'gt' or 'pose-net', got {self.pose_source!r}")


# -- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """Bias-corrected Adam update of ``params`` (name -> Tensor) in place."""
    b1, b2 = betas
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingFault(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        p = params[name]
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# -- batches -----------------------------------------------------------------

def crop_frames(frames, crop, rng):
    """One random crop shared by all frames; the principal point follows the crop."""
    h, w = frames[0].shape
    ch, cw = crop
    if ch > h or cw > w:
        raise ValueError(f"crop {crop} is larger than the frames ({h}x{w})")
    y = int(rng.integers(0, h - ch + 1))
    x = int(rng.integers(0, w - cw + 1))
    if (ch, cw) == (h, w):
        return list(frames)
    out = []
    for fr in frames:
        K = fr.K
        out.append(dataclasses.replace(
            fr,
            image=fr.image[:, y:y + ch, x:x + cw].copy(),
            sparse_depth=fr.sparse_depth[y:y + ch, x:x + cw].copy(),
            gt_depth=None if fr.gt_depth is None else fr.gt_depth[y:y + ch, x:x + cw].copy(),
            K=Intrinsics(K.fx, K.fy, K.cx - x, K.cy - y)))
    return out


def _stack(frames):
    image = np.stack([f.image for f in frames])
    z = np.stack([f.sparse_depth for f in frames])[:, None]
    return image, z, [f.K for f in frames]


def loss_on_batch(params, batch, net_cfg, s2d_cfg, weights, pose_source="gt"):
    """Total loss (Tensor) and a dict of term values for a list of frame triples."""
    prev = [b[0] for b in batch]
    cur = [b[1] for b in batch]
    nxt = [b[2] for b in batch]
    image, z, Ks = _stack(cur)
    depth = kbnet_forward(image, z, Ks, params, net_cfg, s2d_cfg)
    recs = []
    for adj in (prev, nxt):
        image_tau = np.stack([f.image for f in adj])
        if pose_source == "gt":
            pose = [relative_pose(c.pose_to_world, a.pose_to_world) for c, a in zip(cur, adj)]
        else:
            pose = pose_net_forward(image, image_tau, params, net_cfg)
        recs.append(camera.reconstruct(image_tau, depth, pose, Ks))
    terms = {
        "ph": photometric_loss(image, recs, weights),
        "sz": sparse_consistency_loss(depth, z),
        "sm": smoothness_loss(depth, image),
    }
    total = total_loss(terms, weights)
    return total, {k: float(v.item()) for k, v in terms.items()}


# -- checkpoints -------------------------------------------------------------

def config_meta(net_cfg, s2d_cfg, **extra):
    meta = {"network": dataclasses.asdict(net_cfg), "s2d": dataclasses.asdict(s2d_cfg)}
    meta.update(extra)
    return meta


def save_model(path, params, net_cfg, s2d_cfg, state=None, **extra):
    arrays = OrderedDict((name, t.data) for name, t in params.items())
    if state is not None:
        for name in params:
            if name in state.m:
                arrays[f"adam/m/{name}"] = state.m[name]
                arrays[f"adam/v/{name}"] = state.v[name]
        arrays["adam/step"] = np.array([float(state.step)])
    save_checkpoint(path, arrays, config_meta(net_cfg, s2d_cfg, **extra))


def load_model(path):
    """(params, net_cfg, s2d_cfg, adam_state, meta) from a checkpoint file."""
    arrays, meta = load_checkpoint(path)
    try:
        net_cfg = NetworkConfig(**meta["network"])
        s2d_cfg = S2DConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["s2d"].items()})
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: checkpoint lacks a usable network configuration ({exc})") from None
    with_pose = any(k.startswith("pose.") for k in arrays)
    expected = param_shapes(net_cfg, s2d_cfg, with_pose)
    check_shapes(arrays, expected)
    params = OrderedDict((n, Tensor(arrays[n].copy(), requires_grad=True, name=n)) for n in expected)
    state = AdamState()
    if "adam/step" in arrays:
        state.step = int(arrays["adam/step"][0])
        for n in expected:
            if f"adam/m/{n}" in arrays:
                state.m[n] = arrays[f"adam/m/{n}"].copy()
                state.v[n] = arrays[f"adam/v/{n}"].copy()
    return params, net_cfg, s2d_cfg, state, meta


# -- training ------------------------------------------------------------------

LOG_FIELDS = ("epoch", "step", "total", "ph", "sz", "sm", "lr")


def train(sequences, params, cfg, net_cfg, s2d_cfg, out_dir=None, val_frames=None, cap=(0.2, 12.0), verbose=False):
    """Optimise ``params`` in place on frame triples drawn from ``sequences``.

    Returns the per-epoch history: mean loss terms, learning rate and,
    when ``val_frames`` is given, validation metrics.  With ``out_dir``
    a checkpoint is written after every epoch and each step is appended
    to ``train_log.csv``.
    """
    rng = np.random.default_rng(cfg.seed)
    samples = [t for seq in sequences for t in triples(seq, ends=cfg.end_frames)]
    if not samples:
        need = 2 if cfg.end_frames else 3
        raise ValueError(f"dataset yields no frame triples (sequences need >= {need} frames)")
    trainable = [n for n in params if cfg.pose_source == "pose-net" or not n.startswith("pose.")]
    state = AdamState()
    history = []
    log_fh = writer = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(LOG_FIELDS)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            lr = learning_rate(cfg.lr_schedule, epoch)
            order = rng.permutation(len(samples))
            sums = dict(total=0.0, ph=0.0, sz=0.0, sm=0.0)
            n_batches = 0
            for b, start in enumerate(range(0, len(order), cfg.batch_size)):
                batch = []
                for i in order[start:start + cfg.batch_size]:
                    trip = augment(samples[i], cfg.augment, rng)
                    batch.append(crop_frames(trip, cfg.crop, rng))
                with Tape() as tape:
                    try:
                        loss, terms = loss_on_batch(params, batch, net_cfg, s2d_cfg, cfg.weights, cfg.pose_source)
                    except TrainingFault as exc:
                        raise TrainingFault(f"epoch {epoch}, batch {b}: {exc}") from None
                    total = loss.item()
                    if not math.isfinite(total):
                        raise TrainingFault(f"epoch {epoch}, batch {b}: loss is not finite ({total})")
                    plist = [params[n] for n in trainable]
                    grads = backward(loss, tape, plist)
                adam_step(params, dict(zip(trainable, grads)), state, lr, cfg.betas, cfg.eps)
                sums["total"] += total
                for k, v in terms.items():
                    sums[k] += v
                n_batches += 1
                if writer:
                    writer.writerow([epoch, step, repr(total), repr(terms["ph"]), repr(terms["sz"]),
                                     repr(terms["sm"]), repr(lr)])
                step += 1
            row = {k: v / n_batches for k, v in sums.items()}
            row.update(epoch=epoch, lr=lr)
            if val_frames is not None:
                res = evaluate_frames(params, val_frames, net_cfg, s2d_cfg, cap)
                row.update(val_mae=res.mae, val_rmse=res.rmse, val_imae=res.imae, val_irmse=res.irmse)
            history.append(row)
            if verbose:
                print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()),
                      flush=True)
            if out_dir is not None:
                save_model(out_dir / f"ckpt_epoch{epoch:03d}.kbn", params, net_cfg, s2d_cfg, state, epoch=epoch)
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    return params, history


# -- inference and evaluation --------------------------------------------------------

def predict(params, frames, net_cfg, s2d_cfg, K=None, sparse=None, batch_size=8):
    """Dense depth (h, w) per frame.  ``K``/``sparse`` override per-frame inputs."""
    out = []
    with no_grad():
        for s in range(0, len(frames), batch_size):
            chunk = frames[s:s + batch_size]
            image = np.stack([f.image for f in chunk])
            zs = [f.sparse_depth for f in chunk] if sparse is None else sparse[s:s + batch_size]
            z = np.stack(zs)[:, None]
            Ks = [f.K for f in chunk] if K is None else ([K] * len(chunk) if isinstance(K, Intrinsics) else K[s:s + batch_size])
            depth = kbnet_forward(image, z, Ks, params, net_cfg, s2d_cfg)
            out.extend(depth.data[:, 0])
    return out


def evaluate_frames(params, frames, net_cfg, s2d_cfg, cap, K=None, sparse=None):
    preds = predict(params, frames, net_cfg, s2d_cfg, K=K, sparse=sparse)
    return mean_result([evaluate(p, f.gt_depth, cap) for p, f in zip(preds, frames)])


def nearest_fill(sparse):
    """Fill every pixel with the depth of its nearest measured pixel."""
    sparse = np.asarray(sparse, dtype=np.float64)
    empty = ~(sparse > 0)
    if empty.all():
        raise ValueError("cannot fill a depth map without measurements")
    _, (iy, ix) = ndimage.distance_transform_edt(empty, return_indices=True)
    return sparse[iy, ix]


def evaluate_nearest_fill(frames, cap):
    return mean_result([evaluate(nearest_fill(f.sparse_depth), f.gt_depth, cap) for f in frames])


# -- sweeps ----------------------------------------------------------------------

SWEEP_HEADER = "name,value,mae_mm,rmse_mm,imae_per_km,irmse_per_km,n_pixels"


def _write_table(rows, out_dir, stem, xlabel):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"{stem}.csv", "w") as fh:
        fh.write(SWEEP_HEADER + "\n")
        for name, value, res in rows:
            fh.write(f"{name},{value!r},{res.to_csv_line()}\n")
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name in dict.fromkeys(r[0] for r in rows):
        pts = sorted((v, r.mae) for n, v, r in rows if n == name)
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("MAE (mm)")
    ax.grid(alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / f"{stem}.png", dpi=100, metadata={"Software": None})
    plt.close(fig)


def sensitivity_sweep(params, frames, net_cfg, s2d_cfg, perturbations, cap, out_dir=None):
    """Evaluate with each frame's K perturbed; one row per (param, delta) in order."""
    rows = []
    for param, delta in perturbations:
        Ks = [f.K.perturbed(param, delta) for f in frames]
        rows.append((param, delta, evaluate_frames(params, frames, net_cfg, s2d_cfg, cap, K=Ks)))
    if out_dir is not None:
        _write_table(rows, out_dir, "sensitivity", "relative perturbation")
    return rows


def density_sweep(params, frames, net_cfg, s2d_cfg, densities, cap, seed=0, strategy="uniform-random", out_dir=None):
    """Resample sparse inputs from gt at each density and evaluate; rows in request order."""
    rows = []
    for density in densities:
        sparse = [subsample_sparse(f.gt_depth, density, strategy, seed=[seed, i]) for i, f in enumerate(frames)]
        rows.append(("density", density, evaluate_frames(params, frames, net_cfg, s2d_cfg, cap, sparse=sparse)))
    if out_dir is not None:
        _write_table(rows, out_dir, "density", "sparse density")
    return rows
