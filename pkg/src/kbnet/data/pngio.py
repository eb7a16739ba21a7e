"""PNG storage: 16-bit depth maps (value / 256 = meters, 0 = invalid) and 8-bit RGB images."""

import numpy as np
import png

DEPTH_SCALE = 256.0


def read_depth_png(path):
    width, height, rows, info = png.Reader(filename=str(path)).read()
    if info["bitdepth"] != 16 or info["planes"] != 1:
        raise ValueError(f"{path}: expected a 16-bit single-channel PNG, got "
                         f"{info['bitdepth']}-bit with {info['planes']} channel(s)")
    stored = np.vstack([np.asarray(r, dtype=np.uint16) for r in rows]).reshape(height, width)
    return stored.astype(np.float64) / DEPTH_SCALE


def encode_depth(depth):
    depth = np.asarray(depth, dtype=np.float64)
    ok = np.isfinite(depth) & (depth > 0)
    stored = np.rint(np.where(ok, depth, 0.0) * DEPTH_SCALE)
    return np.clip(stored, 0, 65535).astype(np.uint16)


def write_depth_png(depth, path):
    stored = encode_depth(depth)
    h, w = stored.shape
    with open(path, "wb") as fh:
        png.Writer(w, h, greyscale=True, bitdepth=16).write(fh, stored.tolist())


def read_image_png(path):
    """(3, h, w) float array in [0, 1]; alpha, if present, is dropped."""
    width, height, rows, info = png.Reader(filename=str(path)).read()
    planes = info["planes"]
    if info["bitdepth"] != 8 or planes not in (3, 4):
        raise ValueError(f"{path}: expected an 8-bit RGB PNG, got {info['bitdepth']}-bit with {planes} channel(s)")
    arr = np.vstack([np.asarray(r, dtype=np.uint8) for r in rows]).reshape(height, width, planes)
    return np.ascontiguousarray(arr[:, :, :3].transpose(2, 0, 1)).astype(np.float64) / 255.0


def write_image_png(image, path):
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    c, h, w = img.shape
    with open(path, "wb") as fh:
        png.Writer(w, h, greyscale=False, bitdepth=8).write(fh, img.transpose(1, 2, 0).reshape(h, w * c).tolist())
