"""Datasets: PNG I/O, sparse sampling, augmentation and synthetic scenes."""

from kbnet.data.frames import (AugmentConfig, Frame, augment, read_dataset, remove_points,
                               shift_frame, subsample_sparse, triples, write_dataset)
from kbnet.data.pngio import read_depth_png, read_image_png, write_depth_png, write_image_png
from kbnet.data.synth import SceneSpec, covisible_mask, render, synth_dataset, synth_scene
