"""
Class activation heatmaps
=========================

Gradient-weighted activation maps: per-channel weights are the spatially
averaged gradients of the class logit at each backbone's last feature map.
The map is rectified, upsampled to 48x48, normalised to [0, 1] and laid over
the grey image.
"""

from pathlib import Path

import numpy as np

from emoxnet.dataio import generate_synthetic_dataset
from emoxnet.explain import grad_cam, overlay
from emoxnet.imaging import image_grid, write_png
from emoxnet.models import DEFAULT_BACKBONES, build_backbone_classifier, forward_ensemble
from emoxnet.train import TrainConfig, run_training

out = Path("demo_out")
out.mkdir(exist_ok=True)
ds = generate_synthetic_dataset(150, seed=0)
model = build_backbone_classifier(DEFAULT_BACKBONES["plain_conv"], seed=0)
run_training(model, ds, TrainConfig(lr0=0.02, epochs=12, batch_size=32, decay=1e-3))

test = ds.split("test")
pred = forward_ensemble(model, test.images).argmax(axis=1)
tiles = []
for k in range(7):
    i = int(np.flatnonzero(test.class_indices() == k)[0])
    heat = grad_cam(model, test.images[i], int(pred[i]))
    inside = heat[test.masks[i]].sum() / max(heat.sum(), 1e-12)
    print(f"class {k}: predicted {pred[i]}, heat mass in bar region {inside:.2f}")
    tiles += [test.images[i], overlay(test.images[i], heat)]
write_png(image_grid(tiles, ncols=2), out / "cam_grid.png")
