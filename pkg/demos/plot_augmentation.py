"""
Training-time augmentation
==========================

Random flips, rotation, shifts, shear and zoom, resampled with nearest
neighbour and edge replication. Each draw is keyed by (seed, epoch, index),
so a run replays exactly.
"""

from pathlib import Path

import numpy as np

from emoxnet.augment import AugmentPolicy, augment_batch, apply_transform, build_transform, sample_params, sample_rng
from emoxnet.dataio import generate_synthetic_dataset
from emoxnet.imaging import image_grid, write_png

out = Path("demo_out")
out.mkdir(exist_ok=True)
img = generate_synthetic_dataset(2, seed=1).images[6]

policy = AugmentPolicy()
print(policy)

# sixteen draws for one image: first cell is the original
views = [img]
for i in range(15):
    params = sample_params(policy, sample_rng(0, 0, i))
    views.append(apply_transform(img, build_transform(params, 48, 48)))
write_png(image_grid(views, ncols=8), out / "augment_grid.png")

# batches are reproducible and independent of batch composition
batch = np.stack([img, img])
a = augment_batch(batch, policy, seed=0, epoch=3, indices=[10, 11])
b = augment_batch(batch[:1], policy, seed=0, epoch=3, indices=[10])
print("same view for index 10:", np.array_equal(a[0], b[0]))

# the identity policy changes nothing
same = augment_batch(batch, AugmentPolicy.identity(), seed=0, epoch=0, indices=[0, 1])
print("identity policy is a no-op:", np.array_equal(same, batch))
