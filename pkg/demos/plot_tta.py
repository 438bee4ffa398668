"""
Test-time augmentation
======================

Predictions are averaged over the unmodified image and ``steps - 1``
augmented views. With the identity policy the average equals the
single-pass output exactly.
"""

import numpy as np

from emoxnet.augment import AugmentPolicy
from emoxnet.dataio import generate_synthetic_dataset
from emoxnet.infer import TtaConfig, predict, predict_tta, tta_transforms
from emoxnet.models import DEFAULT_BACKBONES, build_backbone_classifier
from emoxnet.train import TrainConfig, run_training

ds = generate_synthetic_dataset(40, seed=0)
model = build_backbone_classifier(DEFAULT_BACKBONES["plain_conv"], seed=0)
run_training(model, ds, TrainConfig(epochs=4, batch_size=32, decay=1e-3))

img = ds.split("test").images[0]
np.set_printoptions(precision=4, suppress=True)
print("single pass :", predict(model, img))
print("TTA x10     :", predict_tta(model, img, TtaConfig(steps=10)))

# the view list always starts with the identity
print("first view is identity:", tta_transforms(TtaConfig(steps=10))[0].is_identity())
same = predict_tta(model, img, TtaConfig(steps=10, policy=AugmentPolicy.identity()))
print("identity policy equals single pass:", np.array_equal(same, predict(model, img)))
