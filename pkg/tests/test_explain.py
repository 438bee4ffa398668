import numpy as np
import pytest
import torch
from PIL import Image
from torch import nn

from emoxnet.explain import apply_colormap, cam_from_raw, grad_cam, overlay, render_overlay
from emoxnet.models import BackboneConfig, Classifier, build_backbone_classifier


class MeanPool(nn.Module):
    """Feature map = 4x4-average-pooled grey level, one channel."""
    feature_dim = 1

    def feature_map(self, x):
        return nn.functional.avg_pool2d(x.mean(dim=1, keepdim=True), 4)

    def forward(self, x):
        fmap = self.feature_map(x)
        return fmap, fmap.mean(dim=(2, 3))


def toy_model(scale=1.0):
    model = Classifier([MeanPool()], head_hidden=0)
    with torch.no_grad():
        model.head[0].weight.copy_(torch.linspace(-1, 1, 7)[:, None] * scale)
        model.head[0].bias.zero_()
    return model.eval()


def spot_image():
    img = np.zeros((48, 48, 3), np.float32)
    img[8:16, 28:36] = 1.0
    return img


def test_zero_and_uniform_raw_maps():
    assert not cam_from_raw(np.zeros((6, 6))).any()
    assert not cam_from_raw(-np.ones((6, 6))).any()
    np.testing.assert_allclose(cam_from_raw(np.full((6, 6), 3.0)), 1.0)


def test_cam_peaks_on_driving_region():
    heat = grad_cam(toy_model(), spot_image(), 6)
    assert heat.shape == (48, 48) and heat.min() >= 0 and heat.max() <= 1
    assert heat[8:16, 28:36].max() == 1.0
    assert heat[4:20, 24:40].sum() == pytest.approx(heat.sum())
    assert heat[30:, :20].max() == 0
    # negatively weighted class: all raw values <= 0
    assert not grad_cam(toy_model(), spot_image(), 0).any()


def test_positive_scale_invariance():
    np.testing.assert_allclose(grad_cam(toy_model(3.0), spot_image(), 6), grad_cam(toy_model(), spot_image(), 6))


def test_real_model_range(rng):
    model = build_backbone_classifier(BackboneConfig("se_residual", (8, 16), (1, 1), se_ratio=4), seed=0)
    model.train()
    heat = grad_cam(model, rng.random((48, 48, 3)), 2)
    assert heat.shape == (48, 48) and 0 <= heat.min() and heat.max() <= 1
    assert model.training
    with pytest.raises(ValueError, match="class index"):
        grad_cam(model, rng.random((48, 48, 3)), 7)


def test_overlay_blend(rng):
    img = rng.random((48, 48, 3))
    gray = img.mean(axis=-1)
    np.testing.assert_array_equal(overlay(img, np.zeros((48, 48))), np.repeat(gray[..., None], 3, -1))
    heat = np.zeros((48, 48))
    heat[5, 7] = 1.0
    expected = 0.5 * gray[5, 7] + 0.5 * np.array([0.5, 0.0, 0.0])
    np.testing.assert_allclose(overlay(img, heat)[5, 7], expected)
    with pytest.raises(ValueError):
        overlay(img, np.zeros((10, 10)))


def test_colormap_endpoints():
    np.testing.assert_allclose(apply_colormap(np.array([0.0, 1.0])), [[0, 0, 0.5], [0.5, 0, 0]])


def test_render_png(tmp_path, rng):
    path = render_overlay(rng.random((48, 48, 3)), rng.random((48, 48)), tmp_path / "cam.png")
    with Image.open(path) as im:
        assert im.size == (48, 48) and im.mode == "RGB"
