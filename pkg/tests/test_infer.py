import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from emoxnet import infer
from emoxnet.augment import AugmentPolicy
from emoxnet.infer import (TtaConfig, average_predictions, benchmark_latency, predict, predict_tta,
                           predict_tta_batch, tta_transforms, write_benchmark_csv)
from emoxnet.models import BackboneConfig, build_backbone_classifier

TINY = BackboneConfig("plain_conv", (4, 8), (1, 1))


@pytest.fixture(scope="module")
def model():
    return build_backbone_classifier(TINY, head_hidden=8, seed=0).eval()


def test_identity_policy_tta_is_single_pass(model, rng):
    img = rng.random((48, 48, 3)).astype(np.float32)
    cfg = TtaConfig(steps=10, policy=AugmentPolicy.identity())
    assert np.array_equal(predict_tta(model, img, cfg), predict(model, img))


def test_single_step_is_single_pass(model, rng):
    img = rng.random((48, 48, 3)).astype(np.float32)
    assert np.array_equal(predict_tta(model, img, TtaConfig(steps=1)), predict(model, img))


def test_two_view_average():
    np.testing.assert_allclose(average_predictions([[0.6, 0.4], [0.2, 0.8]]), [0.4, 0.6], atol=1e-15)


def test_stubbed_model_views_are_averaged(monkeypatch, rng):
    outputs = iter([np.array([[0.6, 0.4]]), np.array([[0.2, 0.8]])])
    monkeypatch.setattr(infer, "forward_ensemble", lambda m, x: next(outputs))
    out = predict_tta(None, rng.random((48, 48, 3)), TtaConfig(steps=2, policy=AugmentPolicy(vflip=False)))
    np.testing.assert_allclose(out, [0.4, 0.6], atol=1e-15)


@settings(max_examples=50)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_average_is_convex_and_order_free(n, seed):
    r = np.random.default_rng(seed)
    p = r.dirichlet(np.ones(7), size=n)
    avg = average_predictions(p)
    assert (avg >= p.min(axis=0) - 1e-12).all() and (avg <= p.max(axis=0) + 1e-12).all()
    np.testing.assert_allclose(avg.sum(), 1.0, atol=1e-12)
    np.testing.assert_allclose(average_predictions(p[r.permutation(n)]), avg, atol=1e-14)
    np.testing.assert_allclose(avg, p.mean(axis=0), atol=1e-14)


def test_transforms_are_deterministic():
    cfg = TtaConfig(steps=5, seed=3)
    a, b = tta_transforms(cfg), tta_transforms(cfg)
    assert a[0].is_identity()
    assert all(np.array_equal(x.matrix, y.matrix) for x, y in zip(a, b))
    assert len(a) == 5


def test_tta_rows_are_distributions(model, rng):
    probs = predict_tta_batch(model, rng.random((3, 48, 48, 3)), TtaConfig(steps=4))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_shape_checks(model):
    with pytest.raises(ValueError, match="48, 48, 3"):
        predict(model, np.zeros((48, 48)))
    with pytest.raises(ValueError):
        TtaConfig(steps=0)


def test_benchmark(model, tmp_path):
    rep = benchmark_latency(model, n_warmup=1, n_runs=10, name="tiny")
    assert rep.n_runs == 10 and 0 < rep.median_ms <= rep.p95_ms
    with pytest.raises(ValueError):
        benchmark_latency(model, n_runs=5)
    lines = write_benchmark_csv([rep], tmp_path / "b.csv").read_text().splitlines()
    assert lines[0] == "model,params,median_ms,p95_ms,host"
    assert lines[1].startswith("tiny,")
