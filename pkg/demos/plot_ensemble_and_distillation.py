"""
Ensemble fusion and distillation
================================

Four backbone kinds are trained separately, fused under one MLP head on
their concatenated pooled features, and the fused model then teaches a
small student through label-smoothed soft targets.

Kept short: a small corpus and a few epochs, so numbers are rough.
"""

from emoxnet.dataio import generate_synthetic_dataset
from emoxnet.evaluation import evaluate, render_report
from emoxnet.infer import benchmark_latency
from emoxnet.models import BACKBONE_KINDS, DEFAULT_BACKBONES, build_backbone_classifier, count_parameters
from emoxnet.train import TrainConfig, distill, run_training, train_ensemble

ds = generate_synthetic_dataset(150, seed=0)
test = ds.split("test")
cfg = TrainConfig(lr0=0.02, epochs=8, batch_size=32, decay=1e-3, plateau_patience=3, early_stop_patience=6)

# 1. one classifier per backbone kind
members, reports = [], []
for kind in BACKBONE_KINDS:
    model = build_backbone_classifier(DEFAULT_BACKBONES[kind], seed=0)
    result = run_training(model, ds, cfg)
    members.append(model)
    reports.append(evaluate(model, test))
    print(f"{kind:12s} {count_parameters(model):7d} params  best val {result.best_value:.3f}")

# 2. frozen backbones, new head on the 4-way concatenation
ensemble, _ = train_ensemble(members, ds, cfg)
reports.append(evaluate(ensemble, test))
print("ensemble head input:", ensemble.head_input_dim, "features")

# 3. the student learns from the ensemble's smoothed softmax outputs
student, _ = distill(ensemble, ds, cfg.replace(epochs=20))
reports.append(evaluate(student, test))
print("student / teacher parameters: %.3f" % (count_parameters(student) / count_parameters(ensemble)))

for r in reports:
    print(f"{r.model:12s} test accuracy {r.accuracy:.3f}")
render_report(reports, "demo_out/reports")

for model in (ensemble, student):
    lat = benchmark_latency(model, n_runs=30)
    print(f"{lat.model}: median {lat.median_ms:.2f} ms per image")
