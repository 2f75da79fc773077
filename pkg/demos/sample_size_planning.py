"""How many samples per group does a classifier need?

Trains a MAF flow on a noisy two-group pilot, measures KNN accuracy on
generated datasets of growing size, fits the inverse power law and asks for
the size that reaches a target accuracy.
"""
import math

import numpy as np
import torch

from seqaug.curve import (HarnessConfig, InfeasibleTargetError, accuracy_harness, fit_iplf, predict_with_interval,
                          project_sample_size)
from seqaug.data import log2p1, subsample_pilot
from seqaug.flows import FlowConfig
from seqaug.simulate import simulate_two_group_counts
from seqaug.training import TrainingPolicy, fit_generator

torch.set_num_threads(1)

# weak signal: 1.5-fold shifts on 20 of 150 markers, so accuracy has room to grow
data = simulate_two_group_counts(n_markers=150, n_per_group=80, n_shifted=20, fold_change=1.5,
                                 dispersion=0.3, seed=3)
pilot = log2p1(subsample_pilot(data, 40, seed=3))

cfg = FlowConfig(variant="maf", hidden_width=128, n_blocks=3, conditional=True).to_dict()
gen = fit_generator(pilot, "maf", cfg, TrainingPolicy(epochs=60, seed=3))

harness = accuracy_harness(gen, HarnessConfig(sizes=tuple(range(10, 101, 10)), repeats=10), seed=3)
for n, acc in zip(harness.sizes, harness.mean_accuracy):
    print(f"n={n:4d}  accuracy {acc:.3f}")

fit = fit_iplf(harness.sizes, harness.mean_accuracy)
p = fit.params
print(f"\nfitted: accuracy(n) = {1 - p.a:.3f} - {p.b:.3f} * n^{p.c:.3f}")
for n in (50, 150, 300):
    y, lo, hi = predict_with_interval(fit, n)
    print(f"  n={n}: {y:.3f}  [{lo:.3f}, {hi:.3f}]")

for target in (0.8, 0.9, 0.99):
    try:
        print(f"target {target}: {project_sample_size(fit, target)} per group")
    except InfeasibleTargetError as exc:
        print(f"target {target}: {exc}")

if math.isfinite(fit.residual_scale):
    print(f"\nresidual SD of the fit: {np.sqrt(fit.residual_scale):.4f}")
