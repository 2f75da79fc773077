"""Synthetic two-group negative-binomial counts for demos and tests."""
from __future__ import annotations

import numpy as np

from .data import CountMatrix


def simulate_two_group_counts(n_markers: int = 200, n_per_group: int = 60, n_shifted: int = 30,
                              fold_change: float = 4.0, dispersion: float = 0.1,
                              mean_range=(20.0, 2000.0), seed: int = 0) -> CountMatrix:
    """Two groups ("A", "B") of negative-binomial samples.

    Baseline marker means are log-uniform over ``mean_range``. The first
    ``n_shifted`` markers are scaled by ``fold_change`` in group B, half of
    them up and half down. Variance is ``mu + dispersion * mu**2``.
    """
    rng = np.random.default_rng(seed)
    lo, hi = np.log(mean_range[0]), np.log(mean_range[1])
    base = np.exp(rng.uniform(lo, hi, n_markers))
    shift = np.ones(n_markers)
    up = n_shifted - n_shifted // 2
    shift[:up] = fold_change
    shift[up:n_shifted] = 1.0 / fold_change
    means = np.column_stack([base, base * shift])
    size = 1.0 / dispersion
    cols, ids, groups = [], [], {}
    for g, label in enumerate(("A", "B")):
        mu = means[:, g][:, None]
        x = rng.negative_binomial(size, size / (size + mu), size=(n_markers, n_per_group))
        cols.append(x)
        for j in range(n_per_group):
            sid = f"{label}{j + 1:03d}"
            ids.append(sid)
            groups[sid] = label
    marker_ids = [f"m{i + 1:04d}" for i in range(n_markers)]
    return CountMatrix(marker_ids, ids, np.hstack(cols).astype(float), groups=groups)
