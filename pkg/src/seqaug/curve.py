"""Learning curves: classifier accuracy over candidate sample sizes, weighted
inverse-power-law fitting, prediction intervals and sample-size projection."""
from __future__ import annotations

import hashlib
import importlib
import itertools
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import optimize, stats

from .data import CountMatrix, ValidationError, as_log2p1, subsample_pilot
from .training import TrainedGenerator

logger = logging.getLogger(__name__)

A_BOUNDS = (0.0, 1.0)
B_BOUNDS = (0.0, np.inf)
C_BOUNDS = (-1.0, 0.0)
START_A = (0.01, 0.1)
START_B = (0.5, 1.0)
START_C = (-0.3, -0.7)


class InfeasibleTargetError(ValueError):
    """Requested accuracy cannot be reached by the fitted curve."""


@dataclass(frozen=True)
class IplfParams:
    a: float
    b: float
    c: float

    def __post_init__(self):
        if not (A_BOUNDS[0] <= self.a <= A_BOUNDS[1] and self.b >= 0 and C_BOUNDS[0] <= self.c <= C_BOUNDS[1]):
            raise ValidationError(f"parameters outside a in [0,1], b >= 0, c in [-1,0]: {self}")

    @property
    def asymptote(self) -> float:
        return 1.0 - self.a

    def as_array(self) -> np.ndarray:
        return np.array([self.a, self.b, self.c])


def _curve(theta, n):
    a, b, c = theta
    return (1.0 - a) - b * np.power(n, c)


def _curve_grad(theta, n):
    """d accuracy / d(a, b, c), one row per size."""
    _, b, c = theta
    n = np.asarray(n, dtype=float)
    pw = np.power(n, c)
    return np.column_stack([-np.ones_like(n), -pw, -b * pw * np.log(n)])


def iplf_eval(p: IplfParams, n):
    """Accuracy (1 - a) - b * n^c."""
    n_arr = np.asarray(n, dtype=float)
    if np.any(n_arr <= 0):
        raise ValueError("sample size must be positive")
    out = _curve(p.as_array(), n_arr)
    return float(out) if out.ndim == 0 else out


def iplf_weights(m: int) -> np.ndarray:
    return np.arange(1, m + 1) / m


def iplf_objective(p: IplfParams, sizes, accuracies, weights=None) -> float:
    """Weighted residual sum of squares, weights i/m by default."""
    y = np.asarray(accuracies, dtype=float)
    w = iplf_weights(y.size) if weights is None else np.asarray(weights, dtype=float)
    return float(np.sum(w * (y - _curve(p.as_array(), np.asarray(sizes, dtype=float))) ** 2))


@dataclass
class IplfFit:
    params: IplfParams
    covariance: np.ndarray
    residual_scale: float
    sizes: np.ndarray
    accuracies: np.ndarray
    repeats: np.ndarray | None = None
    objective: float = 0.0
    degenerate: bool = False
    starts: list = field(default_factory=list)

    @property
    def m(self) -> int:
        return len(self.sizes)


def fit_iplf(sizes, accuracies, repeats=None, weights=None) -> IplfFit:
    """Box-constrained weighted least squares fit of the inverse power law.

    Runs a bounded trust-region solver from every combination of the fixed
    starting values and keeps the lowest weighted objective.
    """
    n = np.asarray(sizes, dtype=float)
    y = np.asarray(accuracies, dtype=float)
    m = n.size
    if m < 3:
        raise ValidationError("need at least three candidate sizes")
    if y.shape != n.shape:
        raise ValidationError("sizes and accuracies differ in length")
    if np.any(np.diff(n) <= 0) or n[0] <= 0:
        raise ValidationError("sizes must be positive and strictly increasing")
    if np.any((y < 0) | (y > 1)):
        raise ValidationError("accuracies must lie in [0, 1]")
    w = iplf_weights(m) if weights is None else np.asarray(weights, dtype=float)
    sw = np.sqrt(w)

    def resid(theta):
        return sw * (y - _curve(theta, n))

    def jac(theta):
        return -sw[:, None] * _curve_grad(theta, n)

    lower = [A_BOUNDS[0], B_BOUNDS[0], C_BOUNDS[0]]
    upper = [A_BOUNDS[1], B_BOUNDS[1], C_BOUNDS[1]]
    best, starts = None, []
    for x0 in itertools.product(START_A, START_B, START_C):
        sol = optimize.least_squares(resid, x0, jac=jac, bounds=(lower, upper), method="trf",
                                     xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
        obj = float(np.sum(sol.fun ** 2))
        starts.append({"start": list(x0), "objective": obj})
        if best is None or obj < best[1]:
            best = (np.clip(sol.x, lower, upper), obj)
    theta, obj = best
    params = IplfParams(*map(float, theta))
    dof = m - 3
    scale = obj / dof if dof > 0 else math.nan
    jf = _curve_grad(theta, n)
    info = jf.T @ (w[:, None] * jf)
    cov = (scale if dof > 0 else 0.0) * np.linalg.pinv(info)
    degenerate = bool(np.ptp(y) == 0 or params.b < 1e-10)
    if degenerate:
        logger.warning("degenerate learning-curve fit (b at its lower bound)")
    reps = None if repeats is None else np.asarray(repeats)
    return IplfFit(params, cov, scale, n, y, reps, obj, degenerate, starts)


def predict_with_interval(fit: IplfFit, n) -> tuple[float, float, float]:
    """Point accuracy and a delta-method 95% prediction interval.

    With three or fewer sizes no residual degrees of freedom remain and the
    bounds come back as NaN.
    """
    n = float(n)
    if n <= 0:
        raise ValueError("sample size must be positive")
    y = iplf_eval(fit.params, n)
    if fit.m <= 3:
        logger.warning("prediction interval unavailable with %d candidate sizes", fit.m)
        return y, math.nan, math.nan
    g = _curve_grad(fit.params.as_array(), np.array([n]))[0]
    se = math.sqrt(max(0.0, float(g @ fit.covariance @ g) + fit.residual_scale))
    half = stats.t.ppf(0.975, fit.m - 3) * se
    return y, y - half, y + half


def _smallest_size(f: Callable[[float], float], target: float, guess: float) -> int:
    """Smallest integer n >= 1 with f(n) >= target, starting from ``guess``."""
    tol = 1e-12 * max(1.0, abs(target))
    ok = lambda k: f(k) >= target - tol  # noqa: E731
    hi = max(1, math.ceil(guess))
    if ok(hi):
        # gallop down to a failing size (or 1), then bisect; f is nondecreasing
        lo, step = hi, 1
        while lo > 1 and ok(lo):
            hi, lo = lo, max(1, lo - step)
            step *= 2
        if ok(lo):
            return lo
    else:
        lo, step = hi, 1
        while not ok(hi):
            lo, hi = hi, hi + step
            step *= 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return hi


def project_sample_size(p: IplfParams | IplfFit, target_accuracy: float) -> int:
    """Smallest sample size whose fitted accuracy reaches ``target_accuracy``."""
    if isinstance(p, IplfFit):
        p = p.params
    if target_accuracy >= p.asymptote:
        raise InfeasibleTargetError(
            f"target {target_accuracy} exceeds the asymptotic accuracy {p.asymptote:.6g}")
    if p.b == 0 or p.c == 0:
        raise InfeasibleTargetError("projection undefined: the fitted curve is flat (b = 0 or c = 0)")
    gap = p.asymptote - target_accuracy
    guess = (gap / p.b) ** (1.0 / p.c)
    if guess <= 1:
        return 1
    return _smallest_size(lambda k: iplf_eval(p, k), target_accuracy, guess)


def interval_size_hints(fit: IplfFit, target: float, n_max: float = 1e9) -> tuple[float, float]:
    """Sizes where the upper and the lower 95% bound first reach ``target``.

    Either hint is ``inf`` when the bound never reaches it below ``n_max``.
    """
    out = []
    for side in (2, 1):
        def f(k, side=side):
            return predict_with_interval(fit, k)[side]
        if not f(n_max) >= target:
            out.append(math.inf)
            continue
        lo, hi = 1, int(n_max)
        if f(lo) >= target:
            out.append(1)
            continue
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if f(mid) >= target:
                hi = mid
            else:
                lo = mid
        out.append(hi)
    return out[0], out[1]


# --------------------------------------------------------- classifiers

def knn_classify(train_x, train_y, test_x, k: int = 20) -> np.ndarray:
    """Euclidean K-nearest-neighbour majority vote.

    Ties go to the class whose tied neighbours are closest on average, then to
    the lexicographically smallest label.
    """
    train_x = np.asarray(train_x, dtype=float)
    test_x = np.asarray(test_x, dtype=float)
    train_y = np.asarray(train_y)
    if k < 1 or k > train_x.shape[0]:
        raise ValidationError(f"K={k} is invalid for {train_x.shape[0]} training samples")
    d2 = (np.sum(test_x ** 2, axis=1)[:, None] + np.sum(train_x ** 2, axis=1)[None, :]
          - 2 * test_x @ train_x.T)
    dist = np.sqrt(np.maximum(d2, 0.0))
    nearest = np.argsort(dist, axis=1, kind="stable")[:, :k]
    preds = []
    for row, idx in enumerate(nearest):
        labels = train_y[idx]
        d = dist[row, idx]
        classes, votes = np.unique(labels, return_counts=True)
        tied = classes[votes == votes.max()]
        if tied.size == 1:
            preds.append(tied[0])
            continue
        mean_d = np.array([d[labels == c].mean() for c in tied])
        cands = sorted(tied[mean_d == mean_d.min()].tolist(), key=str)
        preds.append(cands[0])
    return np.asarray(preds)


class KNNClassifier:
    """fit/predict wrapper; K shrinks to the training size when necessary."""

    def __init__(self, k: int = 20):
        self.k = k

    def fit(self, x, y):
        self._x, self._y = np.asarray(x, dtype=float), np.asarray(y)
        return self

    def predict(self, x):
        return knn_classify(self._x, self._y, x, min(self.k, self._x.shape[0]))


def make_classifier(spec: str) -> Callable[[], object]:
    """Factory for ``knn:K`` or ``py:package.module:Factory`` (fit/predict adapter)."""
    kind, _, arg = spec.partition(":")
    if kind == "knn":
        k = int(arg) if arg else 20
        return lambda: KNNClassifier(k)
    if kind == "py":
        module_name, _, attr = arg.rpartition(":")
        if not module_name:
            raise ValidationError(f"adapter spec must be py:module:factory, got {spec!r}")
        factory = getattr(importlib.import_module(module_name), attr)
        return factory
    raise ValidationError(f"unknown classifier {spec!r}")


def stratified_folds(y, folds: int, rng) -> list[np.ndarray]:
    y = np.asarray(y)
    out = [[] for _ in range(folds)]
    for cls in sorted(set(y.tolist()), key=str):
        idx = rng.permutation(np.flatnonzero(y == cls))
        if idx.size < folds:
            raise ValidationError(f"class {cls!r} has {idx.size} samples, fewer than {folds} folds")
        for j, i in enumerate(idx):
            out[j % folds].append(i)
    return [np.sort(np.array(f)) for f in out]


def cross_val_accuracy(x, y, classifier: Callable[[], object] | str = "knn:20",
                       folds: int = 5, seed: int = 0) -> float:
    """Pooled accuracy of stratified k-fold cross-validation."""
    if isinstance(classifier, str):
        classifier = make_classifier(classifier)
    x, y = np.asarray(x, dtype=float), np.asarray(y)
    if folds < 2:
        raise ValidationError("need at least two folds")
    rng = np.random.default_rng(seed)
    correct = 0
    for test in stratified_folds(y, folds, rng):
        train = np.setdiff1d(np.arange(y.size), test)
        model = classifier().fit(x[train], y[train])
        correct += int(np.sum(np.asarray(model.predict(x[test])) == y[test]))
    return correct / y.size


# ------------------------------------------------------------- harness

def child_seed(seed: int, i: int, r: int) -> int:
    """Stable per-(size, repeat) seed: first 8 bytes of SHA-256, masked to 63 bits."""
    digest = hashlib.sha256(f"{seed}:{i}:{r}".encode()).digest()
    return int.from_bytes(digest[:8], "big") & ((1 << 63) - 1)


def parse_sizes(spec: str) -> list[int]:
    """``start:stop:step`` (inclusive) or a comma list."""
    if ":" in spec:
        start, stop, step = (int(v) for v in spec.split(":"))
        if step <= 0:
            raise ValidationError("size step must be positive")
        return list(range(start, stop + 1, step))
    return [int(v) for v in spec.split(",")]


@dataclass(frozen=True)
class HarnessConfig:
    sizes: tuple
    repeats: int = 30
    folds: int = 5
    classifier: str = "knn:20"
    per_group: bool = True

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))
        if self.repeats < 1 or self.folds < 2:
            raise ValidationError("repeats >= 1 and folds >= 2 required")
        if not self.sizes or self.sizes[0] <= 0 or any(b <= a for a, b in zip(self.sizes, self.sizes[1:])):
            raise ValidationError("sizes must be positive and strictly increasing")


@dataclass
class HarnessResult:
    sizes: list
    mean_accuracy: list
    per_repeat: list
    classifier: str
    seed: int

    @property
    def repeats(self) -> list:
        return [sum(1 for r in self.per_repeat if r["size"] == s) for s in self.sizes]


def _split_counts(n: int, levels: Sequence[str], per_group: bool) -> list[int]:
    if per_group:
        return [n] * len(levels)
    base, extra = divmod(n, len(levels))
    return [base + (1 if i < extra else 0) for i in range(len(levels))]


def _draw(source, n: int, per_group: bool, seed: int) -> CountMatrix:
    if isinstance(source, TrainedGenerator):
        counts = _split_counts(n, source.group_levels, per_group)
        labels = [g for g, c in zip(source.group_levels, counts) for _ in range(c)]
        return source.generate(len(labels), labels, seed)
    if per_group:
        return subsample_pilot(source, n, seed)
    raise ValidationError("subsample mode uses per-group sizes")


def accuracy_harness(source: TrainedGenerator | CountMatrix, cfg: HarnessConfig,
                     seed: int = 0) -> HarnessResult:
    """Mean cross-validated accuracy for each candidate size.

    ``source`` is a conditional generator (fresh samples per repeat) or a
    labelled matrix (stratified subsamples per repeat).
    """
    if isinstance(source, TrainedGenerator):
        if not source.conditional:
            raise ValidationError("the harness needs a conditional generator for two-group data")
    elif source.groups is None:
        raise ValidationError("subsample mode needs group labels")
    factory = make_classifier(cfg.classifier)
    per_repeat, means = [], []
    for i, n in enumerate(cfg.sizes):
        accs = []
        for r in range(cfg.repeats):
            s = child_seed(seed, i, r)
            data = as_log2p1(_draw(source, n, cfg.per_group, s))
            acc = cross_val_accuracy(data.counts.T, np.array(data.labels), factory,
                                     cfg.folds, s)
            accs.append(acc)
            per_repeat.append({"size": n, "repeat": r, "seed": s, "accuracy": acc})
        means.append(float(np.mean(accs)))
    return HarnessResult(list(cfg.sizes), means, per_repeat, cfg.classifier, seed)


# ----------------------------------------------------------- artifacts

def curve_document(fit: IplfFit, harness: HarnessResult | None = None,
                   classifier: str | None = None, seed: int | None = None) -> dict:
    p = fit.params
    return {
        "sizes": [float(s) for s in fit.sizes],
        "mean_accuracy": [float(a) for a in fit.accuracies],
        "per_repeat": harness.per_repeat if harness else [],
        "params": {"a": p.a, "b": p.b, "c": p.c},
        "covariance": fit.covariance.tolist(),
        "residual_scale": fit.residual_scale if math.isfinite(fit.residual_scale) else None,
        "objective": fit.objective,
        "degenerate": fit.degenerate,
        "classifier": classifier if classifier is not None else (harness.classifier if harness else None),
        "seed": seed if seed is not None else (harness.seed if harness else None),
    }


def write_curve(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_curve(path) -> IplfFit:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    try:
        p = doc["params"]
        scale = doc["residual_scale"]
        return IplfFit(IplfParams(p["a"], p["b"], p["c"]), np.array(doc["covariance"], dtype=float),
                       math.nan if scale is None else float(scale),
                       np.array(doc["sizes"], dtype=float), np.array(doc["mean_accuracy"], dtype=float),
                       objective=doc.get("objective", 0.0), degenerate=doc.get("degenerate", False))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: malformed curve file ({exc})") from None


def write_curve_plot(fit: IplfFit, path, points: int = 200) -> None:
    """Fitted curve with 95% bounds on an even grid over [n_1, 2 n_m]."""
    grid = np.linspace(fit.sizes[0], 2 * fit.sizes[-1], points)
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("size\taccuracy\tlo95\thi95\n")
        for n in grid:
            y, lo, hi = predict_with_interval(fit, n)
            fh.write(f"{n:.6g}\t{y:.6g}\t{lo:.6g}\t{hi:.6g}\n")
