"""Count-matrix container, TSV I/O, log transforms, depth normalization,
marker filtering and pilot subsampling.

Matrices are stored markers x samples, the usual transcriptomics layout.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

RAW = "raw_counts"
LOG2P1 = "log2p1"
SCALES = (RAW, LOG2P1)
NORMALIZATIONS = ("none", "tc", "tmm", "uq")
MIN_MARKERS_WARN = 256


class CountsFormatError(ValueError):
    """Malformed counts or groups file."""


class ValidationError(ValueError):
    """Input violates a data invariant."""


class ScaleError(ValueError):
    """Operation applied to a matrix on the wrong scale."""


@dataclass(frozen=True, eq=False)
class CountMatrix:
    """Immutable markers x samples matrix with IDs and optional group labels."""

    marker_ids: tuple
    sample_ids: tuple
    counts: np.ndarray
    scale: str = RAW
    groups: Mapping[str, str] | None = None
    pseudocount: float = field(default=1.0, compare=False)

    def __post_init__(self):
        counts = np.array(self.counts, dtype=float, copy=True)
        if counts.ndim != 2:
            raise ValidationError("counts must be a 2-D array")
        marker_ids = tuple(str(m) for m in self.marker_ids)
        sample_ids = tuple(str(s) for s in self.sample_ids)
        if counts.shape != (len(marker_ids), len(sample_ids)):
            raise ValidationError(
                f"counts shape {counts.shape} does not match "
                f"{len(marker_ids)} markers x {len(sample_ids)} samples")
        if len(marker_ids) < 1:
            raise ValidationError("matrix needs at least one marker")
        if len(set(marker_ids)) != len(marker_ids):
            raise ValidationError("duplicate marker IDs")
        if len(set(sample_ids)) != len(sample_ids):
            raise ValidationError("duplicate sample IDs")
        if self.scale not in SCALES:
            raise ValidationError(f"unknown scale {self.scale!r}")
        if not np.all(np.isfinite(counts)):
            raise ValidationError("counts contain non-finite values")
        if counts.size and counts.min() < 0:
            raise ValidationError("counts must be non-negative")
        groups = None
        if self.groups is not None:
            groups = {str(k): str(v) for k, v in self.groups.items()}
            missing = [s for s in sample_ids if s not in groups]
            if missing:
                raise ValidationError(f"samples without group label: {missing[:5]}")
            groups = {s: groups[s] for s in sample_ids}
        if not self.pseudocount > 0:
            raise ValidationError("pseudocount must be positive")
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "marker_ids", marker_ids)
        object.__setattr__(self, "sample_ids", sample_ids)
        object.__setattr__(self, "groups", groups)

    def __eq__(self, other):
        if not isinstance(other, CountMatrix):
            return NotImplemented
        return (self.marker_ids == other.marker_ids and self.sample_ids == other.sample_ids
                and self.scale == other.scale and self.groups == other.groups
                and np.array_equal(self.counts, other.counts))

    __hash__ = None

    @property
    def n_markers(self) -> int:
        return self.counts.shape[0]

    @property
    def n_samples(self) -> int:
        return self.counts.shape[1]

    @property
    def labels(self) -> list[str] | None:
        """Group label per sample, in column order."""
        if self.groups is None:
            return None
        return [self.groups[s] for s in self.sample_ids]

    @property
    def group_levels(self) -> list[str]:
        return sorted(set(self.groups.values())) if self.groups else []

    def replace(self, **changes) -> "CountMatrix":
        kwargs = dict(marker_ids=self.marker_ids, sample_ids=self.sample_ids,
                      counts=self.counts, scale=self.scale, groups=self.groups,
                      pseudocount=self.pseudocount)
        kwargs.update(changes)
        return CountMatrix(**kwargs)

    def take_markers(self, index) -> "CountMatrix":
        index = np.asarray(index)
        return self.replace(marker_ids=[self.marker_ids[i] for i in np.flatnonzero(index)]
                            if index.dtype == bool else [self.marker_ids[i] for i in index],
                            counts=self.counts[index])

    def take_samples(self, index) -> "CountMatrix":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        ids = [self.sample_ids[i] for i in index]
        groups = None if self.groups is None else {s: self.groups[s] for s in ids}
        return self.replace(sample_ids=ids, counts=self.counts[:, index], groups=groups)

    def reorder_markers(self, marker_ids: Sequence[str]) -> "CountMatrix":
        pos = {m: i for i, m in enumerate(self.marker_ids)}
        try:
            index = [pos[m] for m in marker_ids]
        except KeyError as exc:
            raise ValidationError(f"unknown marker {exc.args[0]!r}") from None
        return self.take_markers(index)

    def fingerprint(self) -> str:
        """SHA-256 over IDs, scale, groups and the raw float64 bytes."""
        h = hashlib.sha256()
        h.update("\t".join(self.marker_ids).encode())
        h.update(b"\n")
        h.update("\t".join(self.sample_ids).encode())
        h.update(b"\n" + self.scale.encode() + b"\n")
        if self.groups:
            h.update("\t".join(self.labels).encode())
        h.update(np.ascontiguousarray(self.counts, dtype="<f8").tobytes())
        return h.hexdigest()


def concat_samples(*mats: CountMatrix) -> CountMatrix:
    """Column-bind matrices sharing marker order and scale."""
    first = mats[0]
    for m in mats[1:]:
        if m.marker_ids != first.marker_ids:
            raise ValidationError("marker sets differ")
        if m.scale != first.scale:
            raise ScaleError("cannot concatenate matrices on different scales")
    has_groups = all(m.groups is not None for m in mats)
    groups = {}
    if has_groups:
        for m in mats:
            groups.update(m.groups)
    return first.replace(
        sample_ids=[s for m in mats for s in m.sample_ids],
        counts=np.hstack([m.counts for m in mats]),
        groups=groups if has_groups else None)


# --------------------------------------------------------------------- I/O

def _format_value(v: float) -> str:
    if float(v).is_integer():
        return str(int(v))
    return f"{v:.6g}"


def load_counts(path, groups_path=None) -> CountMatrix:
    """Read a markers x samples TSV of raw counts.

    The header row is ``marker_id<TAB>s1<TAB>s2...``; each following row holds
    one marker ID and its counts. ``groups_path`` is an optional headerless
    ``sample_id<TAB>group`` file.
    """
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        lines = [ln.rstrip("\r\n") for ln in fh]
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise CountsFormatError(f"{path}: empty file")
    header = lines[0].split("\t")
    sample_ids = header[1:]
    if not sample_ids:
        raise CountsFormatError(f"{path}: header has no sample columns")
    marker_ids, rows = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        if len(parts) != len(header):
            raise CountsFormatError(
                f"{path}: line {lineno} has {len(parts)} fields, expected {len(header)}")
        try:
            rows.append([float(x) for x in parts[1:]])
        except ValueError:
            raise CountsFormatError(f"{path}: line {lineno} has a non-numeric cell") from None
        marker_ids.append(parts[0])
    if not rows:
        raise CountsFormatError(f"{path}: no marker rows")
    groups = load_groups(groups_path, sample_ids) if groups_path is not None else None
    return CountMatrix(marker_ids, sample_ids, np.array(rows), RAW, groups)


def load_groups(path, sample_ids: Sequence[str] | None = None) -> dict[str, str]:
    groups = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise CountsFormatError(f"{path}: line {lineno} must have 2 fields")
            if parts[0] in groups:
                raise ValidationError(f"{path}: duplicate sample {parts[0]!r}")
            groups[parts[0]] = parts[1]
    if sample_ids is not None:
        unknown = sorted(set(groups) - set(sample_ids))
        if unknown:
            raise ValidationError(f"groups file references unknown samples: {unknown[:5]}")
        missing = [s for s in sample_ids if s not in groups]
        if missing:
            raise ValidationError(f"groups file misses samples: {missing[:5]}")
    return groups


def write_counts(m: CountMatrix, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("\t".join(["marker_id", *m.sample_ids]) + "\n")
        for mid, row in zip(m.marker_ids, m.counts):
            fh.write("\t".join([mid, *map(_format_value, row)]) + "\n")


def write_groups(m: CountMatrix, path) -> None:
    if m.groups is None:
        raise ValidationError("matrix has no group labels")
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for s in m.sample_ids:
            fh.write(f"{s}\t{m.groups[s]}\n")


# -------------------------------------------------------------- transforms

def log2p1(m: CountMatrix) -> CountMatrix:
    """x -> log2(x + pseudocount). No per-marker standardization."""
    if m.scale != RAW:
        raise ScaleError(f"log2p1 expects raw counts, got {m.scale}")
    return m.replace(counts=np.log2(m.counts + m.pseudocount), scale=LOG2P1)


def counts_from_log2p1(values, pseudocount: float = 1.0) -> np.ndarray:
    """round(max(0, 2^x - pseudocount)) elementwise; works on negative inputs too."""
    return np.round(np.maximum(0.0, np.exp2(np.asarray(values, dtype=float)) - pseudocount))


def inverse_log2p1(m: CountMatrix) -> CountMatrix:
    """Back to integer counts."""
    if m.scale != LOG2P1:
        raise ScaleError(f"inverse_log2p1 expects log2p1 data, got {m.scale}")
    return m.replace(counts=counts_from_log2p1(m.counts, m.pseudocount), scale=RAW)


def as_log2p1(m: CountMatrix) -> CountMatrix:
    return m if m.scale == LOG2P1 else log2p1(m)


def upper_quartiles(counts: np.ndarray) -> np.ndarray:
    """75th percentile (linear interpolation) of each column's nonzero counts."""
    out = np.empty(counts.shape[1])
    for j in range(counts.shape[1]):
        nz = counts[counts[:, j] > 0, j]
        if nz.size == 0:
            raise ValidationError(f"sample {j} has no nonzero counts")
        out[j] = np.percentile(nz, 75)
    return out


def _tmm_factor(obs, ref, lib_obs, lib_ref, logratio_trim=0.3, sum_trim=0.05):
    both = (obs > 0) & (ref > 0)
    obs, ref = obs[both], ref[both]
    if obs.size == 0:
        return 1.0
    p_obs, p_ref = obs / lib_obs, ref / lib_ref
    log_r = np.log2(p_obs / p_ref)
    abs_e = 0.5 * (np.log2(p_obs) + np.log2(p_ref))
    var = (lib_obs - obs) / lib_obs / obs + (lib_ref - ref) / lib_ref / ref
    if np.max(np.abs(log_r)) < 1e-6:
        return 1.0
    n = log_r.size
    lo_l = math.floor(n * logratio_trim) + 1
    hi_l = n + 1 - lo_l
    lo_s = math.floor(n * sum_trim) + 1
    hi_s = n + 1 - lo_s
    rank_r = rankdata(log_r)
    rank_e = rankdata(abs_e)
    keep = (rank_r >= lo_l) & (rank_r <= hi_l) & (rank_e >= lo_s) & (rank_e <= hi_s)
    # var is 0 for a marker holding the whole library; such markers carry no spread
    keep &= var > 0
    if not keep.any():
        return 1.0
    return float(2.0 ** (np.sum(log_r[keep] / var[keep]) / np.sum(1.0 / var[keep])))


def tmm_factors(counts: np.ndarray) -> np.ndarray:
    """Robinson-Oshlack TMM factors rescaled to geometric mean 1."""
    lib = counts.sum(axis=0)
    if np.any(lib <= 0):
        raise ValidationError("TMM needs positive library sizes")
    f75 = upper_quartiles(counts) / lib
    ref = int(np.argmin(np.abs(f75 - f75.mean())))
    f = np.array([_tmm_factor(counts[:, j], counts[:, ref], lib[j], lib[ref])
                  for j in range(counts.shape[1])])
    return f / np.exp(np.mean(np.log(f)))


def normalize(m: CountMatrix, method: str = "tc") -> CountMatrix:
    """Per-sample depth normalization of raw counts (tc, uq, tmm or none)."""
    if m.scale != RAW:
        raise ScaleError("normalize expects raw counts")
    if method not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization {method!r}")
    if method == "none":
        return m
    x = m.counts
    lib = x.sum(axis=0)
    if np.any(lib <= 0):
        bad = [m.sample_ids[j] for j in np.flatnonzero(lib <= 0)]
        raise ValidationError(f"samples with zero library size: {bad[:5]}")
    if method == "tc":
        scale = lib.mean() / lib
    elif method == "uq":
        uq = upper_quartiles(x)
        scale = uq.mean() / uq
    else:
        scale = lib.mean() / (lib * tmm_factors(x))
    return m.replace(counts=x * scale[None, :])


@dataclass(frozen=True)
class PreprocessConfig:
    normalization: str = "none"
    mean_threshold: float | None = None
    sd_threshold: float | None = None
    pseudocount: float = 1.0

    def __post_init__(self):
        if self.normalization not in NORMALIZATIONS:
            raise ValidationError(f"unknown normalization {self.normalization!r}")
        if not self.pseudocount > 0:
            raise ValidationError("pseudocount must be positive")
        for t in (self.mean_threshold, self.sd_threshold):
            if t is not None and not math.isfinite(t):
                raise ValidationError("thresholds must be finite")


def filter_markers(m: CountMatrix, cfg: PreprocessConfig) -> CountMatrix:
    """Keep markers whose log2p1 mean (and optionally SD) reach the thresholds."""
    logm = as_log2p1(m.replace(pseudocount=cfg.pseudocount) if m.scale == RAW else m)
    keep = np.ones(m.n_markers, dtype=bool)
    if cfg.mean_threshold is not None:
        keep &= logm.counts.mean(axis=1) >= cfg.mean_threshold
    if cfg.sd_threshold is not None:
        if m.n_samples < 2:
            raise ValidationError("SD filtering needs at least two samples")
        keep &= logm.counts.std(axis=1, ddof=1) >= cfg.sd_threshold
    if not keep.any():
        raise ValidationError("no markers pass the filter")
    if keep.sum() < MIN_MARKERS_WARN:
        logger.warning("only %d markers remain after filtering (< %d)",
                       int(keep.sum()), MIN_MARKERS_WARN)
    return m.take_markers(keep)


def preprocess(m: CountMatrix, cfg: PreprocessConfig) -> CountMatrix:
    return filter_markers(normalize(m, cfg.normalization), cfg)


def subsample_pilot(m: CountMatrix, n_per_group: int, seed: int) -> CountMatrix:
    """Draw samples without replacement, stratified by group when labelled."""
    rng = np.random.default_rng(seed)
    if m.groups is None:
        strata = {None: np.arange(m.n_samples)}
    else:
        labels = np.array(m.labels)
        strata = {g: np.flatnonzero(labels == g) for g in m.group_levels}
    chosen = []
    for g, idx in strata.items():
        if n_per_group > idx.size:
            where = "samples" if g is None else f"samples in group {g!r}"
            raise ValidationError(f"requested {n_per_group} but only {idx.size} {where}")
        if n_per_group < 1:
            raise ValidationError("n_per_group must be positive")
        chosen.append(rng.choice(idx, size=n_per_group, replace=False))
    return m.take_samples(np.sort(np.concatenate(chosen)))
