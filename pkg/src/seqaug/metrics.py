"""Fidelity metrics comparing generated count data against reference data."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.special import comb
from statsmodels.nonparametric.smoothers_lowess import lowess

from .data import LOG2P1, RAW, CountMatrix, ValidationError, as_log2p1, concat_samples, inverse_log2p1

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SummaryStats:
    mean: np.ndarray
    sd: np.ndarray
    sparsity: np.ndarray


def _raw_counts(m: CountMatrix) -> np.ndarray:
    return m.counts if m.scale == RAW else inverse_log2p1(m).counts


def marker_summary(m: CountMatrix) -> SummaryStats:
    """Per-marker mean and SD of log2(count + 1), and the fraction of zero counts."""
    if m.n_samples < 2:
        raise ValidationError("marker summaries need at least two samples")
    logc = as_log2p1(m).counts
    zeros = (m.counts == 0) if m.scale == RAW else (logc == 0)
    return SummaryStats(logc.mean(axis=1), logc.std(axis=1, ddof=1), zeros.mean(axis=1))


def mad_paired(a, b) -> float:
    """Median over markers of |a - b|."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.shape} vs {b.shape}")
    return float(np.median(np.abs(a - b)))


def pct_zero_markers(m: CountMatrix) -> float:
    """Share of markers with a nonzero count somewhere, i.e. 1 - Pct(0-markers)."""
    all_zero = np.all(_raw_counts(m) == 0, axis=1)
    return 1.0 - float(all_zero.mean())


def _regularized_precision(cov: np.ndarray) -> np.ndarray:
    p = cov.shape[0]
    if np.linalg.cond(cov) > 1e12:
        cov = cov + 1e-6 * np.trace(cov) / p * np.eye(p)
    return np.linalg.inv(cov)


def partial_correlation_table(m: CountMatrix, clusters: Mapping[str, Sequence[str]]) -> dict:
    """{(cluster, marker_i, marker_j): PCC} in (cluster id, i < j) order.

    Clusters with fewer than two markers present, or containing a constant
    marker, are skipped with a warning.
    """
    logm = as_log2p1(m)
    if logm.n_samples <= 2:
        raise ValidationError("partial correlations need more than two samples")
    pos = {mid: i for i, mid in enumerate(logm.marker_ids)}
    table = {}
    for cid in sorted(clusters):
        members = [mk for mk in clusters[cid] if mk in pos]
        if len(members) < 2:
            logger.warning("cluster %s has fewer than two markers present; skipped", cid)
            continue
        data = logm.counts[[pos[mk] for mk in members]]
        if np.any(data.std(axis=1) == 0):
            logger.warning("cluster %s has a constant marker; skipped", cid)
            continue
        prec = _regularized_precision(np.cov(data))
        d = np.sqrt(np.diag(prec))
        pcc = -prec / np.outer(d, d)
        for i in range(len(members)):
            for j in range(i + 1, len(members)):
                table[(cid, members[i], members[j])] = float(pcc[i, j])
    return table


def partial_correlations(m: CountMatrix, clusters: Mapping[str, Sequence[str]]) -> np.ndarray:
    return np.array(list(partial_correlation_table(m, clusters).values()))


def ccc(x, y) -> float:
    """Lin's concordance correlation coefficient with 1/n moments."""
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("ccc needs two equal-length vectors of length >= 2")
    mx, my = x.mean(), y.mean()
    vx, vy = np.mean((x - mx) ** 2), np.mean((y - my) ** 2)
    denom = vx + vy + (mx - my) ** 2
    if denom == 0:
        raise ValueError("ccc is undefined for two identical constant vectors")
    return float(2 * np.mean((x - mx) * (y - my)) / denom)


def adjusted_rand_index(labels_a, labels_b) -> float:
    """Hubert-Arabie ARI from the contingency table."""
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape:
        raise ValueError("label vectors differ in length")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    n = a.size
    sum_ij = comb(table, 2).sum()
    sum_a = comb(table.sum(axis=1), 2).sum()
    sum_b = comb(table.sum(axis=0), 2).sum()
    expected = sum_a * sum_b / comb(n, 2)
    max_index = 0.5 * (sum_a + sum_b)
    if max_index == expected:
        return 1.0
    return float((sum_ij - expected) / (max_index - expected))


def ward_clusters(x: np.ndarray, k: int = 2) -> np.ndarray:
    """Ward (minimum variance, Euclidean) clustering of the rows of ``x``, cut at k."""
    if x.shape[0] < k:
        raise ValidationError(f"{x.shape[0]} samples cannot form {k} clusters")
    return fcluster(linkage(x, method="ward", metric="euclidean"), k, criterion="maxclust")


def ward_cluster_ari(combined: CountMatrix, truth_labels, k_clusters: int = 2) -> tuple[float, float]:
    """(ARI, 1 - ARI) between Ward clusters of the samples and ``truth_labels``."""
    pred = ward_clusters(as_log2p1(combined).counts.T, k_clusters)
    ari = adjusted_rand_index(truth_labels, pred)
    return ari, 1.0 - ari


@dataclass(frozen=True)
class DEResult:
    marker_ids: tuple
    p_value: np.ndarray
    log2fc: np.ndarray
    weights: np.ndarray


def _two_group_fit(y, w, in_b):
    """Weighted two-group means: coefficient, its SE, and residual variance."""
    wa = np.where(in_b, 0.0, w).sum(axis=1)
    wb = np.where(in_b, w, 0.0).sum(axis=1)
    mean_a = np.where(in_b, 0.0, w * y).sum(axis=1) / wa
    mean_b = np.where(in_b, w * y, 0.0).sum(axis=1) / wb
    fitted = np.where(in_b, mean_b[:, None], mean_a[:, None])
    df = y.shape[1] - 2
    sigma2 = np.sum(w * (y - fitted) ** 2, axis=1) / df
    se = np.sqrt(sigma2 * (1 / wa + 1 / wb))
    return mean_b - mean_a, se, sigma2, fitted


def de_voom_lite(m: CountMatrix, groups: Sequence[str] | None = None, span: float = 0.5) -> DEResult:
    """Two-group differential expression with voom precision weights.

    Ordinary weighted t-tests (no empirical-Bayes moderation). The fold change
    is second level minus first level in sorted label order.
    """
    counts = _raw_counts(m)
    labels = np.asarray(groups if groups is not None else m.labels)
    if labels is None or labels.size != m.n_samples:
        raise ValidationError("de_voom_lite needs one group label per sample")
    levels = sorted(set(labels.tolist()))
    if len(levels) != 2:
        raise ValidationError(f"need exactly two groups, got {levels}")
    in_b = np.broadcast_to(labels == levels[1], counts.shape)
    if min((labels == g).sum() for g in levels) < 2:
        raise ValidationError("each group needs at least two samples")
    lib = counts.sum(axis=0)
    y = np.log2((counts + 0.5) / (lib + 1.0)[None, :] * 1e6)

    _, _, sigma2, fitted = _two_group_fit(y, np.ones_like(y), in_b)
    log_lib = np.log2(lib + 1.0) - np.log2(1e6)
    sx = y.mean(axis=1) + log_lib.mean()
    sy = np.sqrt(np.sqrt(sigma2))
    trend = lowess(sy, sx, frac=span, it=3, return_sorted=True)
    xs, ys = trend[:, 0], trend[:, 1]
    fitted_count = fitted + log_lib[None, :]
    pred = np.interp(fitted_count, xs, ys)
    weights = np.maximum(pred, 1e-4) ** -4.0

    coef, se, _, _ = _two_group_fit(y, weights, in_b)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = coef / se
    p = 2 * stats.t.sf(np.abs(t), df=m.n_samples - 2)
    degenerate = ~np.isfinite(t)
    p[degenerate] = np.where(coef[degenerate] == 0, 1.0, 0.0)
    return DEResult(m.marker_ids, p, coef, weights)


def de_concordance(res_gen: DEResult, res_ref: DEResult) -> tuple[float, float]:
    """(CCC of -log10 p, CCC of log2 fold change) over matched markers."""
    if tuple(res_gen.marker_ids) != tuple(res_ref.marker_ids):
        raise ValidationError("DE results cover different markers")
    tiny = np.finfo(float).tiny
    nlp_gen = -np.log10(np.maximum(res_gen.p_value, tiny))
    nlp_ref = -np.log10(np.maximum(res_ref.p_value, tiny))
    return ccc(nlp_gen, nlp_ref), ccc(res_gen.log2fc, res_ref.log2fc)


def embed_2d(combined: CountMatrix) -> np.ndarray:
    """First two principal-component scores of the samples (N x 2)."""
    if combined.n_samples < 3:
        raise ValidationError("embedding needs at least three samples")
    x = as_log2p1(combined).counts.T
    x = x - x.mean(axis=0)
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    k = min(2, s.size)
    # fix the sign of each axis by its largest loading
    signs = np.sign(vt[np.arange(k), np.argmax(np.abs(vt[:k]), axis=1)])
    coords = np.zeros((x.shape[0], 2))
    coords[:, :k] = u[:, :k] * s[:k] * signs
    return coords


@dataclass
class EvalReport:
    mad_mean: float
    mad_sd: float
    mad_sparsity: float
    one_minus_pct_zero_markers: dict
    ari: float
    cari: float
    ccc_pcc: float | None = None
    ccc_neglog10_p: float | None = None
    ccc_log2fc: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def combine_sources(generated: CountMatrix, reference: CountMatrix) -> tuple[CountMatrix, list[str]]:
    """Log2p1 column-bind with prefixed sample IDs; also returns source labels."""
    parts, sources = [], []
    for name, m in (("generated", generated), ("reference", reference)):
        logm = as_log2p1(m)
        ids = [f"{name}:{s}" for s in logm.sample_ids]
        groups = None if logm.groups is None else dict(zip(ids, logm.labels))
        parts.append(logm.replace(sample_ids=ids, groups=groups))
        sources += [name] * logm.n_samples
    return concat_samples(*parts), sources


def evaluate(generated: CountMatrix, reference: CountMatrix,
             clusters: Mapping[str, Sequence[str]] | None = None,
             two_group: bool = False, k_clusters: int = 2) -> EvalReport:
    """All fidelity metrics of ``generated`` against ``reference``."""
    if set(generated.marker_ids) != set(reference.marker_ids):
        raise ValidationError("generated and reference data have different marker sets")
    generated = generated.reorder_markers(reference.marker_ids)
    sg, sr = marker_summary(generated), marker_summary(reference)
    report = EvalReport(
        mad_mean=mad_paired(sg.mean, sr.mean),
        mad_sd=mad_paired(sg.sd, sr.sd),
        mad_sparsity=mad_paired(sg.sparsity, sr.sparsity),
        one_minus_pct_zero_markers={"generated": pct_zero_markers(generated),
                                    "reference": pct_zero_markers(reference)},
        ari=math.nan, cari=math.nan)

    if clusters:
        tg = partial_correlation_table(generated, clusters)
        tr = partial_correlation_table(reference, clusters)
        keys = [k for k in tr if k in tg]
        if len(keys) >= 2:
            report.ccc_pcc = ccc([tg[k] for k in keys], [tr[k] for k in keys])
        else:
            logger.warning("fewer than two shared partial correlations; ccc_pcc omitted")
    elif clusters is None:
        logger.warning("no marker clusters supplied; ccc_pcc omitted")

    combined, sources = combine_sources(generated, reference)
    if two_group:
        if generated.groups is None or reference.groups is None:
            raise ValidationError("two-group evaluation needs group labels on both datasets")
        if generated.group_levels != reference.group_levels:
            raise ValidationError("generated and reference data have different groups")
        report.ari, report.cari = ward_cluster_ari(combined, combined.labels, k_clusters)
        report.ccc_neglog10_p, report.ccc_log2fc = de_concordance(
            de_voom_lite(generated), de_voom_lite(reference))
    else:
        report.ari, report.cari = ward_cluster_ari(combined, sources, k_clusters)
    return report


def write_embedding(combined: CountMatrix, sources: Sequence[str], path) -> np.ndarray:
    coords = embed_2d(combined)
    labels = combined.labels or [""] * combined.n_samples
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write("sample_id\tx\ty\tsource\tgroup\n")
        for sid, (x, y), src, grp in zip(combined.sample_ids, coords, sources, labels):
            fh.write(f"{sid}\t{x:.6g}\t{y:.6g}\t{src}\t{grp}\n")
    return coords


def load_clusters(path) -> dict[str, list[str]]:
    """Headerless ``cluster_id<TAB>marker_id`` file."""
    clusters: dict[str, list[str]] = {}
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValidationError(f"{path}: line {lineno} must have 2 fields")
            clusters.setdefault(parts[0], []).append(parts[1])
    return clusters
