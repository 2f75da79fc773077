import json
import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from seqaug.data import CountMatrix, ValidationError, log2p1
from seqaug.metrics import (DEResult, adjusted_rand_index, ccc, combine_sources, de_concordance, de_voom_lite,
                            embed_2d, evaluate, load_clusters, mad_paired, marker_summary,
                            partial_correlation_table, partial_correlations, pct_zero_markers, ward_cluster_ari,
                            write_embedding)
from seqaug.simulate import simulate_two_group_counts

from conftest import make_matrix

finite = st.floats(-1e3, 1e3, allow_nan=False)


# ------------------------------------------------------------ summaries

def test_sparsity_on_raw_counts():
    s = marker_summary(make_matrix([[0, 0], [1, 0]]))
    np.testing.assert_array_equal(s.sparsity, [1.0, 0.5])


def test_constant_marker_summary():
    s = marker_summary(make_matrix([[3, 3, 3]]))
    assert s.mean[0] == 2 and s.sd[0] == 0


def test_hand_sized_summary():
    counts = np.array([[0, 1, 3, 7], [15, 15, 0, 0], [1, 3, 0, 7]])
    s = marker_summary(make_matrix(counts))
    # log2(c + 1): rows (0,1,2,3), (4,4,0,0), (1,2,0,3)
    np.testing.assert_allclose(s.mean, [1.5, 2.0, 1.5], rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.sd, np.sqrt([5 / 3, 16 / 3, 5 / 3]), rtol=1e-14)
    np.testing.assert_array_equal(s.sparsity, [0.25, 0.5, 0.25])
    # same numbers from the log-scale view
    s2 = marker_summary(log2p1(make_matrix(counts)))
    np.testing.assert_allclose(s2.mean, s.mean)
    np.testing.assert_array_equal(s2.sparsity, s.sparsity)


def test_summary_needs_two_samples():
    with pytest.raises(ValidationError):
        marker_summary(make_matrix([[1], [2]]))


def test_mad_examples():
    assert mad_paired([1, 2, 3], [1, 2, 3]) == 0
    assert mad_paired([1, 2, 3], [2, 4, 3]) == 1
    assert mad_paired([0, 0], [1, 3]) == 2
    with pytest.raises(ValueError):
        mad_paired([1, 2], [1])


@given(arrays(np.float64, 7, elements=finite), arrays(np.float64, 7, elements=finite), finite)
def test_mad_translation_equivariant(a, b, c):
    assert mad_paired(a + c, b + c) == pytest.approx(mad_paired(a, b), abs=1e-9)


def test_pct_zero_markers_examples():
    assert pct_zero_markers(make_matrix([[0, 0], [1, 0], [2, 2], [0, 5]])) == 0.75
    assert pct_zero_markers(make_matrix([[1, 0], [0, 1]])) == 1.0
    assert pct_zero_markers(make_matrix(np.zeros((3, 2)))) == 0.0


# ----------------------------------------------------- partial correlation

def _log_matrix(x):
    return make_matrix(np.asarray(x), scale="log2p1")


def test_pair_cluster_is_pearson():
    rng = np.random.default_rng(0)
    x = rng.normal(5, 1, (2, 50))
    x[1] += 0.5 * x[0]
    pcc = partial_correlations(_log_matrix(x), {"c1": ["m1", "m2"]})
    assert pcc[0] == pytest.approx(np.corrcoef(x)[0, 1], abs=1e-12)


def test_perfectly_correlated_pair():
    x = np.array([[1.0, 2, 3, 4, 5], [3, 5, 7, 9, 11]])
    # singular covariance gets the small ridge, which moves the value off 1 by ~1e-6
    assert partial_correlations(_log_matrix(x), {"c": ["m1", "m2"]})[0] == pytest.approx(1, abs=1e-5)


def _residual_pcc(x, i, j):
    """Correlation of residuals after regressing both on the remaining rows."""
    rest = [k for k in range(x.shape[0]) if k not in (i, j)]
    design = np.column_stack([np.ones(x.shape[1])] + [x[k] for k in rest])
    res = [x[r] - design @ np.linalg.lstsq(design, x[r], rcond=None)[0] for r in (i, j)]
    return np.corrcoef(res)[0, 1]


def test_three_marker_cluster_matches_residual_oracle():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(3, 200))
    x = np.array([z[0], 0.6 * z[0] + z[1], 0.3 * z[0] - 0.5 * z[1] + z[2]]) + 5
    table = partial_correlation_table(_log_matrix(x), {"c": ["m1", "m2", "m3"]})
    assert list(table) == [("c", "m1", "m2"), ("c", "m1", "m3"), ("c", "m2", "m3")]
    for (_, a, b), value in table.items():
        oracle = _residual_pcc(x, int(a[1:]) - 1, int(b[1:]) - 1)
        assert abs(value - oracle) < 1e-10


def test_pcc_order_and_skips(caplog):
    rng = np.random.default_rng(2)
    x = rng.normal(4, 1, (5, 30))
    x[4] = 2.0
    clusters = {"b": ["m1", "m2"], "a": ["m3", "m4"], "c": ["m5", "m1"], "d": ["m2", "missing"]}
    with caplog.at_level(logging.WARNING):
        table = partial_correlation_table(_log_matrix(x), clusters)
    assert [k[0] for k in table] == ["a", "b"]
    assert "constant" in caplog.text and "fewer than two" in caplog.text


def test_pcc_invariant_to_sample_order():
    rng = np.random.default_rng(3)
    x = rng.normal(4, 1, (4, 40))
    clusters = {"c": ["m1", "m2", "m3", "m4"]}
    perm = rng.permutation(40)
    np.testing.assert_allclose(partial_correlations(_log_matrix(x), clusters),
                               partial_correlations(_log_matrix(x[:, perm]), clusters), atol=1e-12)


def test_pcc_needs_three_samples():
    with pytest.raises(ValidationError):
        partial_correlations(_log_matrix([[1.0, 2], [2, 1]]), {"c": ["m1", "m2"]})


# ------------------------------------------------------------------ CCC

def test_ccc_examples():
    assert ccc([1, 2, 3], [1, 2, 3]) == 1
    assert ccc([-1, 0, 1], [1, 0, -1]) == -1
    assert ccc([1, 2, 3], [2, 3, 4]) == pytest.approx(4 / 7, abs=1e-15)
    with pytest.raises(ValueError):
        ccc([2, 2], [2, 2])
    with pytest.raises(ValueError):
        ccc([1, 2], [1, 2, 3])


@given(arrays(np.float64, 8, elements=st.floats(-100, 100)), arrays(np.float64, 8, elements=st.floats(-100, 100)))
def test_ccc_symmetric_and_bounded_by_pearson(x, y):
    if np.ptp(x) < 1e-6 or np.ptp(y) < 1e-6:
        return
    c = ccc(x, y)
    assert c == pytest.approx(ccc(y, x), abs=1e-12)
    assert abs(c) <= abs(np.corrcoef(x, y)[0, 1]) + 1e-9


# ------------------------------------------------------------------ ARI

def test_ari_examples():
    assert adjusted_rand_index([1, 1, 2, 2], [1, 1, 2, 2]) == 1
    assert adjusted_rand_index([1, 1, 2, 2], [1, 2, 1, 2]) == pytest.approx(-0.5, abs=1e-15)
    assert adjusted_rand_index(["a", "a", "b"], [7, 7, 3]) == 1


@given(st.lists(st.integers(0, 3), min_size=4, max_size=30), st.integers(0, 2**31))
def test_ari_symmetric_and_bounded(a, seed):
    b = np.random.default_rng(seed).integers(0, 3, len(a))
    ab = adjusted_rand_index(a, b)
    assert ab == pytest.approx(adjusted_rand_index(b, a), abs=1e-12)
    assert -1 <= ab <= 1
    assert adjusted_rand_index(a, a) == 1


def test_ward_on_separated_blobs():
    rng = np.random.default_rng(4)
    x = np.hstack([rng.normal(2, 0.2, (2, 20)), rng.normal(8, 0.2, (2, 20))])
    labels = ["L"] * 20 + ["R"] * 20
    ari, cari = ward_cluster_ari(_log_matrix(x), labels)
    assert (ari, cari) == (1.0, 0.0)


def test_ward_needs_enough_samples():
    with pytest.raises(ValidationError):
        ward_cluster_ari(_log_matrix([[1.0]]), ["a"], k_clusters=2)


# -------------------------------------------------------------------- DE

def test_duplicated_groups_give_zero_fold_change():
    rng = np.random.default_rng(5)
    half = rng.poisson(50, (10, 6))
    m = make_matrix(np.hstack([half, half]), ["A"] * 6 + ["B"] * 6)
    res = de_voom_lite(m)
    np.testing.assert_allclose(res.log2fc, 0, atol=1e-12)


def test_four_fold_shift_detected():
    counts = simulate_two_group_counts(n_markers=50, n_per_group=20, n_shifted=2, fold_change=4.0, seed=6)
    res = de_voom_lite(counts)
    assert np.all(res.p_value[:2] < 0.001)
    assert np.all(np.isfinite(res.weights)) and np.all(res.weights > 0)


def test_rank_agreement_with_t_test():
    rng = np.random.default_rng(7)
    n_markers, n = 200, 15
    lib = 1_000_000
    base = rng.uniform(6, 10, n_markers)
    shift = np.where(np.arange(n_markers) < 60, rng.normal(0, 1, n_markers), 0)
    logcpm = np.hstack([base[:, None] + rng.normal(0, 0.4, (n_markers, n)),
                        (base + shift)[:, None] + rng.normal(0, 0.4, (n_markers, n))])
    counts = np.round(2.0 ** logcpm * lib / 1e6 / n_markers * 20)
    m = make_matrix(counts, ["A"] * n + ["B"] * n)
    res = de_voom_lite(m)
    y = np.log2((counts + 0.5) / (counts.sum(0) + 1) * 1e6)
    t_p = stats.ttest_ind(y[:, n:], y[:, :n], axis=1).pvalue
    assert stats.spearmanr(res.p_value, t_p)[0] > 0.95


def test_de_errors():
    with pytest.raises(ValidationError):
        de_voom_lite(make_matrix(np.ones((2, 3)) * 5, ["A", "B", "B"]))
    with pytest.raises(ValidationError):
        de_voom_lite(make_matrix(np.ones((2, 3)) * 5, ["A", "B", "C"]))


def test_de_concordance_examples():
    ids = ("m1", "m2", "m3")
    fc = np.array([1.0, -2.0, 1.0])
    a = DEResult(ids, np.array([0.1, 0.01, 0.5]), fc, np.ones(3))
    assert de_concordance(a, a) == (1.0, 1.0)
    flipped = DEResult(ids, a.p_value, -fc, np.ones(3))
    assert de_concordance(a, flipped)[1] == pytest.approx(-1, abs=1e-12)
    b = DEResult(ids[:2], np.array([0.1, 0.01]), np.array([1.0, -1.0]), np.ones(2))
    c = DEResult(ids[:2], np.array([0.01, 0.1]), np.array([1.0, -1.0]), np.ones(2))
    # -log10 p vectors (1, 2) vs (2, 1) -> ccc = -1
    assert de_concordance(b, c)[0] == pytest.approx(ccc([1, 2], [2, 1]), abs=1e-12)
    with pytest.raises(ValidationError):
        de_concordance(a, b)


# ------------------------------------------------------------- embedding

def test_embedding_of_two_dimensional_data_preserves_distances():
    rng = np.random.default_rng(8)
    x = rng.normal(5, 1, (2, 30))
    coords = embed_2d(_log_matrix(x))

    def dists(p):
        return np.linalg.norm(p[:, None, :] - p[None, :, :], axis=-1)
    np.testing.assert_allclose(dists(coords), dists(x.T), atol=1e-8)


def test_embedding_duplicates_and_rows():
    x = np.array([[1.0, 2, 2, 5], [3, 1, 1, 0], [0, 4, 4, 2]])
    coords = embed_2d(_log_matrix(x))
    assert coords.shape == (4, 2)
    np.testing.assert_allclose(coords[1], coords[2], atol=1e-12)
    with pytest.raises(ValidationError):
        embed_2d(_log_matrix(x[:, :2]))


def test_write_embedding(tmp_path):
    gen = _log_matrix(np.arange(12.0).reshape(3, 4))
    combined, sources = combine_sources(gen, gen)
    write_embedding(combined, sources, tmp_path / "e.tsv")
    lines = (tmp_path / "e.tsv").read_text().splitlines()
    assert lines[0] == "sample_id\tx\ty\tsource\tgroup"
    assert len(lines) == 9 and lines[1].startswith("generated:s1\t") and "\treference\t" in lines[-1]


# --------------------------------------------------------------- report

def test_self_evaluation_is_perfect(caplog):
    counts = simulate_two_group_counts(n_markers=40, n_per_group=15, seed=9)
    clusters = {"c1": ["m0001", "m0002", "m0003"], "c2": ["m0010", "m0011"]}
    rep = evaluate(counts, counts, clusters, two_group=True)
    assert rep.mad_mean == rep.mad_sd == rep.mad_sparsity == 0
    assert rep.ccc_pcc == pytest.approx(1, abs=1e-12)
    assert rep.ccc_neglog10_p == pytest.approx(1) and rep.ccc_log2fc == pytest.approx(1)
    assert rep.cari == 1 - rep.ari
    doc = json.loads(rep.to_json())
    assert set(doc) == {"mad_mean", "mad_sd", "mad_sparsity", "one_minus_pct_zero_markers", "ari", "cari",
                        "ccc_pcc", "ccc_neglog10_p", "ccc_log2fc"}
    assert set(doc["one_minus_pct_zero_markers"]) == {"generated", "reference"}


def test_one_group_report_omits_de_and_uses_sources(caplog):
    rng = np.random.default_rng(10)
    ref = make_matrix(rng.poisson(20, (10, 12)))
    gen = make_matrix(rng.poisson(400, (10, 12)), prefix="g")
    with caplog.at_level(logging.WARNING):
        rep = evaluate(gen, ref)
    doc = rep.to_dict()
    assert "ccc_log2fc" not in doc and "ccc_pcc" not in doc
    assert rep.ari == 1.0 and rep.cari == 0.0
    assert "ccc_pcc omitted" in caplog.text


def test_evaluate_reorders_markers_and_checks_sets():
    rng = np.random.default_rng(11)
    ref = make_matrix(rng.poisson(20, (4, 6)))
    shuffled = CountMatrix(ref.marker_ids[::-1], ref.sample_ids, ref.counts[::-1], ref.scale)
    assert evaluate(shuffled, ref).mad_mean == 0
    other = ref.replace(marker_ids=["x1", "x2", "x3", "x4"])
    with pytest.raises(ValidationError):
        evaluate(other, ref)


def test_two_group_needs_labels():
    ref = make_matrix(np.arange(1, 13).reshape(2, 6))
    with pytest.raises(ValidationError):
        evaluate(ref, ref, two_group=True)


def test_load_clusters(tmp_path):
    p = tmp_path / "c.tsv"
    p.write_text("c1\tm1\nc1\tm2\n\nc2\tm3\n")
    assert load_clusters(p) == {"c1": ["m1", "m2"], "c2": ["m3"]}
    p.write_text("c1\tm1\textra\n")
    with pytest.raises(ValidationError):
        load_clusters(p)
