import hashlib
import json

import numpy as np
import pytest

from seqaug.cli import main
from seqaug.data import load_counts, write_counts, write_groups
from seqaug.simulate import simulate_two_group_counts


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    m = simulate_two_group_counts(n_markers=30, n_per_group=20, n_shifted=6, seed=3)
    write_counts(m, d / "counts.tsv")
    write_groups(m, d / "groups.tsv")
    return d


def run(*argv):
    return main([str(a) for a in argv])


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ------------------------------------------------------------ preprocess

def test_preprocess_identity(dataset, tmp_path):
    rc = run("preprocess", "--counts", dataset / "counts.tsv", "--groups", dataset / "groups.tsv",
             "--normalize", "none", "--filter-mean", 0, "--out", tmp_path)
    assert rc == 0
    assert load_counts(tmp_path / "pilot.tsv") == load_counts(dataset / "counts.tsv")
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["markers_after"] <= man["markers_before"] == 30
    assert man["inputs"]["counts"]["sha256"] == digest(dataset / "counts.tsv")
    assert man["config"]["normalize"] == "none"


def test_preprocess_filters_and_subsamples(dataset, tmp_path):
    assert run("preprocess", "--counts", dataset / "counts.tsv", "--groups", dataset / "groups.tsv",
               "--normalize", "tmm", "--filter-mean", 7, "--n-per-group", 8, "--out", tmp_path) == 0
    pilot = load_counts(tmp_path / "pilot.tsv", tmp_path / "pilot_groups.tsv")
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert pilot.n_samples == 16 and pilot.n_markers == man["markers_after"] <= 30
    assert man["thresholds"] == {"mean": 7.0, "sd": None}


def test_missing_input_exits_2(tmp_path, capsys):
    assert run("preprocess", "--counts", tmp_path / "nope.tsv", "--out", tmp_path) == 2
    assert "not found" in capsys.readouterr().err


# --------------------------------------------------------------- augment

def test_augment_validation(dataset, tmp_path):
    base = ["augment", "--pilot", dataset / "counts.tsv", "--out", tmp_path, "--epochs", "fixed:1"]
    assert run(*base, "--model", "vae:1-1", "--n", 0) == 2
    assert run(*base, "--model", "cvae:1-10", "--n", 5) == 2  # no groups
    assert run(*base, "--model", "vae:1-1", "--n", 5, "--offline", "mixup") == 2


def test_augment_replicates_and_determinism(dataset, tmp_path):
    def once(out):
        return run("augment", "--pilot", dataset / "counts.tsv", "--groups", dataset / "groups.tsv",
                   "--model", "cvae:1-10", "--epochs", "fixed:3", "--n", 12, "--replicates", 3,
                   "--offline", "gaussian:1:0.1", "--seed", 4, "--out", out)

    assert once(tmp_path / "a") == 0 and once(tmp_path / "b") == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert [f for f in files if f.startswith("generated_") and "groups" not in f] == \
        ["generated_001.tsv", "generated_002.tsv", "generated_003.tsv"]
    gen = load_counts(tmp_path / "a" / "generated_001.tsv", tmp_path / "a" / "generated_001_groups.tsv")
    assert gen.n_samples == 12 and gen.labels.count("A") == 6
    assert np.all(gen.counts == np.round(gen.counts))
    for name in files:
        assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name), name
    assert digest(tmp_path / "a" / "generated_001.tsv") != digest(tmp_path / "a" / "generated_002.tsv")
    log = (tmp_path / "a" / "training_log.tsv").read_text().splitlines()
    assert len(log) == 4 and "loss" in log[0]


# -------------------------------------------------------------- evaluate

def test_self_evaluation(dataset, tmp_path, capsys):
    clusters = tmp_path / "clusters.tsv"
    clusters.write_text("c1\tm0001\nc1\tm0002\nc1\tm0003\nc2\tm0020\nc2\tm0021\n")
    rc = run("evaluate", "--generated", dataset / "counts.tsv", "--generated-groups", dataset / "groups.tsv",
             "--reference", dataset / "counts.tsv", "--reference-groups", dataset / "groups.tsv",
             "--clusters", clusters, "--two-group", "--out", tmp_path / "ev")
    assert rc == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["mad_mean"] == rep["mad_sd"] == rep["mad_sparsity"] == 0
    for key in ("ccc_pcc", "ccc_neglog10_p", "ccc_log2fc"):
        assert rep[key] == pytest.approx(1, abs=1e-12)
    assert json.loads((tmp_path / "ev" / "report.json").read_text()) == rep
    assert len((tmp_path / "ev" / "embed.tsv").read_text().splitlines()) == 81


def test_one_group_evaluation_and_missing_clusters(dataset, tmp_path, capsys, caplog):
    rc = run("evaluate", "--generated", dataset / "counts.tsv", "--reference", dataset / "counts.tsv",
             "--clusters", tmp_path / "absent.tsv", "--out", tmp_path)
    assert rc == 0
    captured = capsys.readouterr()
    rep = json.loads(captured.out)
    assert "ccc_log2fc" not in rep and "ccc_neglog10_p" not in rep and "ccc_pcc" not in rep
    assert "absent.tsv" in caplog.text and "ccc_pcc omitted" in caplog.text


def test_marker_mismatch_exits_2(dataset, tmp_path):
    m = load_counts(dataset / "counts.tsv")
    write_counts(m.take_markers(range(10)), tmp_path / "fewer.tsv")
    assert run("evaluate", "--generated", tmp_path / "fewer.tsv", "--reference", dataset / "counts.tsv",
               "--out", tmp_path) == 2


# ------------------------------------------------------ curve and project

def _synthetic_curve(path):
    path.write_text(json.dumps({
        "sizes": [10.0, 20.0, 30.0, 40.0, 50.0], "mean_accuracy": [0.63, 0.73, 0.77, 0.79, 0.81],
        "per_repeat": [], "params": {"a": 0.05, "b": 1.0, "c": -0.5},
        "covariance": (np.eye(3) * 1e-6).tolist(), "residual_scale": 1e-6,
        "classifier": "knn:20", "seed": 0}))


def test_project(tmp_path, capsys):
    _synthetic_curve(tmp_path / "curve.json")
    assert run("project", "--curve", tmp_path / "curve.json", "--target-accuracy", 0.85) == 0
    n_star, lo, hi = capsys.readouterr().out.split()
    assert n_star == "100"
    assert int(lo) <= 100 <= int(hi)
    assert run("project", "--curve", tmp_path / "curve.json", "--target-accuracy", 0.96) == 3
    assert "asymptotic" in capsys.readouterr().err


def test_curve_subsample_mode(dataset, tmp_path, capsys):
    def once(out):
        return run("curve", "--pilot", dataset / "counts.tsv", "--groups", dataset / "groups.tsv",
                   "--model", "none", "--sizes", "5:15:5", "--repeats", 2, "--classifier", "knn:3",
                   "--seed", 2, "--out", out)

    assert once(tmp_path / "a") == 0 and once(tmp_path / "b") == 0
    doc = json.loads((tmp_path / "a" / "curve.json").read_text())
    assert doc["sizes"] == [5, 10, 15] and len(doc["per_repeat"]) == 6
    assert -1 <= doc["params"]["c"] <= 0
    for name in ("curve.json", "curve_plot.tsv", "manifest.json"):
        assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name)


def test_config_file_with_flag_override(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"preprocess": {"counts": str(dataset / "counts.tsv"), "filter_mean": 100.0,
                                              "normalize": "tc"}}))
    assert run("--config", cfg, "preprocess", "--filter-mean", 0, "--out", tmp_path / "o") == 0
    man = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert man["config"]["normalize"] == "tc"
    assert man["thresholds"]["mean"] == 0  # the flag wins over the file
    assert man["markers_after"] == 30
