import itertools
import json
import math
import warnings
from statistics import NormalDist

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hsattn.corpus import CorpusManifest, Record, feature_path
from hsattn.errors import InputError, MetricError, ParseError
from hsattn.evaluation import (
    confusion_matrix,
    evaluate,
    recalls,
    roc_auc,
    uar,
    war,
    write_report,
    ZTest,
    z_test_proportions,
    z_test_uar,
)
from hsattn.models import ModelConfig
from hsattn.training import TrainConfig, train

from conftest import SHORT

# published partition counts of the heart sound corpus: rows train/dev/test, columns normal/mild/mod_severe
PARTITION_COUNTS = {"train": (84, 276, 142), "dev": (32, 98, 50), "test": (28, 91, 44)}


def labels_from_counts(counts):
    return np.repeat(np.arange(len(counts)), counts)


# -- manifest -----------------------------------------------------------------------

def write_manifest(path, rows, header="file,subject,split,label"):
    path.write_text("\n".join([header, *rows]) + "\n")
    return path


def test_manifest_resolves_relative_paths(tmp_path):
    m = CorpusManifest.load(write_manifest(tmp_path / "m.csv", ["a/x.wav,s1,train,normal", "b.wav,s2,test,mod_severe"]))
    assert m.records[0].path == tmp_path / "a/x.wav"
    assert m.records[1].label_id == 2
    assert [r.file for r in m.split("test")] == ["b.wav"]
    assert m.class_counts("train") == {"normal": 1, "mild": 0, "mod_severe": 0}


def test_manifest_rejects_subject_overlap(tmp_path):
    with pytest.raises(InputError, match="s1"):
        CorpusManifest.load(write_manifest(tmp_path / "m.csv", ["a.wav,s1,train,normal", "b.wav,s1,dev,mild"]))


@pytest.mark.parametrize("rows,header,err", [
    (["a.wav,s1,train,severe"], "file,subject,split,label", InputError),
    (["a.wav,s1,val,mild"], "file,subject,split,label", InputError),
    (["a.wav,s1,train"], "file,subject,split,label", ParseError),
    (["a.wav,s1,train,mild"], "path,subject,split,label", ParseError),
])
def test_manifest_validation(tmp_path, rows, header, err):
    with pytest.raises(err):
        CorpusManifest.load(write_manifest(tmp_path / "m.csv", rows, header))


def test_feature_paths_are_unique_per_file(tmp_path):
    a = Record("x/clip.wav", tmp_path, "s", "train", "mild")
    b = Record("y/clip.wav", tmp_path, "t", "train", "mild")
    assert feature_path(tmp_path, a) != feature_path(tmp_path, b)
    assert feature_path(tmp_path, a).suffix == ".lmel"


# -- UAR / WAR / confusion -----------------------------------------------------------

def test_uar_hand_cases():
    truth = [0, 0, 1, 1, 2, 2]
    assert uar(truth, truth) == 1.0
    # recalls 1.0, 0.5, 0.0
    pred = [0, 0, 1, 0, 0, 1]
    np.testing.assert_array_equal(recalls(truth, pred), [1.0, 0.5, 0.0])
    assert uar(truth, pred) == 0.5
    assert war(truth, pred) == 0.5
    assert uar(truth, [1] * 6) == pytest.approx(1 / 3, abs=0)


def test_uar_absent_class_is_an_error():
    with pytest.raises(MetricError):
        uar([0, 0, 1], [0, 1, 1])
    with pytest.raises(InputError):
        uar([0, 1, 2], [0, 1])


def test_constant_mild_predictor_on_test_split():
    truth = labels_from_counts(PARTITION_COUNTS["test"])
    assert truth.size == 163
    pred = np.ones_like(truth)
    np.testing.assert_array_equal(recalls(truth, pred), [0.0, 1.0, 0.0])
    assert uar(truth, pred) == 1 / 3
    assert war(truth, pred) == 91 / 163


def test_table_i_totals():
    assert sum(sum(c) for c in PARTITION_COUNTS.values()) == 845
    assert [sum(c) for c in PARTITION_COUNTS.values()] == [502, 180, 163]
    assert [sum(col) for col in zip(*PARTITION_COUNTS.values())] == [144, 465, 236]


def test_confusion_matrix_properties():
    truth = np.array([0, 1, 2, 2, 1, 0, 2])
    pred = np.array([0, 2, 2, 1, 1, 0, 2])
    counts = confusion_matrix(truth, pred)
    assert counts[2, 1] == 1 and counts.sum() == 7
    norm = confusion_matrix(truth, pred, normalize=True)
    np.testing.assert_allclose(norm.sum(axis=1), 1.0)
    assert uar(truth, pred) == pytest.approx(np.diag(norm).mean(), abs=1e-15)
    np.testing.assert_array_equal(confusion_matrix(truth, truth, normalize=True), np.eye(3))


label_vectors = st.lists(st.integers(0, 2), min_size=3, max_size=40).filter(lambda v: len(set(v)) == 3)


@given(label_vectors, st.data())
def test_uar_invariant_under_relabeling(truth, data):
    pred = data.draw(st.lists(st.integers(0, 2), min_size=len(truth), max_size=len(truth)))
    perm = np.array(data.draw(st.permutations([0, 1, 2])))
    t, p = np.array(truth), np.array(pred)
    assert uar(perm[t], perm[p]) == pytest.approx(uar(t, p), abs=1e-15)
    assert uar(t, p) <= recalls(t, p).max() + 1e-15


# -- ROC / AUC ------------------------------------------------------------------------

def pair_counting_auc(positive, scores):
    pos = [s for s, y in zip(scores, positive) if y]
    neg = [s for s, y in zip(scores, positive) if not y]
    wins = sum((a > b) + 0.5 * (a == b) for a, b in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_perfect_and_chance_auc():
    truth = np.array([0, 1, 2, 0, 1, 2])
    res = roc_auc(truth, np.eye(3)[truth])
    assert res.auc == {0: 1.0, 1: 1.0, 2: 1.0}
    assert res.macro_auc == 1.0
    flat = roc_auc(truth, np.full((6, 3), 1 / 3))
    assert flat.macro_auc == 0.5
    curve = res.curves[0]
    assert tuple(curve[0, :2]) == (0.0, 0.0) and tuple(curve[-1, :2]) == (1.0, 1.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 50), st.integers(0, 2**31), st.booleans())
def test_trapezoid_auc_equals_pair_counting(n, seed, coarse):
    rng = np.random.default_rng(seed)
    truth = rng.integers(0, 3, n)
    raw = rng.integers(0, 4, (n, 3)) if coarse else rng.random((n, 3))  # coarse scores force ties
    scores = (raw + 1e-3) / (raw + 1e-3).sum(axis=1, keepdims=True)
    present = [c for c in range(3) if 0 < (truth == c).sum() < n]
    if not present:
        return
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        res = roc_auc(truth, scores)
    assert len(caught) == 3 - len(present)
    for c in present:
        assert res.auc[c] == pytest.approx(pair_counting_auc(truth == c, scores[:, c]), abs=1e-9)
    assert res.macro_auc == pytest.approx(np.mean([res.auc[c] for c in present]), abs=1e-12)


def test_degenerate_class_excluded_with_warning():
    truth = np.array([0, 1, 0, 1])
    scores = np.array([[0.8, 0.1, 0.1], [0.2, 0.7, 0.1], [0.6, 0.3, 0.1], [0.3, 0.6, 0.1]])
    with pytest.warns(UserWarning, match="class 2"):
        res = roc_auc(truth, scores)
    assert res.excluded == [2] and set(res.auc) == {0, 1}
    with pytest.raises(MetricError), pytest.warns(UserWarning):
        roc_auc(np.zeros(3, int), np.full((3, 3), 1 / 3))


# -- z-test ---------------------------------------------------------------------------

def test_identical_systems():
    truth = np.array([0, 1, 2, 1, 1])
    res = z_test_uar(truth, truth, truth)
    assert (res.z, res.p) == (0.0, 0.5)
    assert res.verdict == "not significant"


def test_z_formula_against_normal_distribution():
    # pooled two-proportion test: p_hat = 0.7, se = sqrt(0.21 * 2 / 163)
    res = z_test_proportions(0.9, 0.5, 163)
    z = 0.4 / math.sqrt(0.7 * 0.3 * 2 / 163)
    assert res.z == pytest.approx(z, rel=1e-12)
    assert res.z == pytest.approx(7.881, abs=1e-3)
    assert res.p == pytest.approx(1 - NormalDist().cdf(z), abs=1e-15)
    assert res.p < 0.01 and res.verdict == "significant"


def test_z_test_antisymmetry_and_empty():
    rng = np.random.default_rng(5)
    truth = rng.integers(0, 3, 60)
    a = np.where(rng.random(60) < 0.7, truth, (truth + 1) % 3)
    b = np.where(rng.random(60) < 0.5, truth, (truth + 2) % 3)
    ab, ba = z_test_uar(a, b, truth), z_test_uar(b, a, truth)
    assert ab.z == -ba.z
    assert ab.p + ba.p == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(InputError):
        z_test_uar([], [], [])


def test_verdict_threshold_is_strict():
    assert ZTest(1.0, 0.05).verdict == "not significant"
    assert ZTest(1.0, 0.0499999).verdict == "significant"


# -- reports --------------------------------------------------------------------------

def test_evaluate_writes_consistent_report(tmp_path, corpus):
    manifest, cache = corpus
    model = ModelConfig("gru", "maxpool", hidden_sizes=(8, 8), input_frames=30, mel_bins=64)
    ckpt = train(TrainConfig(total_iterations=30), model, manifest, cache, SHORT).checkpoint
    report = evaluate(ckpt, manifest, "dev", cache)
    assert len(report.files) == 6 and report.split == "dev"
    assert 0 <= report.uar <= 1 and 0 <= report.war <= 1 and 0 <= report.macro_auc <= 1
    paths = write_report(report, tmp_path / "rep")
    assert {p.name for p in paths} == {"report.json", "confusion.csv", "roc_normal.csv", "roc_mild.csv", "roc_mod_severe.csv"}
    data = json.loads((tmp_path / "rep/report.json").read_text())
    assert data["uar_percent"] == f"{100 * report.uar:.1f}"
    rows = (tmp_path / "rep/confusion.csv").read_text().splitlines()[1:]
    for line in rows:
        assert sum(float(v) for v in line.split(",")[1:]) == pytest.approx(1.0)
    # computing features from audio gives the same report as the cache
    assert evaluate(ckpt, manifest, "dev", None).to_json() == report.to_json()
