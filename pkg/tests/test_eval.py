import csv
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from sklearn.metrics import average_precision_score, roc_auc_score

from nsreg.evaluation import (EvalReport, SplitConfig, UndefinedMetricError, auc_pr, auc_roc, evaluate, kmeans,
                              make_rotations, split_anomaly_class)
from nsreg.graph import ConfigError, SynthConfig, generate_synthetic


def pairwise_auc(s, y):
    pos, neg = s[y == 1], s[y == 0]
    wins = sum((p > q) + 0.5 * (p == q) for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def threshold_ap(s, y):
    total = 0.0
    prev_recall = 0.0
    for t in sorted(set(s), reverse=True):
        hit = s >= t
        tp = np.sum(y[hit])
        recall = tp / y.sum()
        total += (recall - prev_recall) * tp / hit.sum()
        prev_recall = recall
    return total


scores_labels = st.integers(2, 50).flatmap(lambda n: st.tuples(
    st.lists(st.integers(0, 6).map(float), min_size=n, max_size=n),
    st.lists(st.integers(0, 1), min_size=n, max_size=n)).filter(lambda t: 0 < sum(t[1]) < n))


@settings(max_examples=100, deadline=None)
@given(scores_labels)
def test_metrics_match_brute_force(case):
    s, y = np.array(case[0]), np.array(case[1])
    assert abs(auc_roc(s, y) - pairwise_auc(s, y)) < 1e-9
    assert abs(auc_pr(s, y) - threshold_ap(s, y)) < 1e-9
    assert abs(auc_roc(s, y) - roc_auc_score(y, s)) < 1e-9
    assert abs(auc_pr(s, y) - average_precision_score(y, s)) < 1e-9


def test_metric_edge_cases():
    assert auc_roc([1, 1, 1, 1], [0, 1, 0, 1]) == 0.5
    assert auc_roc([0, 1], [0, 1]) == 1.0 and auc_pr([0, 1], [0, 1]) == 1.0
    with pytest.raises(UndefinedMetricError):
        auc_roc([0.1, 0.2], [0, 0])
    with pytest.raises(UndefinedMetricError):
        auc_pr([0.1, 0.2], [0, 0])
    with pytest.raises(ValueError):
        auc_roc([0.1], [0, 1])


def test_kmeans_separated_blobs():
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(size=(40, 2)), rng.normal(size=(40, 2)) + 20])
    res = kmeans(x, 2, seed=3)
    assert len(set(res.labels[:40])) == 1 and len(set(res.labels[40:])) == 1
    assert res.labels[0] != res.labels[-1]
    assert all(b <= a + 1e-9 for a, b in zip(res.inertia_history, res.inertia_history[1:]))
    assert np.array_equal(kmeans(x, 2, seed=3).labels, res.labels)


def test_kmeans_duplicate_points_and_bad_k():
    x = np.array([[0.0], [0.0], [0.0], [5.0]])
    labels = kmeans(x, 3, seed=0).labels
    assert set(labels) <= {0, 1, 2}
    with pytest.raises(ValueError):
        kmeans(x, 1)
    with pytest.raises(ValueError):
        kmeans(x[:2], 3)


@pytest.fixture(scope="module")
def g():
    return generate_synthetic(SynthConfig(n_normal=300, n_anomaly_per_class=40, n_anomaly_classes=3,
                                          feature_dim=12, normal_groups=2), 1)


def test_rotations_partition_nodes(g):
    splits = make_rotations(g, SplitConfig(n_labelled_anomalies=10, labelled_normal_fraction=0.1, seed=4))
    assert [s.seen_class for s in splits] == [1, 2, 3]
    for s in splits:
        lab = np.r_[s.labelled_anomalies, s.labelled_normals]
        assert len(set(lab)) == len(lab) == 40
        assert set(s.test_all).isdisjoint(lab) and len(s.test_all) + len(lab) == g.n
        assert np.all(g.node_class[s.labelled_anomalies] == s.seen_class)
        assert not np.any(g.node_class[s.test_unseen] == s.seen_class)
        assert set(s.test_unseen) <= set(s.test_all)
    again = make_rotations(g, SplitConfig(n_labelled_anomalies=10, labelled_normal_fraction=0.1, seed=4))
    assert all(np.array_equal(a.labelled_normals, b.labelled_normals) for a, b in zip(splits, again))
    assert not np.array_equal(splits[0].labelled_normals, splits[1].labelled_normals)


def test_rotations_need_two_classes():
    one = generate_synthetic(SynthConfig(n_normal=50, n_anomaly_per_class=0), 0)
    with pytest.raises(ConfigError):
        make_rotations(one)


def test_split_anomaly_class_relabels_by_cluster(g):
    emb = np.zeros((g.n, 1))
    anomalies = np.flatnonzero(g.node_class != 0)
    emb[anomalies[:60], 0] = 10.0
    h = split_anomaly_class(g, emb, 2, seed=0)
    assert h.anomaly_classes == [1, 2]
    assert len(set(h.node_class[anomalies[:60]])) == 1
    assert np.array_equal(h.node_class == 0, g.node_class == 0)


class ConstantDetector:
    def score_nodes(self, g, nodes):
        return np.zeros(len(nodes))


def test_constant_scores_give_half_auc_and_aggregates_are_means(g):
    rep = EvalReport()
    for seed in (0, 1):
        for s in make_rotations(g, SplitConfig(10, 0.1, seed)):
            rep.add(evaluate(ConstantDetector(), g, s), variant="const")
    assert len(rep.rows) == 6
    assert all(r["auc_roc_all"] == 0.5 and r["auc_roc_unseen"] == 0.5 for r in rep.rows)
    agg = rep.aggregate()
    for m in ("auc_pr_all", "auc_pr_unseen"):
        per_rot = [np.mean([r[m] for r in rep.rows if r["rotation"] == k]) for k in range(3)]
        assert agg[m] == pytest.approx(np.mean(per_rot), abs=1e-15)
    rows = list(csv.DictReader(io.StringIO(rep.to_csv())))
    assert [r["kind"] for r in rows].count("run") == 6 and rows[-1]["kind"] == "overall_mean"
    assert rows[0]["variant"] == "const"
    assert json.loads(rep.to_json())["aggregate"] == json.loads(json.dumps(agg))
