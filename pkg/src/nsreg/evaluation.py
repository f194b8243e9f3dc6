"""Open-set evaluation: seen/unseen rotations, k-means class splitting, ranking metrics
and report aggregation."""
from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .canon import canonical_json
from .graph import AttributedGraph, ConfigError

log = logging.getLogger(__name__)

METRICS = ("auc_roc_all", "auc_pr_all", "auc_roc_unseen", "auc_pr_unseen")


class UndefinedMetricError(ValueError):
    pass


# --------------------------------------------------------------------------- metrics

def _binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    return s, y


def auc_roc(scores, labels) -> float:
    """P(anomaly outscores normal) + half the tie probability, via average ranks."""
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC-ROC needs both normal and anomalous labels")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auc_pr(scores, labels) -> float:
    """Average precision; tied scores enter as one threshold block."""
    s, y = _binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise UndefinedMetricError("AUC-PR needs at least one anomalous label")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of each block of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = tp[ends]
    precision = tp / (ends + 1.0)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


# --------------------------------------------------------------------------- k-means

@dataclass
class KMeansResult:
    labels: np.ndarray
    centres: np.ndarray
    inertia_history: list = field(default_factory=list)

    @property
    def inertia(self) -> float:
        return self.inertia_history[-1]


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return np.maximum((x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :], 0.0)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centres = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d = _sq_dists(x, np.array(centres)).min(axis=1)
        total = d.sum()
        idx = rng.choice(len(x), p=d / total) if total > 0 else rng.integers(len(x))
        centres.append(x[idx])
    return np.array(centres, dtype=np.float64)


def kmeans(points, k: int, seed: int = 0, max_iter: int = 300) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; stops at an assignment fixpoint."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if k < 2 or len(x) < k:
        raise ValueError(f"k-means needs k >= 2 and at least k rows (k={k}, rows={len(x)})")
    rng = np.random.default_rng(seed)
    centres = _kmeanspp(x, k, rng)
    labels = None
    history = []
    for _ in range(max_iter):
        d = _sq_dists(x, centres)
        new = d.argmin(axis=1)
        history.append(float(d[np.arange(len(x)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for j in range(k):
            members = labels == j
            if members.any():
                centres[j] = x[members].mean(axis=0)
            else:
                # empty cluster: move its centre onto the worst-served point
                far = d[np.arange(len(x)), labels].argmax()
                log.debug("re-seeding empty cluster %d at row %d", j, far)
                centres[j] = x[far]
    return KMeansResult(labels, centres, history)


def kmeans_split(points, k: int, seed: int = 0) -> np.ndarray:
    """Cluster id (0..k-1) for each row."""
    return kmeans(points, k, seed).labels


def split_anomaly_class(g: AttributedGraph, embeddings, k: int, seed: int = 0) -> AttributedGraph:
    """Relabel all anomalies into k synthetic classes by clustering their embeddings."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.shape[0] != g.n:
        raise ValueError(f"{emb.shape[0]} embedding rows for a {g.n}-node graph")
    anomalies = np.flatnonzero(g.node_class != 0)
    node_class = np.zeros(g.n, dtype=np.int64)
    node_class[anomalies] = kmeans_split(emb[anomalies], k, seed) + 1
    return AttributedGraph(g.features.copy(), g.offsets.copy(), g.targets.copy(), node_class)


# --------------------------------------------------------------------------- splits

@dataclass
class SplitConfig:
    n_labelled_anomalies: int = 50
    labelled_normal_fraction: float = 0.05
    seed: int = 0


@dataclass(frozen=True)
class OpenSetSplit:
    rotation: int
    seen_class: int
    labelled_anomalies: np.ndarray
    labelled_normals: np.ndarray
    test_all: np.ndarray
    test_unseen: np.ndarray
    seed: int = 0


def make_rotations(g: AttributedGraph, cfg: SplitConfig | None = None) -> list[OpenSetSplit]:
    """One split per anomaly class playing the seen role.

    Labelled normals are resampled for every (rotation, seed) pair.
    """
    cfg = cfg or SplitConfig()
    classes = g.anomaly_classes
    if len(classes) < 2:
        raise ConfigError(f"open-set rotations need >= 2 anomaly classes, graph has {len(classes)}")
    normals = np.flatnonzero(g.node_class == 0)
    n_lab_normal = max(1, int(round(cfg.labelled_normal_fraction * len(normals))))
    splits = []
    for r, cls in enumerate(classes):
        rng = np.random.default_rng([cfg.seed, r])
        members = np.flatnonzero(g.node_class == cls)
        if len(members) < cfg.n_labelled_anomalies:
            log.warning("class %d has %d nodes < %d requested labelled anomalies; using the whole class",
                        cls, len(members), cfg.n_labelled_anomalies)
        n_a = min(cfg.n_labelled_anomalies, len(members))
        lab_a = np.sort(rng.choice(members, size=n_a, replace=False))
        lab_n = np.sort(rng.choice(normals, size=n_lab_normal, replace=False))
        labelled = np.zeros(g.n, dtype=bool)
        labelled[lab_a] = True
        labelled[lab_n] = True
        test_all = np.flatnonzero(~labelled)
        test_unseen = test_all[g.node_class[test_all] != cls]
        splits.append(OpenSetSplit(r, cls, lab_a, lab_n, test_all, test_unseen, cfg.seed))
    return splits


# --------------------------------------------------------------------------- reports

def evaluate(detector, g: AttributedGraph, split: OpenSetSplit) -> dict:
    """The four test metrics for one trained detector on one split.

    ``detector`` only needs ``score_nodes(g, nodes)``; the unseen set is scored
    in its own call so it never touches seen-class anomalies.
    """
    anomalous = g.node_class != 0
    s_all = detector.score_nodes(g, split.test_all)
    s_unseen = detector.score_nodes(g, split.test_unseen)
    y_all = anomalous[split.test_all]
    y_unseen = anomalous[split.test_unseen]
    return {
        "rotation": split.rotation,
        "seen_class": split.seen_class,
        "seed": split.seed,
        "auc_roc_all": auc_roc(s_all, y_all),
        "auc_pr_all": auc_pr(s_all, y_all),
        "auc_roc_unseen": auc_roc(s_unseen, y_unseen),
        "auc_pr_unseen": auc_pr(s_unseen, y_unseen),
    }


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)
    meta: dict = field(default_factory=lambda: {"labelled_normals_resampled": "per_rotation_and_seed"})

    def add(self, row: dict, **extra) -> None:
        self.rows.append({**row, **extra})

    def per_rotation(self) -> list[dict]:
        out = []
        for rot in sorted({r["rotation"] for r in self.rows}):
            rows = [r for r in self.rows if r["rotation"] == rot]
            agg = {"rotation": rot, "seen_class": rows[0]["seen_class"], "n_seeds": len(rows)}
            for m in METRICS:
                vals = np.array([r[m] for r in rows])
                agg[m] = float(vals.mean())
                if len(vals) >= 2:
                    agg[m + "_std"] = float(vals.std())
            out.append(agg)
        return out

    def aggregate(self) -> dict:
        """Seed mean (and std) per rotation, then the plain mean over rotations."""
        rots = self.per_rotation()
        if not rots:
            return {}
        agg = {"n_rotations": len(rots)}
        for m in METRICS:
            agg[m] = float(np.mean([r[m] for r in rots]))
            if all(m + "_std" in r for r in rots):
                agg[m + "_std"] = float(np.mean([r[m + "_std"] for r in rots]))
        return agg

    def to_json(self) -> str:
        return canonical_json({"rows": self.rows, "per_rotation": self.per_rotation(),
                               "aggregate": self.aggregate(), "meta": self.meta})

    def to_csv(self) -> str:
        extra = sorted({k for r in self.rows for k in r} - set(METRICS) - {"rotation", "seen_class", "seed"})
        cols = ["kind", "rotation", "seen_class", "seed", *extra, *METRICS,
                *(m + "_std" for m in METRICS)]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in self.rows:
            w.writerow({"kind": "run", **{k: _fmt(v) for k, v in r.items()}})
        for r in self.per_rotation():
            w.writerow({"kind": "rotation_mean", **{k: _fmt(v) for k, v in r.items()}})
        if self.rows:
            w.writerow({"kind": "overall_mean", **{k: _fmt(v) for k, v in self.aggregate().items()}})
        return buf.getvalue()


def _fmt(v):
    return repr(v) if isinstance(v, float) else v
