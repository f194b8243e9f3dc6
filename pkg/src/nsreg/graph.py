"""Attributed graphs in compressed adjacency form, file I/O, neighbour sampling and a
synthetic open-set benchmark generator."""
from __future__ import annotations

import csv
import functools
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FEATURE_MAGIC = b"NSRG"
FEATURE_VERSION = 1


class GraphLoadError(ValueError):
    def __init__(self, msg: str, path: str | Path | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + msg)
        self.line = line


class ConfigError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class AttributedGraph:
    """Undirected node-attributed graph.

    ``offsets``/``targets`` hold sorted neighbour lists; node ``v``'s neighbours are
    ``targets[offsets[v]:offsets[v + 1]]``. ``node_class`` is 0 for normal nodes and
    k >= 1 for anomaly class k.
    """

    features: np.ndarray
    offsets: np.ndarray
    targets: np.ndarray
    node_class: np.ndarray

    def __post_init__(self):
        n = self.features.shape[0]
        if self.offsets.shape != (n + 1,) or self.node_class.shape != (n,):
            raise ValueError("offsets/node_class do not match the feature rows")
        for arr in (self.features, self.offsets, self.targets, self.node_class):
            arr.setflags(write=False)

    @classmethod
    def from_edges(cls, n: int, edges, features, node_class) -> "AttributedGraph":
        """Build from an (m, 2) edge array; symmetrises, deduplicates and drops self-loops."""
        e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        if e.size and (e.min() < 0 or e.max() >= n):
            raise ValueError("edge endpoint out of range")
        e = e[e[:, 0] != e[:, 1]]
        both = np.concatenate([e, e[:, ::-1]])
        key = np.unique(both[:, 0] * n + both[:, 1])
        src, dst = key // n, key % n
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(src, minlength=n), out=offsets[1:])
        return cls(np.ascontiguousarray(features, dtype=np.float64), offsets, dst.astype(np.int64),
                   np.asarray(node_class, dtype=np.int64).copy())

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def degrees(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def n_edges(self) -> int:
        return len(self.targets) // 2

    def neighbours(self, v: int) -> np.ndarray:
        return self.targets[self.offsets[v]:self.offsets[v + 1]]

    def has_edge(self, u: int, v: int) -> bool:
        nb = self.neighbours(u)
        i = np.searchsorted(nb, v)
        return bool(i < len(nb) and nb[i] == v)

    @functools.cached_property
    def _edge_keys(self) -> np.ndarray:
        # CSR order with sorted targets makes these keys ascending
        return np.repeat(np.arange(self.n, dtype=np.int64), self.degrees) * self.n + self.targets

    def has_edges(self, us, vs) -> np.ndarray:
        """Vectorised ``has_edge`` over paired arrays."""
        keys = np.asarray(us, dtype=np.int64) * self.n + np.asarray(vs, dtype=np.int64)
        ek = self._edge_keys
        i = np.searchsorted(ek, keys)
        hit = np.zeros(keys.shape, dtype=bool)
        ok = i < len(ek)
        hit[ok] = ek[i[ok]] == keys[ok]
        return hit

    def edge_list(self) -> np.ndarray:
        """Each undirected edge once, as (u, v) with u < v."""
        src = np.repeat(np.arange(self.n), self.degrees)
        keep = src < self.targets
        return np.stack([src[keep], self.targets[keep]], axis=1)

    @property
    def anomaly_classes(self) -> list[int]:
        return sorted(int(c) for c in np.unique(self.node_class) if c != 0)

    def same_as(self, other: "AttributedGraph") -> bool:
        return (np.array_equal(self.features, other.features) and np.array_equal(self.offsets, other.offsets)
                and np.array_equal(self.targets, other.targets)
                and np.array_equal(self.node_class, other.node_class))


# --------------------------------------------------------------------------- files

def write_features_binary(path, features: np.ndarray) -> None:
    n, d = features.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC + struct.pack("<IQQ", FEATURE_VERSION, n, d))
        fh.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_features_binary(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise GraphLoadError("bad magic in binary feature file", path)
    if len(raw) < 24:
        raise GraphLoadError("truncated header", path)
    version, n, d = struct.unpack("<IQQ", raw[4:24])
    if version != FEATURE_VERSION:
        raise GraphLoadError(f"unsupported feature file version {version}", path)
    body = raw[24:]
    if len(body) != n * d * 4:
        raise GraphLoadError(f"expected {n * d * 4} bytes of features, found {len(body)}", path)
    return np.frombuffer(body, dtype="<f4").reshape(n, d).astype(np.float64)


def _read_features_csv(path) -> np.ndarray:
    rows: dict[int, list[float]] = {}
    width = None
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0].strip() != "node_id":
            raise GraphLoadError("feature CSV must start with a node_id,f0,... header", path, 1)
        width = len(header) - 1
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) - 1 != width:
                raise GraphLoadError(f"expected {width} features, got {len(row) - 1}", path, lineno)
            try:
                node = int(row[0])
                vals = [float(x) for x in row[1:]]
            except ValueError as exc:
                raise GraphLoadError(str(exc), path, lineno) from None
            if node in rows:
                raise GraphLoadError(f"duplicate feature row for node {node}", path, lineno)
            rows[node] = vals
    n = len(rows)
    if sorted(rows) != list(range(n)):
        raise GraphLoadError("feature node ids must be exactly 0..n-1", path)
    return np.array([rows[i] for i in range(n)], dtype=np.float64).reshape(n, width)


def load_features(path) -> np.ndarray:
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == FEATURE_MAGIC:
        return read_features_binary(path)
    return _read_features_csv(path)


def _read_labels(path, n: int) -> np.ndarray:
    labels = np.full(n, -1, dtype=np.int64)
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0].strip() == "node_id":
                continue
            try:
                node, cls = int(row[0]), int(row[1])
            except (ValueError, IndexError):
                raise GraphLoadError(f"malformed label row {row!r}", path, lineno) from None
            if not 0 <= node < n:
                raise GraphLoadError(f"dangling node id {node} (graph has {n} nodes)", path, lineno)
            if labels[node] != -1:
                raise GraphLoadError(f"duplicate label for node {node}", path, lineno)
            if cls < 0:
                raise GraphLoadError(f"negative class id {cls}", path, lineno)
            labels[node] = cls
    missing = np.flatnonzero(labels < 0)
    if len(missing):
        raise GraphLoadError(f"no label for node {missing[0]}", path)
    return labels


def _read_edges(path, n: int) -> np.ndarray:
    edges = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise GraphLoadError(f"expected 'u v', got {line!r}", path, lineno)
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphLoadError(f"non-integer node id in {line!r}", path, lineno) from None
            for x in (u, v):
                if not 0 <= x < n:
                    raise GraphLoadError(f"dangling node id {x} (graph has {n} nodes)", path, lineno)
            edges.append((u, v))
    return np.array(edges, dtype=np.int64).reshape(-1, 2)


def load_graph(edge_file, feature_file, label_file) -> AttributedGraph:
    features = load_features(feature_file)
    n = features.shape[0]
    labels = _read_labels(label_file, n)
    edges = _read_edges(edge_file, n)
    return AttributedGraph.from_edges(n, edges, features, labels)


def save_graph(g: AttributedGraph, out_dir, binary_features: bool = True) -> dict[str, Path]:
    """Write edges.txt, features (.bin or .csv) and labels.csv; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"edges": out / "edges.txt", "labels": out / "labels.csv",
             "features": out / ("features.bin" if binary_features else "features.csv")}
    with open(paths["edges"], "w") as fh:
        fh.write("# u v\n")
        fh.writelines(f"{u} {v}\n" for u, v in g.edge_list())
    with open(paths["labels"], "w") as fh:
        fh.write("node_id,class_id\n")
        fh.writelines(f"{i},{c}\n" for i, c in enumerate(g.node_class))
    if binary_features:
        write_features_binary(paths["features"], g.features)
    else:
        with open(paths["features"], "w") as fh:
            fh.write("node_id," + ",".join(f"f{j}" for j in range(g.d)) + "\n")
            for i, row in enumerate(g.features):
                fh.write(f"{i}," + ",".join(repr(float(x)) for x in row) + "\n")
    return paths


# --------------------------------------------------------------------------- sampling

@dataclass(frozen=True)
class SampledBlock:
    """One aggregation layer: ``dst`` nodes read messages from sampled neighbours.

    ``src`` starts with ``dst`` (same order) followed by the newly reached nodes.
    ``nbr_ptr``/``nbr_idx`` are CSR rows over ``dst`` whose entries index into ``src``.
    """

    dst: np.ndarray
    src: np.ndarray
    nbr_ptr: np.ndarray
    nbr_idx: np.ndarray

    @property
    def isolated(self) -> np.ndarray:
        return np.diff(self.nbr_ptr) == 0

    def neighbour_ids(self, i: int) -> np.ndarray:
        return self.src[self.nbr_idx[self.nbr_ptr[i]:self.nbr_ptr[i + 1]]]


@dataclass(frozen=True)
class NeighbourSample:
    """Per-layer sampled neighbourhoods for a set of root nodes.

    ``blocks[0]`` is the input layer (widest); ``blocks[-1].dst`` are the roots.
    """

    layer_fanouts: tuple
    blocks: tuple = field(default=())

    @property
    def roots(self) -> np.ndarray:
        return self.blocks[-1].dst if self.blocks else np.zeros(0, dtype=np.int64)

    @property
    def input_nodes(self) -> np.ndarray:
        return self.blocks[0].src if self.blocks else np.zeros(0, dtype=np.int64)


def _sample_block(g: AttributedGraph, dst: np.ndarray, fanout: int | None,
                  rng: np.random.Generator) -> SampledBlock:
    deg = g.degrees[dst]
    starts = g.offsets[dst]
    seg = np.repeat(np.arange(len(dst)), deg)
    pos = np.arange(deg.sum()) - np.repeat(np.cumsum(deg) - deg, deg)
    cand = g.targets[np.repeat(starts, deg) + pos]
    if fanout is not None and len(cand) and deg.max() > fanout:
        # uniform without replacement: random keys, keep the fanout smallest per row
        keys = rng.random(len(cand))
        order = np.lexsort((keys, seg))
        seg, cand = seg[order], cand[order]
        rank = np.arange(len(seg)) - np.repeat(np.cumsum(deg) - deg, deg)
        keep = rank < fanout
        seg, cand = seg[keep], cand[keep]
    counts = np.bincount(seg, minlength=len(dst))
    ptr = np.zeros(len(dst) + 1, dtype=np.int64)
    np.cumsum(counts, out=ptr[1:])
    # src = dst followed by first occurrences of new nodes
    new = np.setdiff1d(cand, dst, assume_unique=False)
    src = np.concatenate([dst, new])
    lookup = np.full(g.n, -1, dtype=np.int64)
    lookup[src] = np.arange(len(src))
    return SampledBlock(dst, src, ptr, lookup[cand])


def sample_neighbours(g: AttributedGraph, roots, fanouts=(10, 10), rng_seed=0) -> NeighbourSample:
    """Sample a multi-hop neighbourhood for ``roots``.

    ``fanouts`` lists the per-layer caps from the input layer to the output layer;
    ``None`` means "all neighbours". Nodes with degree <= fanout keep every neighbour.
    ``rng_seed`` may be an int or a numpy Generator.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    roots = np.asarray(roots, dtype=np.int64).reshape(-1)
    _, first = np.unique(roots, return_index=True)
    dst = roots[np.sort(first)]
    if len(dst) == 0:
        return NeighbourSample(tuple(fanouts), ())
    blocks = []
    for fan in reversed(tuple(fanouts)):
        block = _sample_block(g, dst, fan, rng)
        blocks.append(block)
        dst = block.src
    return NeighbourSample(tuple(fanouts), tuple(reversed(blocks)))


# --------------------------------------------------------------------------- synthetic data

@dataclass
class SynthConfig:
    """Planted open-set benchmark.

    The normal class is a union of ``normal_groups`` homophilous sub-communities,
    each with its own feature centre (random directions of norm
    ``normal_group_shift`` in the coordinates no anomaly class uses), linked densely
    inside (``p_nn``) and sparsely across (``p_nn_between``). Each anomaly class k
    sits at its own offset (``anomaly_shift`` along a private block of
    ``shift_dims`` coordinates), forms its own community (``p_aa``) and links to
    normal nodes with probability ``p_na``.
    """

    n_normal: int = 2000
    n_anomaly_per_class: int = 100
    n_anomaly_classes: int = 2
    feature_dim: int = 16
    anomaly_shift: float = 1.75
    shift_dims: int = 4
    feature_noise: float = 1.0
    normal_groups: int = 4
    normal_group_shift: float = 3.0
    p_nn: float = 0.02
    p_nn_between: float = 0.0005
    p_na: float = 0.0005
    p_aa: tuple = (0.1, 0.1)
    class_shifts: tuple | None = None

    def validate(self) -> None:
        for name in ("p_nn", "p_nn_between", "p_na"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"{name}={p} is not a probability")
        for p in self._intra_probs():
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"p_aa entry {p} is not a probability")
        if self.n_anomaly_per_class > 0 and self.n_anomaly_classes < 2:
            raise ConfigError("open-set benchmarks need at least 2 anomaly classes")
        if self.p_na > self.p_nn:
            raise ConfigError("p_na must not exceed p_nn")
        if self.n_normal < 1 or self.feature_dim < 1 or self.normal_groups < 1:
            raise ConfigError("need at least one normal node, one normal group and one feature")
        if self.class_shifts is None and self.shift_dims * self.n_anomaly_classes > self.feature_dim:
            raise ConfigError("feature_dim too small for disjoint per-class shift blocks")

    def _intra_probs(self) -> list[float]:
        p = list(self.p_aa) if isinstance(self.p_aa, (list, tuple)) else [self.p_aa]
        return [p[k % len(p)] for k in range(self.n_anomaly_classes)]

    def shift_vectors(self) -> np.ndarray:
        if self.class_shifts is not None:
            s = np.asarray(self.class_shifts, dtype=np.float64)
            if s.shape != (self.n_anomaly_classes, self.feature_dim):
                raise ConfigError("class_shifts must be (n_anomaly_classes, feature_dim)")
            return s
        s = np.zeros((self.n_anomaly_classes, self.feature_dim))
        for k in range(self.n_anomaly_classes):
            s[k, k * self.shift_dims:(k + 1) * self.shift_dims] = self.anomaly_shift
        return s


def _pair_index_to_ij(idx: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    # row i of the strict upper triangle holds n - 1 - i pairs
    row_start = np.concatenate([[0], np.cumsum(np.arange(n - 1, 0, -1))])
    i = np.searchsorted(row_start, idx, side="right") - 1
    j = idx - row_start[i] + i + 1
    return i, j


def _bernoulli_pairs(rng, a: np.ndarray, b: np.ndarray | None, p: float) -> np.ndarray:
    """Each pair of (a x b), or of a's upper triangle if b is None, independently with probability p."""
    if p <= 0.0 or len(a) == 0 or (b is not None and len(b) == 0):
        return np.zeros((0, 2), dtype=np.int64)
    total = len(a) * (len(a) - 1) // 2 if b is None else len(a) * len(b)
    if total == 0:
        return np.zeros((0, 2), dtype=np.int64)
    m = rng.binomial(total, p)
    idx = np.sort(rng.choice(total, size=m, replace=False))
    if b is None:
        i, j = _pair_index_to_ij(idx, len(a))
        return np.stack([a[i], a[j]], axis=1)
    return np.stack([a[idx // len(b)], b[idx % len(b)]], axis=1)


def _normal_group_centres(cfg: SynthConfig, rng) -> np.ndarray:
    used = np.abs(cfg.shift_vectors()).sum(axis=0) > 0 if cfg.n_anomaly_classes else np.zeros(cfg.feature_dim, bool)
    free = np.flatnonzero(~used)
    centres = np.zeros((cfg.normal_groups, cfg.feature_dim))
    if cfg.normal_groups > 1 and len(free):
        dirs = rng.normal(size=(cfg.normal_groups, len(free)))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        centres[:, free] = cfg.normal_group_shift * dirs
    return centres


def generate_synthetic(cfg: SynthConfig | None = None, seed: int = 0) -> AttributedGraph:
    cfg = cfg or SynthConfig()
    cfg.validate()
    rng = np.random.default_rng(seed)
    n_anom = cfg.n_anomaly_per_class * cfg.n_anomaly_classes
    n = cfg.n_normal + n_anom
    node_class = np.zeros(n, dtype=np.int64)
    if n_anom:
        node_class[cfg.n_normal:] = np.repeat(np.arange(1, cfg.n_anomaly_classes + 1), cfg.n_anomaly_per_class)
    group = np.arange(cfg.n_normal) % cfg.normal_groups
    x = rng.normal(0.0, cfg.feature_noise, size=(n, cfg.feature_dim))
    x[:cfg.n_normal] += _normal_group_centres(cfg, rng)[group]
    if n_anom:
        x[cfg.n_normal:] += cfg.shift_vectors()[node_class[cfg.n_normal:] - 1]
    # the binary feature format stores f32; keep generated graphs exactly representable
    x = x.astype(np.float32).astype(np.float64)

    normals = np.arange(cfg.n_normal)
    edges = []
    for j in range(cfg.normal_groups):
        edges.append(_bernoulli_pairs(rng, normals[group == j], None, cfg.p_nn))
        for k in range(j + 1, cfg.normal_groups):
            edges.append(_bernoulli_pairs(rng, normals[group == j], normals[group == k], cfg.p_nn_between))
    for k, p_intra in enumerate(cfg._intra_probs(), start=1):
        members = np.flatnonzero(node_class == k)
        edges.append(_bernoulli_pairs(rng, members, None, p_intra))
        edges.append(_bernoulli_pairs(rng, members, normals, cfg.p_na))
    return AttributedGraph.from_edges(n, np.concatenate(edges), x, node_class)


def separability_auc(g: AttributedGraph, seed: int = 0) -> float:
    """Raw-feature logistic-regression oracle: held-out AUC-ROC with every anomaly class labelled."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import train_test_split
    from sklearn.metrics import roc_auc_score

    y = (g.node_class != 0).astype(int)
    if y.min() == y.max():
        raise ValueError("separability needs both normal and anomaly nodes")
    xtr, xte, ytr, yte = train_test_split(g.features, y, test_size=0.5, random_state=seed, stratify=y)
    clf = LogisticRegression(max_iter=1000).fit(xtr, ytr)
    return float(roc_auc_score(yte, clf.decision_function(xte)))
