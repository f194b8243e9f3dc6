"""Normal structure regularisation: normal-oriented relation sampling, the relation
labelling function, relation fusion and the relation-prediction loss."""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .graph import AttributedGraph
from .numeric import DimensionError, ParamGroup, Tape, Var, glorot, sigmoid

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


class RelationDomainError(ValueError):
    """The pair is none of the three normal-oriented relation kinds."""


class RelationKind(enum.IntEnum):
    CONNECTED_NORMAL = 1
    UNCONNECTED_NORMAL = 2
    UNCONNECTED_NORMAL_TO_UNLABELLED = 3


@dataclass
class NsrConfig:
    alpha: float = 0.8
    batch_relations: int = 512
    use_unconnected_normal: bool = True
    relation_mix: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha={self.alpha} outside [0, 1]")
        if self.batch_relations < 0:
            raise ValueError("batch_relations must be non-negative")


class LabelledSets(NamedTuple):
    normals: frozenset
    anomalies: frozenset


@dataclass(frozen=True)
class RelationSample:
    v: int
    u: int
    kind: RelationKind
    c: float


@dataclass(frozen=True)
class RelationBatch:
    v: np.ndarray
    u: np.ndarray
    kind: np.ndarray
    c: np.ndarray

    @classmethod
    def empty(cls) -> "RelationBatch":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), np.zeros(0))

    def __len__(self) -> int:
        return len(self.v)

    def __iter__(self) -> Iterator[RelationSample]:
        for v, u, k, c in zip(self.v, self.u, self.kind, self.c):
            yield RelationSample(int(v), int(u), RelationKind(int(k)), float(c))


def label_relation(g: AttributedGraph, v: int, u: int, labelled_sets: LabelledSets, alpha: float) -> float:
    normals, anomalies = labelled_sets
    if v == u:
        raise RelationDomainError(f"self pair ({v}, {u})")
    if v not in normals:
        raise RelationDomainError(f"source node {v} is not a labelled normal")
    connected = g.has_edge(v, u)
    if u in normals:
        return 1.0 if connected else float(alpha)
    if u in anomalies:
        raise RelationDomainError(f"({v}, {u}) pairs a labelled normal with a labelled anomaly")
    if connected:
        raise RelationDomainError(f"({v}, {u}) links a labelled normal to an unlabelled neighbour")
    return 0.0


def _quotas(cfg: NsrConfig, n_connected_available: int) -> tuple[int, int, int]:
    w = np.asarray(cfg.relation_mix, dtype=np.float64)
    share = [int(np.floor(cfg.batch_relations * wi / w.sum())) for wi in w]
    k1 = min(share[0], n_connected_available)
    short = share[0] - k1
    k2 = share[1] + short // 2
    k3 = share[2] + short - short // 2
    if not cfg.use_unconnected_normal:
        k2 = 0
    return k1, k2, k3


def _pick_pairs(rng, pool: np.ndarray, k: int) -> np.ndarray:
    if k >= len(pool):
        return pool
    return pool[np.sort(rng.choice(len(pool), size=k, replace=False))]


def _rejection_pairs(rng, g: AttributedGraph, src: np.ndarray, dst: np.ndarray, k: int,
                     max_rounds: int = 50) -> np.ndarray:
    """Up to k distinct unconnected (v, u) pairs, v from src, u from dst, v != u."""
    out = np.zeros((0, 2), dtype=np.int64)
    if k == 0 or len(src) == 0 or len(dst) == 0:
        return out
    for _ in range(max_rounds):
        need = k - len(out)
        if need == 0:
            break
        cand = np.stack([src[rng.integers(0, len(src), size=2 * need)],
                         dst[rng.integers(0, len(dst), size=2 * need)]], axis=1)
        cand = cand[(cand[:, 0] != cand[:, 1]) & ~g.has_edges(cand[:, 0], cand[:, 1])]
        merged = np.concatenate([out, cand])
        _, first = np.unique(merged[:, 0] * g.n + merged[:, 1], return_index=True)
        out = merged[np.sort(first)][:k]
    return out


def _connected_normal_pairs(g: AttributedGraph, normals: np.ndarray) -> np.ndarray:
    is_normal = np.zeros(g.n, dtype=bool)
    is_normal[normals] = True
    deg = g.degrees[normals]
    src = np.repeat(normals, deg)
    dst = np.concatenate([g.neighbours(v) for v in normals]) if len(normals) else np.zeros(0, np.int64)
    keep = is_normal[dst]
    return np.stack([src[keep], dst[keep]], axis=1).astype(np.int64)


def _unconnected_normal_pairs(rng, g: AttributedGraph, normals: np.ndarray, k: int) -> np.ndarray:
    if len(normals) <= 500:
        vs, us = np.meshgrid(normals, normals, indexing="ij")
        pool = np.stack([vs.ravel(), us.ravel()], axis=1)
        pool = pool[pool[:, 0] != pool[:, 1]]
        pool = pool[~g.has_edges(pool[:, 0], pool[:, 1])]
        return _pick_pairs(rng, pool, k)
    return _rejection_pairs(rng, g, normals, normals, k)


def sample_relations(g: AttributedGraph, labelled_normals, labelled_anomalies, cfg: NsrConfig,
                     rng_seed=0) -> RelationBatch:
    """Draw up to ``cfg.batch_relations`` normal-oriented relations with their labels."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    normals = np.unique(np.asarray(list(labelled_normals), dtype=np.int64))
    anomalies = np.unique(np.asarray(list(labelled_anomalies), dtype=np.int64))
    if len(normals) == 0:
        raise ValueError("relation sampling needs at least one labelled normal")
    kind1_pool = _connected_normal_pairs(g, normals)
    if len(kind1_pool) == 0:
        log.warning("no edges among labelled normals; no connected-normal relations")
    k1, k2, k3 = _quotas(cfg, len(kind1_pool))
    p1 = _pick_pairs(rng, kind1_pool, k1)
    p2 = _unconnected_normal_pairs(rng, g, normals, k2) if k2 else np.zeros((0, 2), np.int64)
    if len(p2) < k2:
        k3 += k2 - len(p2)
    labelled = np.zeros(g.n, dtype=bool)
    labelled[normals] = True
    labelled[anomalies] = True
    p3 = _rejection_pairs(rng, g, normals, np.flatnonzero(~labelled), k3)
    pairs = np.concatenate([p1, p2, p3]).reshape(-1, 2)
    kinds = np.concatenate([np.full(len(p1), 1), np.full(len(p2), 2), np.full(len(p3), 3)]).astype(np.int64)
    c = np.select([kinds == 1, kinds == 2], [1.0, cfg.alpha], 0.0).astype(np.float64)
    return RelationBatch(pairs[:, 0].copy(), pairs[:, 1].copy(), kinds, c)


# --------------------------------------------------------------------------- relation head

@dataclass
class NsrParams:
    w_r: ParamGroup
    f_hidden: ParamGroup
    f_hidden_b: ParamGroup
    f_out: ParamGroup
    f_out_b: ParamGroup

    @classmethod
    def init(cls, width: int, rng: np.random.Generator, hidden: int | None = None) -> "NsrParams":
        hidden = hidden or width
        return cls(ParamGroup("nsr.w_r", glorot(rng, width, width)),
                   ParamGroup("nsr.f.w1", glorot(rng, width, hidden)),
                   ParamGroup("nsr.f.b1", np.zeros((1, hidden))),
                   ParamGroup("nsr.f.w2", glorot(rng, hidden, 1)),
                   ParamGroup("nsr.f.b2", np.zeros((1, 1))))

    def groups(self) -> list[ParamGroup]:
        return [self.w_r, self.f_hidden, self.f_hidden_b, self.f_out, self.f_out_b]

    def relation_groups(self) -> list[ParamGroup]:
        return [self.f_hidden, self.f_hidden_b, self.f_out, self.f_out_b]


def relation_embed(z_v: np.ndarray, z_u: np.ndarray, w_r: np.ndarray) -> np.ndarray:
    """h_r = (sigmoid(z_v) W_r) * sigmoid(z_u), row-wise for stacked pairs."""
    z_v = np.atleast_2d(z_v)
    z_u = np.atleast_2d(z_u)
    if z_v.shape != z_u.shape or z_v.shape[1] != w_r.shape[0] or w_r.shape[0] != w_r.shape[1]:
        raise DimensionError(f"relation_embed got z_v {z_v.shape}, z_u {z_u.shape}, W_r {w_r.shape}")
    return (sigmoid(z_v) @ w_r) * sigmoid(z_u)


def relation_embed_tape(tape: Tape, z_v: Var, z_u: Var, params: NsrParams) -> Var:
    if z_v.shape[1] != params.w_r.shape[0]:
        raise DimensionError(f"relation_embed got width {z_v.shape[1]}, W_r is {params.w_r.shape}")
    return tape.mul(tape.matmul(tape.sigmoid(z_v), tape.param(params.w_r)), tape.sigmoid(z_u))


def relation_predict_tape(tape: Tape, h: Var, params: NsrParams) -> Var:
    a = tape.relu(tape.add(tape.matmul(h, tape.param(params.f_hidden)), tape.param(params.f_hidden_b)))
    return tape.sigmoid(tape.add(tape.matmul(a, tape.param(params.f_out)), tape.param(params.f_out_b)))


def relation_predict(h: np.ndarray, params: NsrParams) -> np.ndarray:
    a = np.maximum(h @ params.f_hidden.value + params.f_hidden_b.value, 0.0)
    return sigmoid(a @ params.f_out.value + params.f_out_b.value)


def soft_bce(p, c) -> np.ndarray:
    """Per-relation cross-entropy against soft labels, probabilities clamped."""
    q = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    c = np.asarray(c, dtype=np.float64).reshape(q.shape)
    return -(c * np.log(q) + (1.0 - c) * np.log(1.0 - q))


def nsr_loss(relations: RelationBatch, h: np.ndarray, params: NsrParams) -> float:
    if len(relations) == 0:
        log.warning("empty relation batch contributes nothing to the objective")
        return 0.0
    p = relation_predict(h, params)
    return float(soft_bce(p, relations.c.reshape(-1, 1)).mean())


def nsr_loss_tape(tape: Tape, relations: RelationBatch, z_v: Var, z_u: Var, params: NsrParams) -> Var | None:
    """Mean relation BCE recorded on the tape; None for an empty batch."""
    if len(relations) == 0:
        log.warning("empty relation batch contributes nothing to the objective")
        return None
    h = relation_embed_tape(tape, z_v, z_u, params)
    p = relation_predict_tape(tape, h, params)
    return tape.mean(tape.bce(p, relations.c.reshape(-1, 1), clamp=PROB_CLAMP))
