"""Anomaly-scoring heads, their supervised losses, and detector composition.

Every head maps node representations to scores where larger means more
anomalous. The relation module, when enabled, only adds a training term; the
scoring path is encoder -> head in all cases.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field

import numpy as np

from .encoder import EncoderParams, encode_sample
from .graph import AttributedGraph, sample_neighbours
from .nsr import PROB_CLAMP, NsrParams, soft_bce
from .numeric import DimensionError, NumericError, ParamGroup, Tape, Var, glorot, sigmoid

log = logging.getLogger(__name__)

DEVIATION_MARGIN = 5.0
HYPERSPHERE_EPS = 1e-6


class HeadVariant(str, enum.Enum):
    BCE = "bce"
    DEVIATION = "deviation"
    HYPERSPHERE = "hypersphere"


@dataclass
class ScoringHead:
    variant: HeadVariant
    params: list[ParamGroup] = field(default_factory=list)
    centre: np.ndarray | None = None

    @classmethod
    def init(cls, variant, width: int, rng: np.random.Generator, hidden: int | None = None) -> "ScoringHead":
        variant = HeadVariant(variant)
        if variant is HeadVariant.HYPERSPHERE:
            return cls(variant, [], np.zeros(width))
        hidden = hidden or width
        return cls(variant, [ParamGroup("head.w1", glorot(rng, width, hidden)),
                             ParamGroup("head.b1", np.zeros((1, hidden))),
                             ParamGroup("head.w2", glorot(rng, hidden, 1)),
                             ParamGroup("head.b2", np.zeros((1, 1)))])

    @property
    def in_dim(self) -> int:
        if self.variant is HeadVariant.HYPERSPHERE:
            return len(self.centre)
        return self.params[0].shape[0]

    def groups(self) -> list[ParamGroup]:
        return list(self.params)

    def forward_tape(self, tape: Tape, z: Var) -> Var:
        """Scores as an (n, 1) Var."""
        if z.shape[1] != self.in_dim:
            raise DimensionError(f"head expects width {self.in_dim}, got {z.shape[1]}")
        if self.variant is HeadVariant.HYPERSPHERE:
            return tape.sq_norm_rows(tape.sub(z, tape.const(self.centre.reshape(1, -1))))
        w1, b1, w2, b2 = (tape.param(p) for p in self.params)
        a = tape.relu(tape.add(tape.matmul(z, w1), b1))
        out = tape.add(tape.matmul(a, w2), b2)
        return tape.sigmoid(out) if self.variant is HeadVariant.BCE else out


def score(z: np.ndarray, head: ScoringHead) -> np.ndarray:
    """Anomaly score per row of ``z``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != head.in_dim:
        raise DimensionError(f"head expects width {head.in_dim}, got {z.shape[1]}")
    if head.variant is HeadVariant.HYPERSPHERE:
        diff = z - head.centre
        return (diff * diff).sum(axis=1)
    w1, b1, w2, b2 = (p.value for p in head.params)
    out = (np.maximum(z @ w1 + b1, 0.0) @ w2 + b2).ravel()
    return sigmoid(out) if head.variant is HeadVariant.BCE else out


# --------------------------------------------------------------------------- losses

def ad_loss_bce(scores, labels) -> float:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    if scores.size == 0:
        raise ValueError("the anomaly-detection batch is empty")
    return float(soft_bce(scores, np.asarray(labels, dtype=np.float64).ravel()).mean())


def deviation_prior(rng: np.random.Generator, prior_draws: int = 5000) -> tuple[float, float]:
    if prior_draws < 1000:
        raise ValueError(f"prior_draws={prior_draws}; need at least 1000")
    ref = rng.standard_normal(prior_draws)
    return float(ref.mean()), float(ref.std())


def _prior_stats(prior) -> tuple[float, float]:
    """Accept either a (mean, std) pair or the raw reference draws."""
    if isinstance(prior, np.ndarray) and prior.size > 2:
        if prior.size < 1000:
            raise ValueError(f"{prior.size} prior draws; need at least 1000")
        mu, sigma = float(prior.mean()), float(prior.std())
    else:
        mu, sigma = (float(x) for x in prior)
    if not sigma > 0.0:
        raise NumericError("reference score prior has zero spread")
    return mu, sigma


def ad_loss_deviation(scores, labels, prior, margin: float = DEVIATION_MARGIN) -> float:
    """Deviation loss against a fixed reference prior: draws, or their (mean, std)."""
    mu, sigma = _prior_stats(prior)
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels, dtype=np.float64).ravel()
    dev = (s - mu) / sigma
    return float(np.mean((1.0 - y) * np.abs(dev) + y * np.maximum(0.0, margin - dev)))


def ad_loss_hypersphere(z_normal, z_anomaly, centre, eta_weight: float = 1.0, eps: float = HYPERSPHERE_EPS) -> float:
    centre = np.asarray(centre, dtype=np.float64).ravel()
    total = 0.0
    zn = np.atleast_2d(np.asarray(z_normal, dtype=np.float64))
    za = np.atleast_2d(np.asarray(z_anomaly, dtype=np.float64))
    if zn.size:
        total += float(((zn - centre) ** 2).sum(axis=1).mean())
    if za.size:
        total += eta_weight * float((1.0 / (((za - centre) ** 2).sum(axis=1) + eps)).mean())
    return total


def ad_loss_bce_tape(tape: Tape, scores: Var, labels) -> Var:
    if scores.value.size == 0:
        raise ValueError("the anomaly-detection batch is empty")
    return tape.mean(tape.bce(scores, np.asarray(labels, dtype=np.float64).reshape(-1, 1), clamp=PROB_CLAMP))


def ad_loss_deviation_tape(tape: Tape, scores: Var, labels, prior, margin: float = DEVIATION_MARGIN) -> Var:
    mu, sigma = _prior_stats(prior)
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    dev = tape.scale(tape.shift(scores, -mu), 1.0 / sigma)
    inlier = tape.mul(tape.const(1.0 - y), tape.abs(dev))
    outlier = tape.mul(tape.const(y), tape.relu(tape.shift(tape.scale(dev, -1.0), margin)))
    return tape.mean(tape.add(inlier, outlier))


def ad_loss_hypersphere_tape(tape: Tape, z: Var, labels, centre: np.ndarray, eta_weight: float = 1.0,
                             eps: float = HYPERSPHERE_EPS) -> Var:
    y = np.asarray(labels).ravel().astype(bool)
    dist = tape.sq_norm_rows(tape.sub(z, tape.const(centre.reshape(1, -1))))
    terms = []
    if (~y).any():
        terms.append(tape.mean(tape.rows(dist, np.flatnonzero(~y))))
    if y.any():
        inv = tape.mean(tape.reciprocal(tape.shift(tape.rows(dist, np.flatnonzero(y)), eps)))
        terms.append(tape.scale(inv, eta_weight))
    out = terms[0]
    for t in terms[1:]:
        out = tape.add(out, t)
    return out


# --------------------------------------------------------------------------- composition

@dataclass
class Detector:
    """Encoder plus scoring head, optionally trained with the relation regulariser."""

    encoder: EncoderParams
    head: ScoringHead
    nsr: NsrParams
    nsr_enabled: bool

    def groups(self) -> list[ParamGroup]:
        return self.encoder.groups() + self.head.groups() + self.nsr.groups()

    def embed(self, g: AttributedGraph, nodes, fanouts=None, seed=0, chunk: int = 4096) -> np.ndarray:
        """Representations for ``nodes``; ``fanouts=None`` uses full neighbourhoods."""
        nodes = np.asarray(nodes, dtype=np.int64).reshape(-1)
        depth = len(self.encoder.sage)
        fans = tuple(fanouts) if fanouts is not None else (None,) * depth
        rng = np.random.default_rng(seed)
        out = np.zeros((len(nodes), self.encoder.out_dim))
        for start in range(0, len(nodes), chunk):
            part = nodes[start:start + chunk]
            sample = sample_neighbours(g, part, fans, rng)
            z = encode_sample(Tape(), g, sample, self.encoder).value
            pos = np.full(g.n, -1, dtype=np.int64)
            pos[sample.roots] = np.arange(len(sample.roots))
            out[start:start + len(part)] = z[pos[part]]
        return out

    def score_nodes(self, g: AttributedGraph, nodes, fanouts=None, seed=0) -> np.ndarray:
        return score(self.embed(g, nodes, fanouts, seed), self.head)


def compose(encoder: EncoderParams, head: ScoringHead, nsr_enabled: bool, nsr: NsrParams | None = None,
            rng: np.random.Generator | None = None) -> Detector:
    if encoder.out_dim != head.in_dim:
        raise DimensionError(f"encoder emits width {encoder.out_dim}, head expects {head.in_dim}")
    if nsr is None:
        nsr = NsrParams.init(encoder.out_dim, rng if rng is not None else np.random.default_rng(0))
    elif nsr.w_r.shape[0] != encoder.out_dim:
        raise DimensionError(f"relation head expects width {nsr.w_r.shape[0]}, encoder emits {encoder.out_dim}")
    return Detector(encoder, head, nsr, bool(nsr_enabled))
