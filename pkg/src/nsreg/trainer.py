"""Joint training of the detector and the relation regulariser, plus checkpoints."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detectors import (Detector, HeadVariant, ScoringHead, ad_loss_bce_tape, ad_loss_deviation_tape,
                        ad_loss_hypersphere_tape, compose, deviation_prior)
from .encoder import EncoderParams, encode_sample
from .graph import AttributedGraph, ConfigError, NeighbourSample, sample_neighbours
from .nsr import NsrConfig, NsrParams, RelationBatch, nsr_loss_tape, sample_relations
from .numeric import AdamConfig, ParamGroup, Tape, Var, adam_step
from .canon import canonical_json

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NSRC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    learning_rate: float = 1e-3
    b_ad_normals: int = 512
    batch_relations: int = 512
    n_labelled_anomalies: int = 50
    labelled_normal_fraction: float = 0.05
    alpha: float = 0.8
    seed: int = 0
    head: str = "bce"
    nsr_enabled: bool = True
    use_unconnected_normal: bool = True
    nsr_weight: float = 1.0
    hidden: int = 64
    fanouts: tuple = (10, 10)
    aggregator_combine: str = "sum"
    relation_mix: tuple = (1.0, 1.0, 1.0)
    prior_draws: int = 5000
    deviation_margin: float = 5.0
    hypersphere_eta: float = 1.0

    def __post_init__(self):
        self.fanouts = tuple(self.fanouts)
        self.relation_mix = tuple(self.relation_mix)
        try:
            HeadVariant(self.head)
        except ValueError:
            raise ConfigError(f"unknown head {self.head!r}") from None
        if self.epochs < 0 or self.learning_rate < 0:
            raise ConfigError("epochs and learning_rate must be non-negative")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha={self.alpha} outside [0, 1]")
        if self.b_ad_normals < 1:
            raise ConfigError("b_ad_normals must be positive")
        if not 0.0 < self.labelled_normal_fraction <= 1.0:
            raise ConfigError("labelled_normal_fraction must be in (0, 1]")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def nsr_config(self) -> NsrConfig:
        return NsrConfig(self.alpha, self.batch_relations, self.use_unconnected_normal, self.relation_mix)

    @property
    def adam(self) -> AdamConfig:
        return AdamConfig(learning_rate=self.learning_rate)


@dataclass
class ModelState:
    config: TrainConfig
    detector: Detector
    rng: np.random.Generator
    iteration: int = 0

    def groups(self) -> list[ParamGroup]:
        return self.detector.groups()


@dataclass
class Batch:
    ad_nodes: np.ndarray
    y: np.ndarray
    relations: RelationBatch
    sample: NeighbourSample
    prior: tuple[float, float] | None = None


def steps_per_epoch(split, cfg: TrainConfig) -> int:
    return max(1, math.ceil(len(split.labelled_normals) / cfg.b_ad_normals))


def build_detector(in_dim: int, cfg: TrainConfig, rng: np.random.Generator) -> Detector:
    enc = EncoderParams.init(in_dim, rng, cfg.hidden, len(cfg.fanouts), cfg.aggregator_combine)
    head = ScoringHead.init(cfg.head, cfg.hidden, rng)
    nsr = NsrParams.init(cfg.hidden, rng)
    return compose(enc, head, cfg.nsr_enabled, nsr)


def init_state(g: AttributedGraph, split, cfg: TrainConfig) -> ModelState:
    head = HeadVariant(cfg.head)
    if head is not HeadVariant.HYPERSPHERE and len(split.labelled_anomalies) == 0:
        raise ConfigError(f"the {head.value} head needs labelled anomalies")
    if len(split.labelled_normals) == 0:
        raise ConfigError("no labelled normal nodes")
    rng = np.random.default_rng(cfg.seed)
    det = build_detector(g.d, cfg, rng)
    if head is HeadVariant.HYPERSPHERE:
        # centre fixed from one untrained pass over the labelled normals
        det.head.centre = det.embed(g, split.labelled_normals).mean(axis=0)
    return ModelState(cfg, det, rng, 0)


def build_batch(g: AttributedGraph, split, state: ModelState, rng: np.random.Generator | None = None) -> Batch:
    cfg = state.config
    rng = rng if rng is not None else state.rng
    normals = np.asarray(split.labelled_normals, dtype=np.int64)
    anomalies = np.asarray(split.labelled_anomalies, dtype=np.int64)
    bn = min(cfg.b_ad_normals, len(normals))
    picked = normals if bn == len(normals) else np.sort(rng.choice(normals, size=bn, replace=False))
    ad_nodes = np.concatenate([picked, anomalies])
    y = np.concatenate([np.zeros(len(picked)), np.ones(len(anomalies))])
    if state.detector.nsr_enabled:
        rel = sample_relations(g, normals, anomalies, cfg.nsr_config, rng)
    else:
        rel = RelationBatch.empty()
    prior = None
    if HeadVariant(cfg.head) is HeadVariant.DEVIATION:
        prior = deviation_prior(rng, cfg.prior_draws)
    roots = np.concatenate([ad_nodes, rel.v, rel.u])
    sample = sample_neighbours(g, roots, cfg.fanouts, rng)
    return Batch(ad_nodes, y, rel, sample, prior)


def objective(tape: Tape, g: AttributedGraph, batch: Batch, detector: Detector, cfg: TrainConfig,
              ad_weight: float = 1.0, nsr_weight: float | None = None) -> tuple[Var, Var, Var | None]:
    """Record the joint objective; returns (total, ad_term, nsr_term or None)."""
    nsr_weight = cfg.nsr_weight if nsr_weight is None else nsr_weight
    z = encode_sample(tape, g, batch.sample, detector.encoder)
    pos = np.full(g.n, -1, dtype=np.int64)
    pos[batch.sample.roots] = np.arange(len(batch.sample.roots))
    z_ad = tape.rows(z, pos[batch.ad_nodes])
    head = detector.head
    if head.variant is HeadVariant.HYPERSPHERE:
        ad = ad_loss_hypersphere_tape(tape, z_ad, batch.y, head.centre, cfg.hypersphere_eta)
    elif head.variant is HeadVariant.DEVIATION:
        ad = ad_loss_deviation_tape(tape, head.forward_tape(tape, z_ad), batch.y, batch.prior, cfg.deviation_margin)
    else:
        ad = ad_loss_bce_tape(tape, head.forward_tape(tape, z_ad), batch.y)
    total = tape.scale(ad, ad_weight) if ad_weight != 1.0 else ad
    nsr = None
    if detector.nsr_enabled and len(batch.relations):
        z_v = tape.rows(z, pos[batch.relations.v])
        z_u = tape.rows(z, pos[batch.relations.u])
        nsr = nsr_loss_tape(tape, batch.relations, z_v, z_u, detector.nsr)
        total = tape.add(total, tape.scale(nsr, nsr_weight) if nsr_weight != 1.0 else nsr)
    return total, ad, nsr


def train_step(g: AttributedGraph, split, state: ModelState, rng: np.random.Generator | None = None
               ) -> tuple[ModelState, float, float]:
    """One iteration; Adam only touches groups the objective actually reaches."""
    batch = build_batch(g, split, state, rng)
    tape = Tape()
    total, ad, nsr = objective(tape, g, batch, state.detector, state.config)
    tape.backward(total)
    adam = state.config.adam
    for group in tape.groups:
        adam_step(group, adam)
    state.iteration += 1
    return state, ad.item(), (nsr.item() if nsr is not None else 0.0)


@dataclass
class LossRecord:
    iteration: int
    ad_loss: float
    nsr_loss: float

    @property
    def total(self) -> float:
        return self.ad_loss + self.nsr_loss


def train(g: AttributedGraph, split, cfg: TrainConfig, state: ModelState | None = None,
          stop_at: int | None = None) -> tuple[ModelState, list[LossRecord]]:
    """Run ``epochs * steps_per_epoch`` iterations (or resume ``state`` up to ``stop_at``)."""
    state = state or init_state(g, split, cfg)
    total = cfg.epochs * steps_per_epoch(split, cfg)
    end = total if stop_at is None else min(stop_at, total)
    history = []
    while state.iteration < end:
        it = state.iteration
        _, ad, ns = train_step(g, split, state)
        history.append(LossRecord(it, ad, ns))
    return state, history


# --------------------------------------------------------------------------- checkpoints

def _named_blocks(state: ModelState) -> list[tuple[str, np.ndarray]]:
    blocks = []
    for gr in state.groups():
        blocks += [(gr.name, gr.value), (gr.name + "#adam_m", gr.adam_m), (gr.name + "#adam_v", gr.adam_v)]
    if state.detector.head.centre is not None:
        blocks.append(("head.centre", state.detector.head.centre.reshape(1, -1)))
    return blocks


def _rng_state_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def checkpoint_bytes(state: ModelState) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    cfg = canonical_json(state.config.to_dict()).encode()
    parts += [struct.pack("<Q", len(cfg)), cfg]
    blocks = _named_blocks(state)
    parts.append(struct.pack("<I", len(blocks)))
    for name, arr in blocks:
        raw = name.encode()
        parts += [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
        parts += [struct.pack("<Q", s) for s in arr.shape]
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    meta = canonical_json({
        "in_dim": state.detector.encoder.in_dim,
        "iteration": state.iteration,
        "nsr_enabled": state.detector.nsr_enabled,
        "rng": _rng_state_json(state.rng),
        "step_counts": {gr.name: gr.step_count for gr in state.groups()},
    }).encode()
    parts += [struct.pack("<Q", len(meta)), meta]
    return b"".join(parts)


def save_checkpoint(state: ModelState, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, k: int) -> bytes:
        if self.pos + k > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        out = self.raw[self.pos:self.pos + k]
        self.pos += k
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> ModelState:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    (clen,) = r.unpack("<Q")
    cfg = TrainConfig.from_dict(json.loads(r.take(clen)))
    (nblocks,) = r.unpack("<I")
    blocks = {}
    for _ in range(nblocks):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack("<" + "Q" * ndim) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        blocks[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    (mlen,) = r.unpack("<Q")
    meta = json.loads(r.take(mlen))
    if r.pos != len(r.raw):
        raise CheckpointError("trailing bytes after checkpoint")

    det = build_detector(meta["in_dim"], cfg, np.random.default_rng(0))
    det.nsr_enabled = meta["nsr_enabled"]
    for gr in det.groups():
        try:
            value, m, v = blocks[gr.name], blocks[gr.name + "#adam_m"], blocks[gr.name + "#adam_v"]
        except KeyError:
            raise CheckpointError(f"checkpoint lacks parameter block {gr.name!r}") from None
        if value.shape != gr.shape:
            raise CheckpointError(f"{gr.name}: shape {value.shape}, expected {gr.shape}")
        gr.value[...] = value
        gr.adam_m[...] = m
        gr.adam_v[...] = v
        gr.step_count = int(meta["step_counts"][gr.name])
    if "head.centre" in blocks:
        det.head.centre = blocks["head.centre"].reshape(-1).copy()
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return ModelState(cfg, det, rng, int(meta["iteration"]))
