"""Two-layer mean-aggregator GraphSAGE followed by a two-layer projection network."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .graph import AttributedGraph, NeighbourSample, SampledBlock
from .numeric import DimensionError, ParamGroup, Tape, Var, glorot


@dataclass
class EncoderParams:
    sage: list[dict[str, ParamGroup]]
    proj: list[dict[str, ParamGroup]]
    combine: str = "sum"

    @classmethod
    def init(cls, in_dim: int, rng: np.random.Generator, hidden: int = 64, n_layers: int = 2,
             combine: str = "sum") -> "EncoderParams":
        if combine not in ("sum", "concat"):
            raise ValueError(f"aggregator_combine must be 'sum' or 'concat', not {combine!r}")
        sage = []
        width = in_dim
        for i in range(n_layers):
            p = f"enc.sage{i}"
            if combine == "sum":
                layer = {"self": ParamGroup(f"{p}.w_self", glorot(rng, width, hidden)),
                         "neigh": ParamGroup(f"{p}.w_neigh", glorot(rng, width, hidden))}
            else:
                layer = {"cat": ParamGroup(f"{p}.w_cat", glorot(rng, 2 * width, hidden))}
            layer["bias"] = ParamGroup(f"{p}.b", np.zeros((1, hidden)))
            sage.append(layer)
            width = hidden
        proj = [{"w": ParamGroup(f"enc.proj{i}.w", glorot(rng, hidden, hidden)),
                 "bias": ParamGroup(f"enc.proj{i}.b", np.zeros((1, hidden)))} for i in range(2)]
        return cls(sage, proj, combine)

    @property
    def in_dim(self) -> int:
        first = self.sage[0]
        return first["self"].shape[0] if "self" in first else first["cat"].shape[0] // 2

    @property
    def out_dim(self) -> int:
        return self.proj[-1]["w"].shape[1]

    def groups(self) -> list[ParamGroup]:
        out = []
        for layer in self.sage + self.proj:
            out.extend(layer.values())
        return out


def mean_aggregator(block: SampledBlock) -> sp.csr_matrix:
    """Row-normalised (dst x src) matrix; isolated rows stay all-zero."""
    counts = np.diff(block.nbr_ptr).astype(np.float64)
    data = np.repeat(np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0), np.diff(block.nbr_ptr))
    return sp.csr_matrix((data, block.nbr_idx, block.nbr_ptr), shape=(len(block.dst), len(block.src)))


def _dense(tape: Tape, x: Var, layer: dict[str, ParamGroup], relu: bool) -> Var:
    out = tape.add(tape.matmul(x, tape.param(layer["w"])), tape.param(layer["bias"]))
    return tape.relu(out) if relu else out


def encode_sample(tape: Tape, g: AttributedGraph, sample: NeighbourSample, params: EncoderParams) -> Var:
    """Embeddings for ``sample.roots`` (in that order), recorded on ``tape``."""
    if g.d != params.in_dim:
        raise DimensionError(f"graph has {g.d} features but the encoder expects {params.in_dim}")
    if len(sample.blocks) != len(params.sage):
        raise DimensionError(f"sample has {len(sample.blocks)} layers, encoder has {len(params.sage)}")
    h = tape.const(g.features[sample.input_nodes])
    for block, layer in zip(sample.blocks, params.sage):
        agg = mean_aggregator(block)
        self_h = tape.rows(h, np.arange(len(block.dst))) if len(block.dst) != len(block.src) else h
        neigh_h = tape.spmm(agg, h)
        if params.combine == "sum":
            pre = tape.add(tape.matmul(self_h, tape.param(layer["self"])),
                           tape.matmul(neigh_h, tape.param(layer["neigh"])))
        else:
            pre = tape.matmul(tape.hstack(self_h, neigh_h), tape.param(layer["cat"]))
        h = tape.relu(tape.add(pre, tape.param(layer["bias"])))
    h = _dense(tape, h, params.proj[0], relu=True)
    return _dense(tape, h, params.proj[1], relu=False)


def encode(g: AttributedGraph, nodes, sample: NeighbourSample, params: EncoderParams,
           tape: Tape | None = None) -> Var | np.ndarray:
    """z_v for each requested node, rows in request order.

    Without a tape the plain matrix is returned; with one, a recorded Var.
    """
    own = tape is None
    tape = tape or Tape()
    nodes = np.asarray(nodes, dtype=np.int64).reshape(-1)
    roots = sample.roots
    lookup = {int(v): i for i, v in enumerate(roots)}
    try:
        pos = np.array([lookup[int(v)] for v in nodes], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"node {exc.args[0]} is not a root of the neighbour sample") from None
    z = encode_sample(tape, g, sample, params)
    if not np.array_equal(pos, np.arange(len(roots))):
        z = tape.rows(z, pos)
    return z.value if own else z
