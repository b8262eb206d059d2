"""Visual-to-language connectors, sink-aware reordering and sequence assembly."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ArgumentError, DimensionError
from .models import ParamModule
from .sequence import Role, TokenSequence
from .tensor import Tensor


class MlpConnector(ParamModule):
    """Two linear maps D' -> hidden -> D with a GELU in between."""

    def __init__(self, in_dim: int = 32, out_dim: int = 48, hidden: int | None = None, seed: int = 0,
                 trainable: bool = True):
        super().__init__()
        hidden = hidden or out_dim
        rng = np.random.default_rng(seed)
        self.in_dim, self.out_dim, self.trainable = in_dim, out_dim, trainable
        self.params["w1"] = Tensor(rng.normal(0, 1 / np.sqrt(in_dim), (in_dim, hidden)).astype(np.float32))
        self.params["b1"] = Tensor(np.zeros(hidden, np.float32))
        self.params["w2"] = Tensor(rng.normal(0, 1 / np.sqrt(hidden), (hidden, out_dim)).astype(np.float32))
        self.params["b2"] = Tensor(np.zeros(out_dim, np.float32))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"connector expects dim {self.in_dim}, got {x.shape[-1]}")
        p = self.params
        h = T.gelu(T.add(T.matmul(x, p["w1"]), p["b1"]))
        return T.add(T.matmul(h, p["w2"]), p["b2"])


class ProjectorPair:
    """Independent connectors for sink and non-sink visual tokens."""

    def __init__(self, sink_mlp: MlpConnector, nonsink_mlp: MlpConnector, tied: bool = False):
        shared = {id(t) for t in sink_mlp.parameters()} & {id(t) for t in nonsink_mlp.parameters()}
        if shared and not tied:
            raise ArgumentError("sink and non-sink connectors must not share parameters")
        self.sink_mlp = sink_mlp
        self.nonsink_mlp = nonsink_mlp
        self.tied = tied

    @classmethod
    def create(cls, in_dim: int, out_dim: int, seed: int = 0) -> "ProjectorPair":
        return cls(MlpConnector(in_dim, out_dim, seed=seed), MlpConnector(in_dim, out_dim, seed=seed + 1))

    @classmethod
    def tied_to(cls, mlp: MlpConnector) -> "ProjectorPair":
        """Both roles backed by one connector; only for equivalence tests."""
        return cls(mlp, mlp, tied=True)


class Placement(str, Enum):
    FRONT = "front"
    END = "end"
    NONE = "none"


class PositionPolicy(str, Enum):
    TRANSPORT = "transport"
    REASSIGN = "reassign"


@dataclass(frozen=True)
class ReorderPlan:
    placement: Placement = Placement.FRONT
    position_ids: PositionPolicy = PositionPolicy.TRANSPORT

    @classmethod
    def from_config(cls, cfg: dict) -> "ReorderPlan":
        return cls(
            Placement(cfg.get("reorder.placement", "front")),
            PositionPolicy(cfg.get("reorder.position_ids", "transport")),
        )

    def permutation(self, n: int, sinks) -> np.ndarray:
        sinks = np.asarray(sorted(set(int(i) for i in sinks)), dtype=np.int64)
        if sinks.size and (sinks[0] < 0 or sinks[-1] >= n):
            raise ArgumentError(f"sink index out of range for {n} visual tokens")
        rest = np.setdiff1d(np.arange(n), sinks)
        if self.placement is Placement.FRONT:
            return np.concatenate([sinks, rest])
        if self.placement is Placement.END:
            return np.concatenate([rest, sinks])
        return np.arange(n)


@dataclass
class VisualSegment:
    """Visual tokens with their position ids and original patch indices."""

    tokens: Tensor  # (n, d)
    position_ids: np.ndarray
    source_index: np.ndarray

    @classmethod
    def from_features(cls, tokens: Tensor, first_position: int = 0) -> "VisualSegment":
        n = tokens.shape[0]
        return cls(tokens, np.arange(n) + first_position, np.arange(n))


def _sink_indices(sinks) -> np.ndarray:
    idx = getattr(sinks, "indices", sinks)
    return np.asarray(sorted(int(i) for i in idx), dtype=np.int64)


def project_single(features: Tensor, mlp: MlpConnector) -> Tensor:
    return mlp(features)


def project_dual(features: Tensor, sinks, pair: ProjectorPair) -> Tensor:
    """Route rows in ``sinks`` through the sink connector, the rest through the other.

    ``features`` is (n, D') and row order is preserved.
    """
    n = features.shape[-2]
    s = _sink_indices(sinks)
    if s.size and (s[0] < 0 or s[-1] >= n):
        raise ArgumentError(f"sink index out of range for {n} rows")
    if s.size == 0:
        return pair.nonsink_mlp(features)
    if s.size == n:
        return pair.sink_mlp(features)
    rest = np.setdiff1d(np.arange(n), s)
    axis = features.ndim - 2
    parts = T.concat(
        [pair.sink_mlp(T.take(features, s, axis)), pair.nonsink_mlp(T.take(features, rest, axis))],
        axis=axis,
    )
    inverse = np.argsort(np.concatenate([s, rest]))
    return T.take(parts, inverse, axis)


def reorder(segment: VisualSegment, sinks, plan: ReorderPlan) -> tuple[VisualSegment, np.ndarray]:
    """Move sink tokens to the front (or end) and return (segment, permutation).

    Embeddings are only permuted, never modified. Under the transport policy
    each token keeps its position id; under reassign, ids are renumbered in
    the new order starting from the segment's smallest id.
    """
    n = segment.tokens.shape[-2]
    perm = plan.permutation(n, _sink_indices(sinks))
    tokens = segment.tokens if plan.placement is Placement.NONE else T.take(segment.tokens, perm, segment.tokens.ndim - 2)
    if plan.position_ids is PositionPolicy.TRANSPORT:
        pos = segment.position_ids[perm]
    else:
        pos = np.arange(n) + (int(segment.position_ids.min()) if n else 0)
    return VisualSegment(tokens, pos, segment.source_index[perm]), perm


def text_segment(embeddings: Tensor, token_ids, position_ids, role: Role) -> TokenSequence:
    ids = np.asarray(token_ids)
    roles = np.full(ids.shape[-1], role, dtype=np.int8)
    return TokenSequence(embeddings, position_ids, roles, ids)


def visual_segment_sequence(seg: VisualSegment) -> TokenSequence:
    n = seg.tokens.shape[-2]
    ids = np.full(np.shape(seg.position_ids), -1)
    return TokenSequence(seg.tokens, seg.position_ids, np.full(n, Role.VIS, dtype=np.int8), ids)


def assemble(sys: TokenSequence, vis: TokenSequence | None, txt: TokenSequence) -> TokenSequence:
    """Concatenate [system; visual; text] along the token axis."""
    parts = [s for s in (sys, vis, txt) if s is not None and len(s) > 0]
    dims = {p.embeddings.shape[-1] for p in parts}
    if len(dims) != 1:
        raise DimensionError(f"segment dims differ: {sorted(dims)}")
    batched = {p.embeddings.ndim for p in parts}
    if len(batched) != 1:
        raise DimensionError("cannot mix batched and unbatched segments")
    axis = parts[0].embeddings.ndim - 2
    emb = T.concat([p.embeddings for p in parts], axis=axis)
    pos = np.concatenate([_broadcast_ids(p.position_ids, p) for p in parts], axis=-1)
    tok = np.concatenate([_broadcast_ids(p.token_ids, p) for p in parts], axis=-1)
    roles = np.concatenate([p.roles for p in parts])
    return TokenSequence(emb, pos, roles, tok)


def _broadcast_ids(ids: np.ndarray, part: TokenSequence) -> np.ndarray:
    if part.embeddings.ndim == 3 and ids.ndim == 1:
        return np.broadcast_to(ids, (part.embeddings.shape[0], ids.shape[0]))
    return ids
