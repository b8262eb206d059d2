"""Threshold-based sink detection over hidden states.

A token j is a sink at layer l when phi(x_j^{l-1}) >= tau, where phi is one of
three characteristic functions: the L2 norm, the mean attention it receives
from output rows under one head, or the largest absolute RMS-normalized value
over a fixed set of sink dimensions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ArgumentError

CSV_HEADER = ("example_id", "layer", "token_index", "phi_kind", "phi_value", "tau", "token_class")

# tau values used for real backbones, kept as documentation defaults.
PAPER_TAU = {
    "vit_sink": {"tinyllava-0.5b": 120, "tinyllava-3b": 120, "internvl2.5-4b": 35, "llava-7b": 100},
    "vit_to_llm": {"tinyllava-0.5b": 4, "tinyllava-3b": 5, "internvl2.5-4b": 3, "llava-7b": 4},
    "llm_emerged": {"tinyllava-0.5b": 5, "tinyllava-3b": 25, "internvl2.5-4b": 4, "llava-7b": 20},
}


class PhiKind(str, Enum):
    NORM = "norm"
    AVG_ATTENTION = "attn"
    SINK_DIM_VALUE = "dimval"


class TokenClass(str, Enum):
    VIT_SINK = "vit_sink"
    VIT_TO_LLM = "vit->llm"
    LLM_EMERGED = "llm_emerged"
    NON_SINK = "non_sink"


@dataclass(frozen=True)
class SinkCriterion:
    kind: PhiKind
    tau: float
    layer: int = 0
    head: int | None = None
    sink_dims: tuple[int, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "kind", PhiKind(self.kind))
        object.__setattr__(self, "sink_dims", tuple(int(d) for d in self.sink_dims))
        if not self.tau > 0:
            raise ArgumentError(f"tau must be positive, got {self.tau}")
        if self.kind is PhiKind.SINK_DIM_VALUE and not self.sink_dims:
            raise ArgumentError("SinkDimValue criterion needs sink_dims")
        if (self.head is not None) != (self.kind is PhiKind.AVG_ATTENTION):
            raise ArgumentError("head is required for, and only for, the AvgAttention criterion")


@dataclass
class AttentionContext:
    """Attention rows needed by the AvgAttention criterion.

    ``attention`` is (heads, T, T) for one layer, or a per-layer list of such
    arrays indexed by the criterion's layer.
    """

    attention: np.ndarray | Sequence[np.ndarray]
    out_indices: Sequence[int]

    def layer(self, layer: int) -> np.ndarray:
        if isinstance(self.attention, np.ndarray) and self.attention.ndim == 3:
            return self.attention
        if not 0 <= layer < len(self.attention):
            raise ArgumentError(f"attention layer {layer} out of range")
        return np.asarray(self.attention[layer])


@dataclass
class SinkReport:
    indices: np.ndarray
    values: np.ndarray
    criterion: SinkCriterion
    token_class: dict[int, TokenClass] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.indices.size)

    def csv_rows(self, example_id) -> list[tuple]:
        c = self.criterion
        return [
            (example_id, c.layer, int(j), c.kind.value, float(self.values[j]), c.tau,
             self.token_class.get(int(j), TokenClass.VIT_SINK).value)
            for j in self.indices
        ]


def rms_normalize(x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    ms = np.mean(x * x, axis=-1, keepdims=True) + eps
    return x / np.sqrt(ms)


def phi_values(hidden: np.ndarray, criterion: SinkCriterion, context: AttentionContext | None = None) -> np.ndarray:
    """phi for every row of ``hidden`` (seq, dim), in float64."""
    x = np.asarray(hidden, dtype=np.float64)
    if criterion.kind is PhiKind.NORM:
        return np.sqrt(np.sum(x * x, axis=-1))
    if criterion.kind is PhiKind.SINK_DIM_VALUE:
        dims = np.asarray(criterion.sink_dims)
        if dims.min() < 0 or dims.max() >= x.shape[-1]:
            raise ArgumentError(f"sink dims {criterion.sink_dims} outside [0, {x.shape[-1]})")
        return np.max(np.abs(rms_normalize(x)[..., dims]), axis=-1)
    if context is None:
        raise ArgumentError("AvgAttention criterion needs an attention context")
    out = np.asarray(context.out_indices, dtype=np.int64)
    if out.size == 0:
        raise ArgumentError("AvgAttention criterion needs a non-empty output index set")
    attn = context.layer(criterion.layer)
    if not 0 <= criterion.head < attn.shape[0]:
        raise ArgumentError(f"head {criterion.head} out of range")
    rows = np.asarray(attn[criterion.head][out], dtype=np.float64)
    return rows.sum(axis=0)[: x.shape[0]] / out.size


def phi(x_j: np.ndarray, criterion: SinkCriterion, context: AttentionContext | None = None,
        index: int | None = None) -> float:
    """phi for one token. AvgAttention needs the token's ``index`` in the sequence."""
    x = np.asarray(x_j, dtype=np.float64).reshape(1, -1)
    if criterion.kind is PhiKind.AVG_ATTENTION:
        if context is None:
            raise ArgumentError("AvgAttention criterion needs an attention context")
        if index is None:
            raise ArgumentError("AvgAttention phi needs the token index")
        out = np.asarray(context.out_indices, dtype=np.int64)
        if out.size == 0:
            raise ArgumentError("AvgAttention criterion needs a non-empty output index set")
        attn = context.layer(criterion.layer)
        return float(np.asarray(attn[criterion.head][out, index], dtype=np.float64).sum() / out.size)
    return float(phi_values(x, criterion)[0])


def detect_sinks(hidden, criterion: SinkCriterion, context: AttentionContext | None = None) -> SinkReport:
    """Î = {j : phi(x_j) >= tau}.

    ``hidden`` is either the (seq, dim) matrix for the criterion's layer or a
    per-layer list from a capture trace, indexed by ``criterion.layer``.
    """
    if isinstance(hidden, np.ndarray) and hidden.ndim == 2:
        h = hidden
    else:
        if not 0 <= criterion.layer < len(hidden):
            raise ArgumentError(f"layer {criterion.layer} outside 0..{len(hidden) - 1}")
        h = np.asarray(hidden[criterion.layer])
    values = phi_values(h, criterion, context)
    idx = np.flatnonzero(values >= criterion.tau)
    return SinkReport(idx, values, criterion)


def discover_sink_dims(hidden_batch: Sequence[np.ndarray], sink_indices: Sequence[Iterable[int]],
                       top_k: int = 4) -> list[tuple[int, float]]:
    """Rank dimensions by mean |RMSNorm(x)| over every sink token in the batch.

    Ties are broken by ascending dimension index.
    """
    if len(hidden_batch) == 0:
        raise ArgumentError("empty batch")
    rows = [rms_normalize(np.asarray(h))[np.asarray(list(s), dtype=np.int64)]
            for h, s in zip(hidden_batch, sink_indices) if len(list(s))]
    if not rows:
        raise ArgumentError("no sink tokens in the batch")
    mag = np.abs(np.concatenate(rows, axis=0)).mean(axis=0)
    order = np.lexsort((np.arange(mag.size), -mag))
    return [(int(d), float(mag[d])) for d in order[:top_k]]


def format_dim_values(pairs: Iterable[tuple[int, float]]) -> str:
    return " ".join(f"({d}, {v:.1f})" for d, v in pairs)


def classify_llm_tokens(hidden: np.ndarray, vit_sink_slots: Iterable[int], vit_llm: SinkCriterion,
                        llm_original: SinkCriterion) -> SinkReport:
    """Separate propagated ViT sinks from sinks that emerged inside the LM.

    A slot is ``vit->llm`` when it held a ViT sink and passes ``vit_llm``
    (SinkDimValue over the propagated dimension set); it is ``llm_emerged``
    when it passes only ``llm_original``.
    """
    vit_slots = {int(s) for s in vit_sink_slots}
    v_prop = phi_values(hidden, vit_llm)
    v_llm = phi_values(hidden, llm_original)
    classes: dict[int, TokenClass] = {}
    for j in range(hidden.shape[0]):
        if j in vit_slots and v_prop[j] >= vit_llm.tau:
            classes[j] = TokenClass.VIT_TO_LLM
        elif v_llm[j] >= llm_original.tau:
            classes[j] = TokenClass.LLM_EMERGED
    idx = np.array(sorted(classes), dtype=np.int64)
    values = np.where(np.isin(np.arange(hidden.shape[0]), sorted(vit_slots)), v_prop, v_llm)
    return SinkReport(idx, values, vit_llm, classes)


def write_reports_csv(path: str | Path, reports: Iterable[tuple[object, SinkReport]]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for example_id, report in reports:
            w.writerows(report.csv_rows(example_id))
    return path
