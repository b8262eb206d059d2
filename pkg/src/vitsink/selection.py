"""Dynamic token selection: a hard two-question router and a learned reweighter."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable

import numpy as np

from . import tensor as T
from .errors import ArgumentError, DimensionError
from .models import ParamModule, ToyLM
from .tensor import Tensor

DECISION_HEADER = ("example_id", "image_symbolic", "query_holistic", "mode", "w_sink", "w_non-sink")


class RouteMode(str, Enum):
    SINK_ONLY = "sink_only"
    NONSINK_ONLY = "nonsink_only"
    BOTH = "both"


# (global weight, local weight) used to summarize routing decisions
ROUTE_WEIGHTS = {RouteMode.SINK_ONLY: (2.0, 0.0), RouteMode.NONSINK_ONLY: (0.0, 2.0), RouteMode.BOTH: (1.0, 1.0)}


@dataclass(frozen=True)
class RouteDecision:
    mode: RouteMode
    image_symbolic: bool
    query_holistic: bool


def cot_route(image_symbolic: bool, query_holistic: bool) -> RouteDecision:
    """Symbolic image and holistic query -> sinks only; complex image and local query -> non-sinks only."""
    s, h = bool(image_symbolic), bool(query_holistic)
    if s and h:
        mode = RouteMode.SINK_ONLY
    elif not s and not h:
        mode = RouteMode.NONSINK_ONLY
    else:
        mode = RouteMode.BOTH
    return RouteDecision(mode, s, h)


def quantify_cot_weights(decisions: Iterable[RouteDecision]) -> tuple[float, float]:
    decisions = list(decisions)
    if not decisions:
        raise ArgumentError("no routing decisions")
    pairs = np.array([ROUTE_WEIGHTS[d.mode] for d in decisions])
    g, l = pairs.mean(axis=0)
    return float(g), float(l)


def label_predicates(example) -> tuple[bool, bool]:
    """Ground-truth (image_symbolic, query_holistic) from the synthetic scores."""
    return example.image_symbolic, example.query_holistic


def lm_predicates(vlm, examples, cache=None) -> list[tuple[bool, bool]]:
    """Ask the LM two yes/no questions per example using reserved question tokens.

    The prompt is [sys; visual; query; COT_*] and the answer is whichever of
    YES/NO gets the larger logit at the last slot.
    """
    from .pipeline import TokenMode, group_rows

    v = vlm.vocab
    cache = cache or vlm.encode_images(examples)
    out: list[list[bool]] = [[False, False] for _ in examples]
    for col, tok in enumerate((v.cot_symbolic, v.cot_holistic)):
        for rows in group_rows(vlm, cache, TokenMode.BOTH, 64):
            q = np.stack([np.append(examples[r].query, tok) for r in rows])
            lg = vlm.answer_logits(vlm.build(cache, rows, q))
            for r, yes in zip(rows, lg[:, v.yes] > lg[:, v.no]):
                out[r][col] = bool(yes)
    return [tuple(p) for p in out]


def embed_query(lm: ToyLM, query_ids) -> np.ndarray:
    """Mean final-layer hidden state of the frozen LM run on the query alone."""
    ids = np.asarray(query_ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size == 0:
        raise ArgumentError("query must be a non-empty 1-D token id array")
    h = lm.final_hidden(lm.embed_tokens(ids), np.arange(ids.size))
    return h.astype(np.float64).mean(axis=0).astype(h.dtype)


def embed_queries(lm: ToyLM, queries) -> np.ndarray:
    return np.stack([embed_query(lm, q) for q in queries])


class Reweighter(ParamModule):
    """q -> (w_sink, w_nonsink) through d -> hidden -> 2 with a GELU.

    The output activation is softplus(z) / ln 2, which is exactly 1 at z = 0;
    the final layer starts at zero so an untrained reweighter is the identity.
    """

    def __init__(self, dim: int = 48, hidden: int = 32, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.dim = dim
        self.params["w1"] = Tensor(rng.normal(0, 1 / np.sqrt(dim), (dim, hidden)).astype(np.float32))
        self.params["b1"] = Tensor(np.zeros(hidden, np.float32))
        self.params["w2"] = Tensor(np.zeros((hidden, 2), np.float32))
        self.params["b2"] = Tensor(np.zeros(2, np.float32))

    def __call__(self, q: Tensor) -> Tensor:
        if q.shape[-1] != self.dim:
            raise DimensionError(f"reweighter expects dim {self.dim}, got {q.shape[-1]}")
        p = self.params
        h = T.gelu(T.add(T.matmul(q, p["w1"]), p["b1"]))
        z = T.add(T.matmul(h, p["w2"]), p["b2"])
        return T.scale(T.softplus(z), 1.0 / math.log(2.0))


def reweight(q, rw: Reweighter) -> tuple[float, float]:
    q = q if isinstance(q, Tensor) else Tensor(q)
    single = q.ndim == 1
    out = rw(T.reshape(q, (1, -1)) if single else q).data
    if single:
        return float(out[0, 0]), float(out[0, 1])
    return out


def apply_weights(proj_sink: Tensor, proj_nonsink: Tensor, w_sink, w_nonsink) -> Tensor:
    """[w_sink * sinks; w_nonsink * non-sinks] along the token axis (scaling after projection)."""
    ws = w_sink if isinstance(w_sink, Tensor) else Tensor(np.asarray(w_sink, dtype=proj_sink.dtype))
    wn = w_nonsink if isinstance(w_nonsink, Tensor) else Tensor(np.asarray(w_nonsink, dtype=proj_nonsink.dtype))
    if not (np.all(np.isfinite(ws.data)) and np.all(np.isfinite(wn.data))):
        raise ArgumentError("weights must be finite")
    return T.concat([T.mul(proj_sink, ws), T.mul(proj_nonsink, wn)], axis=proj_sink.ndim - 2)


def write_decisions_csv(path, rows: Iterable[tuple]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(DECISION_HEADER)
        w.writerows(rows)
    return path
