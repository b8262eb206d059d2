"""Read-only analyses over captured traces: relevance maps, masked word decoding,
norm/attention profiles, attention shares, task clusters, linear probes and
sink-dimension tracking across checkpoints."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import THETA_COMPLEXITY, THETA_GLOBALNESS, TaskKind
from .errors import ArgumentError, DimensionError, FormatError
from .models import CaptureTrace, ToyLM
from .sequence import Role, TokenSequence
from .sinks import TokenClass, discover_sink_dims

NORM_BIN_EDGES = (0.0, 20.0, 40.0, 60.0, 80.0, 100.0, 120.0, math.inf)


# ---------------------------------------------------------------------------
# relevance maps


@dataclass
class RelevanceMap:
    grid: np.ndarray  # (G, G), sums to 1
    layer: int
    head: int
    target: int

    def rows(self) -> list[tuple[int, int, float]]:
        G = self.grid.shape[0]
        return [(r, c, float(self.grid[r, c])) for r in range(G) for c in range(G)]


def relevance_map(trace: CaptureTrace, layer: int, head: int, target_idx: int) -> RelevanceMap:
    """Column ``target_idx`` of one head's attention, restricted to visual rows, as a normalized grid."""
    if not 0 <= layer < len(trace.attention):
        raise ArgumentError(f"layer {layer} outside 0..{len(trace.attention) - 1}")
    attn = np.asarray(trace.attention[layer])
    if attn.ndim != 3:
        raise DimensionError("relevance maps need an unbatched (heads, T, T) trace")
    if not 0 <= head < attn.shape[0]:
        raise ArgumentError(f"head {head} out of range")
    T_ = attn.shape[-1]
    visual = np.arange(T_) if trace.roles is None else np.flatnonzero(np.asarray(trace.roles) == Role.VIS)
    if target_idx not in set(visual.tolist()):
        raise ArgumentError(f"slot {target_idx} is not a visual token")
    G = int(round(math.sqrt(visual.size)))
    if G * G != visual.size:
        raise DimensionError(f"{visual.size} visual rows do not form a square grid")
    col = attn[head][visual, target_idx].astype(np.float64)
    total = col.sum()
    if not total > 0:
        raise ArgumentError("attention column is all zero")
    return RelevanceMap((col / total).reshape(G, G), layer, head, int(target_idx))


# ---------------------------------------------------------------------------
# masked word decoding


@dataclass
class WordDistribution:
    slots: np.ndarray  # visual slots in sequence order
    probs: np.ndarray  # (m, V)

    def ranked(self, top_k: int = 5) -> list[list[tuple[int, float]]]:
        out = []
        for p in self.probs:
            order = np.lexsort((np.arange(p.size), -p))[:top_k]
            out.append([(int(w), float(p[w])) for w in order])
        return out


def isolation_visibility(roles: np.ndarray) -> np.ndarray:
    """Nothing attends to a visual token except itself; non-visual tokens stay causal among themselves."""
    roles = np.asarray(roles)
    n = roles.size
    vis = roles == Role.VIS
    causal = np.tril(np.ones((n, n), dtype=bool))
    allowed = causal & ~vis[None, :] & ~vis[:, None]
    allowed[np.arange(n), np.arange(n)] = True
    return allowed


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def decode_word_distribution(seq: TokenSequence, lm: ToyLM) -> WordDistribution:
    if seq.batched:
        raise DimensionError("decode one sequence at a time")
    slots = seq.indices(Role.VIS)
    if slots.size == 0:
        raise ArgumentError("sequence has no visual tokens")
    logits, _ = lm.forward(seq.embeddings, seq.position_ids, visible=isolation_visibility(seq.roles))
    return WordDistribution(slots, _softmax_rows(logits.data[slots]))


def isolated_token_distribution(seq: TokenSequence, lm: ToyLM, slot: int) -> np.ndarray:
    """Oracle: forward one visual token alone at its own position id."""
    from .tensor import Tensor

    emb = Tensor(seq.embeddings.data[slot:slot + 1])
    logits, _ = lm.forward(emb, seq.position_ids[slot:slot + 1])
    return _softmax_rows(logits.data)[0]


# ---------------------------------------------------------------------------
# norm vs received attention


@dataclass
class AttentionRecord:
    """Per visual token of one example: ViT norm, received attention, class."""

    norms: np.ndarray
    received: np.ndarray
    classes: list[TokenClass] = field(default_factory=list)


@dataclass
class NormProfile:
    edges: np.ndarray
    mean_count: np.ndarray
    mean_attention: np.ndarray  # nan where a bin is empty

    def populated(self) -> np.ndarray:
        return np.flatnonzero(self.mean_count > 0)

    def top_bottom_ratio(self) -> float:
        idx = self.populated()
        if idx.size < 2:
            raise ArgumentError("need at least two populated bins")
        return float(self.mean_attention[idx[-1]] / self.mean_attention[idx[0]])

    def rows(self) -> list[tuple]:
        return [(float(self.edges[i]), float(self.edges[i + 1]), float(self.mean_count[i]),
                 float(self.mean_attention[i])) for i in range(self.mean_count.size)]


def norm_bin_edges(tau_vit: float) -> np.ndarray:
    return np.array(NORM_BIN_EDGES) * (tau_vit / 100.0)


def norm_bins(norms: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Bin index i with edges[i] <= norm < edges[i+1]."""
    return np.searchsorted(edges, np.asarray(norms, dtype=np.float64), side="right") - 1


def norm_attention_profile(records: Sequence[AttentionRecord], tau_vit: float) -> NormProfile:
    if not records:
        raise ArgumentError("no examples")
    edges = norm_bin_edges(tau_vit)
    nb = edges.size - 1
    counts = np.zeros(nb)
    att_sum = np.zeros(nb)
    for rec in records:
        b = norm_bins(rec.norms, edges)
        counts += np.bincount(b, minlength=nb)[:nb]
        att_sum += np.bincount(b, weights=np.asarray(rec.received, dtype=np.float64), minlength=nb)[:nb]
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_att = np.where(counts > 0, att_sum / counts, np.nan)
    return NormProfile(edges, counts / len(records), mean_att)


def attention_to_visual(trace: CaptureTrace, out_rows: np.ndarray, layers: Iterable[int] | None = None,
                        heads: Iterable[int] | None = None) -> np.ndarray:
    """Mean attention from ``out_rows`` to every slot, averaged over layers and heads.

    Works on batched (B, H, T, T) or unbatched (H, T, T) traces.
    """
    layers = range(len(trace.attention)) if layers is None else list(layers)
    acc = None
    for l in layers:
        a = np.asarray(trace.attention[l], dtype=np.float64)
        sel = a if heads is None else np.take(a, list(heads), axis=-3)
        rows = np.take(sel, np.asarray(out_rows), axis=-2).mean(axis=-2).mean(axis=-2)
        acc = rows if acc is None else acc + rows
    return acc / len(layers)


@dataclass
class ShareRow:
    token_class: TokenClass
    count: int
    mean: float | None  # None when the class is absent


def attention_share(records: Sequence[AttentionRecord]) -> list[ShareRow]:
    """Pooled mean received attention per token class (rows ordered non-sink, emerged, propagated)."""
    order = (TokenClass.NON_SINK, TokenClass.LLM_EMERGED, TokenClass.VIT_TO_LLM)
    tot = {c: 0.0 for c in order}
    cnt = {c: 0 for c in order}
    for rec in records:
        if len(rec.classes) != len(rec.received):
            raise DimensionError("one class per visual token required")
        for c, a in zip(rec.classes, rec.received):
            c = TokenClass(c)
            if c is TokenClass.VIT_SINK:
                c = TokenClass.VIT_TO_LLM
            tot[c] += float(a)
            cnt[c] += 1
    return [ShareRow(c, cnt[c], tot[c] / cnt[c] if cnt[c] else None) for c in order]


# ---------------------------------------------------------------------------
# task clustering


@dataclass(frozen=True)
class TaskCluster:
    label: TaskKind
    complexity: float
    globalness: float


def cluster_tasks(c: float, g: float, thresholds: tuple[float, float] = (THETA_COMPLEXITY, THETA_GLOBALNESS)) -> TaskCluster:
    if not (0.0 <= c <= 5.0 and 0.0 <= g <= 5.0):
        raise ArgumentError(f"scores ({c}, {g}) outside [0, 5]")
    tc, tg = thresholds
    if c < tc:
        label = TaskKind.GLOBAL
    elif g < tg:
        label = TaskKind.LOCAL
    else:
        label = TaskKind.MIXED
    return TaskCluster(label, float(c), float(g))


# ---------------------------------------------------------------------------
# linear probes


@dataclass
class ProbeResult:
    sink: float
    nonsink: float
    chance: float
    n_val: int

    def rows(self) -> list[tuple[str, float]]:
        return [("sink", self.sink), ("non-sink", self.nonsink), ("random", self.chance)]


def _fit_softmax_regression(x: np.ndarray, y: np.ndarray, k: int, steps: int, lr: float) -> np.ndarray:
    n, d = x.shape
    xb = np.hstack([x, np.ones((n, 1))])
    w = np.zeros((d + 1, k))
    onehot = np.eye(k)[y]
    for _ in range(steps):
        p = _softmax_rows(xb @ w)
        w -= lr * (xb.T @ (p - onehot) / n + 1e-4 * w)
    return w


def probe_accuracy(feats: np.ndarray, labels: np.ndarray, train: np.ndarray, val: np.ndarray,
                   steps: int = 500, lr: float = 0.5) -> float:
    labels = np.asarray(labels)
    classes, y = np.unique(labels, return_inverse=True)
    x = np.asarray(feats, dtype=np.float64)
    mu = x[train].mean(axis=0)
    sd = x[train].std(axis=0) + 1e-8
    x = (x - mu) / sd
    w = _fit_softmax_regression(x[train], y[train], classes.size, steps, lr)
    pred = np.argmax(np.hstack([x[val], np.ones((val.size, 1))]) @ w, axis=1)
    return float(np.mean(pred == y[val]))


def linear_probe(sink_feats: np.ndarray, nonsink_feats: np.ndarray, labels, seed: int = 0,
                 val_frac: float = 0.3, steps: int = 500, lr: float = 0.5) -> ProbeResult:
    """Held-out accuracy of a gradient-descent softmax classifier on each feature set."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ArgumentError("linear probe needs at least two label classes")
    n = labels.size
    if sink_feats.shape[0] != n or nonsink_feats.shape[0] != n:
        raise DimensionError("one feature row per label required")
    order = np.random.default_rng([seed, 0x9B0B]).permutation(n)
    n_val = max(1, int(round(val_frac * n)))
    val, train = order[:n_val], order[n_val:]
    return ProbeResult(
        probe_accuracy(sink_feats, labels, train, val, steps, lr),
        probe_accuracy(nonsink_feats, labels, train, val, steps, lr),
        1.0 / classes.size,
        int(n_val),
    )


def probe_features(features: np.ndarray, sinks: Sequence[np.ndarray], seed: int = 0,
                   n_random: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Per example: mean of sink features, mean of ``n_random`` sampled non-sink features."""
    rng = np.random.default_rng([seed, 0x5A5])
    s_rows, n_rows = [], []
    for f, s in zip(features, sinks):
        s = np.asarray(s, dtype=np.int64)
        if s.size == 0:
            raise ArgumentError("example without sinks cannot be probed")
        rest = np.setdiff1d(np.arange(f.shape[0]), s)
        pick = rng.choice(rest, size=min(n_random, rest.size), replace=False)
        s_rows.append(f[s].mean(axis=0))
        n_rows.append(f[pick].mean(axis=0))
    return np.stack(s_rows), np.stack(n_rows)


def binomial_band(p: float, n: int, sigmas: float = 3.0) -> tuple[float, float]:
    sd = math.sqrt(p * (1 - p) / n)
    return p - sigmas * sd, p + sigmas * sd


# ---------------------------------------------------------------------------
# sink-dimension evolution


@dataclass
class EvolutionEntry:
    label: str
    dims: list[tuple[int, float]]


def track_sink_evolution(checkpoints: Sequence, load: Callable[[object], None],
                         hidden_of_sinks: Callable[[], tuple[np.ndarray, np.ndarray]],
                         top_k: int = 4) -> list[EvolutionEntry]:
    """For each checkpoint: load it, run the probe, report the top-k sink dims.

    ``load`` installs a checkpoint (raising on shape mismatch);
    ``hidden_of_sinks`` returns (hidden (T, D), propagated sink slots).
    """
    out = []
    for i, ck in enumerate(checkpoints):
        try:
            load(ck)
        except (DimensionError, KeyError) as e:
            raise FormatError(f"checkpoint {i} incompatible with the model: {e}") from e
        hidden, slots = hidden_of_sinks()
        dims = discover_sink_dims([hidden], [slots], top_k=top_k)
        out.append(EvolutionEntry(str(getattr(ck, "name", ck) if not isinstance(ck, dict) else i), dims))
    return out


# ---------------------------------------------------------------------------
# output files


def output_path(out_dir, run_id: str, name: str, ext: str) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out / f"{run_id}_{name}.{ext}"


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def write_dat(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """gnuplot-friendly whitespace-separated columns with a commented header."""
    path = Path(path)
    with path.open("w") as fh:
        fh.write("# " + " ".join(header) + "\n")
        for r in rows:
            fh.write(" ".join(str(v) for v in r) + "\n")
    return path
