"""Benchmark runs, trace collection and the standard injected-fixture experiment."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .analysis import AttentionRecord, attention_to_visual
from .connector import ReorderPlan
from .data import SyntheticExample, TaskKind, Vocab, cluster_of, gen_dataset
from .errors import ArgumentError, DimensionError, FormatError
from .fixtures import FixtureReport, build_fixture
from .pipeline import Projector, TokenMode, ToyVLM, VisualCache, build_vlm, group_rows
from .selection import RouteMode, cot_route, label_predicates, lm_predicates
from .sequence import Role
from .sinks import PhiKind, SinkCriterion, TokenClass, classify_llm_tokens, discover_sink_dims
from .training import TrainConfig, TrainResult, finetune, pretrain_dual

log = logging.getLogger(__name__)

BENCH_HEADER = ("task_kind", "correct", "total", "accuracy")


@dataclass
class BenchTable:
    correct: dict[str, int] = field(default_factory=dict)
    total: dict[str, int] = field(default_factory=dict)

    def accuracy(self, kind) -> float:
        k = TaskKind(kind).value
        return self.correct[k] / self.total[k] if self.total.get(k) else float("nan")

    @property
    def overall(self) -> float:
        t = sum(self.total.values())
        return sum(self.correct.values()) / t if t else float("nan")

    def rows(self) -> list[tuple]:
        out = [(k, self.correct[k], self.total[k], self.correct[k] / self.total[k]) for k in sorted(self.total)]
        out.append(("all", sum(self.correct.values()), sum(self.total.values()), self.overall))
        return out


def score(examples: list[SyntheticExample], preds) -> BenchTable:
    """Exact-match accuracy per cluster, merged in example order."""
    table = BenchTable()
    for e, p in zip(examples, preds):
        k = cluster_of(e.complexity, e.globalness).value
        table.total[k] = table.total.get(k, 0) + 1
        table.correct[k] = table.correct.get(k, 0) + int(int(p) == e.answer)
    return table


class OraclePredictor:
    """Reads the ground-truth answer; checks the scoring plumbing."""

    def predict(self, examples, **_) -> np.ndarray:
        return np.array([e.answer for e in examples])


SELECTION_MODES = ("none", "sink_only", "nonsink_only", "cot", "cot_lm", "reweight")


def run_benchmark(model, examples: list[SyntheticExample], selection: str = "none",
                  plan: ReorderPlan | None = None, cache: VisualCache | None = None,
                  projector: Projector = Projector.DUAL) -> BenchTable:
    """Greedy decoding over the dataset under a token-selection mode and reorder plan."""
    if selection not in SELECTION_MODES:
        raise ArgumentError(f"unknown selection mode {selection!r}")
    if not isinstance(model, ToyVLM):
        return score(examples, model.predict(examples))
    old_plan = model.plan
    if plan is not None:
        model.plan = plan
    try:
        cache = cache or model.encode_images(examples)
        preds = predict_with_selection(model, examples, cache, selection, projector)
    finally:
        model.plan = old_plan
    return score(examples, preds)


_ROUTE_TO_TOKENS = {RouteMode.SINK_ONLY: TokenMode.SINK_ONLY, RouteMode.NONSINK_ONLY: TokenMode.NONSINK_ONLY,
                    RouteMode.BOTH: TokenMode.BOTH}


def predict_with_selection(vlm: ToyVLM, examples, cache: VisualCache, selection: str,
                           projector: Projector = Projector.DUAL) -> np.ndarray:
    if selection in ("none", "sink_only", "nonsink_only"):
        mode = {"none": TokenMode.BOTH, "sink_only": TokenMode.SINK_ONLY, "nonsink_only": TokenMode.NONSINK_ONLY}[selection]
        return vlm.predict(examples, cache, mode, projector)
    if selection == "reweight":
        if vlm.reweighter is None:
            raise ArgumentError("reweight selection needs a trained reweighter")
        from .selection import embed_queries, reweight

        w = reweight(embed_queries(vlm.lm, [e.query for e in examples]), vlm.reweighter)
        return vlm.predict(examples, cache, TokenMode.BOTH, projector, weights=w)
    flags = lm_predicates(vlm, examples, cache) if selection == "cot_lm" else [label_predicates(e) for e in examples]
    decisions = [cot_route(*f) for f in flags]
    preds = np.zeros(len(examples), dtype=np.int64)
    for route, tmode in _ROUTE_TO_TOKENS.items():
        idx = [i for i, d in enumerate(decisions) if d.mode is route]
        if not idx:
            continue
        sub = [examples[i] for i in idx]
        sub_cache = VisualCache(cache.features[idx], [cache.sinks[i] for i in idx], cache.norms[idx])
        preds[idx] = vlm.predict(sub, sub_cache, tmode, projector)
    return preds


def load_model_state(vlm: ToyVLM, state: dict[str, np.ndarray]) -> None:
    """Install checkpoint weights, converting shape mismatches into format errors."""
    try:
        vlm.load_state({k: v for k, v in state.items() if not k.startswith("meta/")})
    except DimensionError as e:
        raise FormatError(f"checkpoint does not fit the model: {e}") from e


# ---------------------------------------------------------------------------
# trace collection


def attention_records(vlm: ToyVLM, examples, cache: VisualCache, layers=None, heads=None,
                      batch_size: int = 32, classify: tuple[SinkCriterion, SinkCriterion] | None = None
                      ) -> list[AttentionRecord]:
    """Per example: ViT norm and mean LM attention received from the output-emitting slot,
    for every visual token, indexed by original patch order.

    Without ``classify`` every ViT sink is tagged vit->llm. With a
    (propagated, llm-original) criterion pair, visual tokens are classified
    on the LM's second-to-last hidden layer instead.
    """
    records: list[AttentionRecord | None] = [None] * len(examples)
    for rows in group_rows(vlm, cache, TokenMode.BOTH, batch_size):
        q = np.stack([examples[r].query for r in rows])
        b = vlm.build(cache, rows, q, TokenMode.BOTH)
        _, trace = vlm.lm.forward(b.seq.embeddings, b.seq.position_ids, capture=True)
        out_rows = np.array([len(b.seq) - 1])
        recv = attention_to_visual(trace, out_rows, layers, heads)  # (B, T)
        vis = b.seq.indices(Role.VIS)
        for i, r in enumerate(rows):
            src, _, flags = vlm.visual_layout(cache.sinks[r], TokenMode.BOTH)
            received = np.zeros(vlm.n_visual)
            received[src] = recv[i, vis]
            classes = [TokenClass.NON_SINK] * vlm.n_visual
            if classify is None:
                for s in src[flags]:
                    classes[s] = TokenClass.VIT_TO_LLM
            else:
                rep = classify_llm_tokens(trace.hidden[-2][i][vis], np.flatnonzero(flags), *classify)
                for slot, cls in rep.token_class.items():
                    classes[src[slot]] = cls
            records[r] = AttentionRecord(cache.norms[r], received, classes)
    return records


def llm_sink_dims(vlm: ToyVLM, examples, cache: VisualCache, top_k: int = 2,
                  batch_size: int = 32) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """(propagated dims, LM-original dims) on the LM's second-to-last hidden layer.

    Propagated dims are ranked over the slots holding ViT sinks; LM-original
    dims over the first system slot, the toy analogue of a begin-of-sequence
    sink, with the propagated dims excluded.
    """
    prop_h, prop_s, sys_h = [], [], []
    for rows in group_rows(vlm, cache, TokenMode.BOTH, batch_size):
        q = np.stack([examples[r].query for r in rows])
        b = vlm.build(cache, rows, q, TokenMode.BOTH)
        _, trace = vlm.lm.forward(b.seq.embeddings, b.seq.position_ids, capture=True)
        vis = b.seq.indices(Role.VIS)
        for i in range(len(rows)):
            h = trace.hidden[-2][i]
            prop_h.append(h)
            prop_s.append(vis[b.sink_flags])
            sys_h.append(h)
    prop = tuple(d for d, _ in discover_sink_dims(prop_h, prop_s, top_k))
    ranked = discover_sink_dims(sys_h, [[0]] * len(sys_h), top_k + len(prop))
    orig = tuple([d for d, _ in ranked if d not in prop][:top_k])
    return prop, orig


# ---------------------------------------------------------------------------
# the standard experiment


@dataclass
class StandardRun:
    vlm: ToyVLM
    report: FixtureReport
    train: list
    test: list
    train_cache: VisualCache
    test_cache: VisualCache
    pretrain: dict[str, TrainResult]
    finetune: TrainResult | None


def standard_setup(seed: int = 0, k: int = 3, gain: float = 40.0, n_train: int = 2000,
                   n_test: int = 100, vocab: Vocab | None = None):
    vocab = vocab or Vocab()
    vit, report = build_fixture("injected", seed, k=k, gain=gain, vocab=vocab)
    vlm = build_vlm(vit, report.tau, seed=seed, vocab=vocab)
    train = gen_dataset(seed + 1, (n_train,) * 3, vocab)
    test = gen_dataset(seed + 2, (n_test,) * 3, vocab)
    return vlm, report, train, test


def standard_experiment(seed: int = 0, pretrain_cfg: TrainConfig | None = None,
                        finetune_cfg: TrainConfig | None = None, n_train: int = 2000,
                        n_test: int = 100, k: int = 3, gain: float = 40.0) -> StandardRun:
    """Injected fixture -> dual pretraining -> joint fine-tuning (sinks in front)."""
    vlm, report, train, test = standard_setup(seed, k, gain, n_train, n_test)
    tc, vc = vlm.encode_images(train), vlm.encode_images(test)
    pre_cfg = pretrain_cfg or TrainConfig(lr=0.5, steps=200, seed=seed)
    ft_cfg = finetune_cfg or TrainConfig(lr=0.003, steps=2000, seed=seed, optimizer="adam")
    pre = pretrain_dual(vlm, train, pre_cfg, tc)
    ft = finetune(vlm, train, ft_cfg, tc) if ft_cfg.steps else None
    return StandardRun(vlm, report, train, test, tc, vc, pre, ft)
