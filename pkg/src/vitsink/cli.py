"""Command-line entry point: ``vitsink <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis as A
from .bench import BENCH_HEADER, attention_records, llm_sink_dims, load_model_state, run_benchmark
from .checkpoint import load_checkpoint, save_checkpoint
from .config import config_hash, load_config
from .connector import ReorderPlan
from .data import TaskKind, Vocab, dumps_dataset, gen_dataset
from .errors import ArgumentError, SinkToolkitError
from .fixtures import build_fixture
from .models import ToyLM
from .pipeline import TokenMode, ToyVLM, build_vlm
from .selection import (DECISION_HEADER, Reweighter, cot_route, embed_queries, label_predicates, reweight,
                        write_decisions_csv)
from .sequence import Role
from .sinks import CSV_HEADER, AttentionContext, PhiKind, SinkCriterion, detect_sinks, discover_sink_dims, \
    format_dim_values
from .tensor import Tensor
from .training import TrainConfig, finetune, pretrain_dual, train_reweighter, write_loss_csv

log = logging.getLogger("vitsink")

COMMANDS = ("gen-data", "build-fixture", "pretrain", "finetune", "train-reweighter", "detect-sinks",
            "reorder-eval", "relevance-map", "decode-words", "profile-norm-attn", "attention-share", "probe",
            "track-evolution", "bench", "grad-check")
ANALYSIS = {"detect-sinks", "relevance-map", "decode-words", "profile-norm-attn", "attention-share", "probe",
            "track-evolution"}


class Run:
    """Output bookkeeping for one command invocation."""

    def __init__(self, command: str, cfg: dict):
        self.command, self.cfg = command, cfg
        self.hash = config_hash(cfg)
        self.run_id = f"{command}-{self.hash[:10]}"
        self.out = Path(str(cfg["out"]))
        self.out.mkdir(parents=True, exist_ok=True)
        self.files: list[str] = []

    def path(self, name: str, ext: str) -> Path:
        p = A.output_path(self.out, self.run_id, name, ext)
        self.files.append(p.name)
        return p

    def finish(self) -> Path:
        manifest = {"run_id": self.run_id, "command": self.command, "config_hash": self.hash,
                    "files": self.files}
        p = self.out / f"{self.run_id}_manifest.json"
        p.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return p


# ---------------------------------------------------------------------------
# model plumbing


def _vocab(cfg) -> Vocab:
    return Vocab(grid=int(cfg["data.grid"]))


def _datasets(cfg):
    vocab = _vocab(cfg)
    seed = int(cfg["seed"])
    train = gen_dataset(seed + 1, (int(cfg["data.global"]), int(cfg["data.local"]), int(cfg["data.mixed"])), vocab)
    n = int(cfg["data.test"])
    test = gen_dataset(seed + 2, (n, n, n), vocab)
    return train, test


def _seed_words(seed: int) -> np.ndarray:
    # float32 holds 16-bit integers exactly, so a u64 seed is stored as four words
    return np.array([(int(seed) >> s) & 0xFFFF for s in (0, 16, 32, 48)], np.float32)


def _seed_from_words(words: np.ndarray) -> int:
    return sum(int(w) << s for w, s in zip(words, (0, 16, 32, 48)))


def _meta(cfg, tau: float) -> dict[str, np.ndarray]:
    return {"meta/seed": _seed_words(cfg["seed"]), "meta/k": np.array([cfg["fixture.k"]], np.float32),
            "meta/gain": np.array([cfg["fixture.gain"]], np.float32), "meta/tau_vit": np.array([tau], np.float32),
            "meta/emergent": np.array([cfg["fixture.mode"] == "emergent"], np.float32)}


def _fresh_model(cfg) -> tuple[ToyVLM, object]:
    vocab = _vocab(cfg)
    seed = int(cfg["seed"])
    if cfg["fixture.mode"] == "emergent":
        vit, rep = build_fixture("emergent", seed, vocab=vocab)
    else:
        vit, rep = build_fixture("injected", seed, k=int(cfg["fixture.k"]), gain=float(cfg["fixture.gain"]),
                                 vocab=vocab)
    vlm = build_vlm(vit, rep.tau, seed=seed, vocab=vocab, plan=ReorderPlan.from_config(cfg))
    return vlm, rep


def _load_model(cfg, path) -> ToyVLM:
    if path is None:
        return _fresh_model(cfg)[0]
    state = load_checkpoint(path)
    sub = dict(cfg)
    if "meta/seed" in state:
        sub["seed"] = _seed_from_words(state["meta/seed"])
        sub["fixture.k"] = int(state["meta/k"][0])
        sub["fixture.gain"] = float(state["meta/gain"][0])
        sub["fixture.mode"] = "emergent" if state.get("meta/emergent", np.zeros(1))[0] else "injected"
    vlm, _ = _fresh_model(sub)
    if any(k.startswith("reweighter/") for k in state):
        vlm.reweighter = Reweighter(vlm.lm.cfg.dim, state["reweighter/w1"].shape[1])
    load_model_state(vlm, state)
    if "meta/tau_vit" in state:
        vlm.tau_vit = float(state["meta/tau_vit"][0])
    return vlm


def _save_model(run: Run, vlm: ToyVLM, cfg) -> Path:
    p = run.path("model", "snk")
    save_checkpoint({**vlm.state(), **_meta(cfg, vlm.tau_vit)}, p)
    return p


def _train_cfg(cfg, prefix="train") -> TrainConfig:
    return TrainConfig(lr=float(cfg[f"{prefix}.lr"]), steps=int(cfg[f"{prefix}.steps"]),
                       batch_size=int(cfg["train.batch_size"]), seed=int(cfg["seed"]),
                       optimizer=str(cfg["train.optimizer"]) if prefix == "train" else "sgd",
                       max_grad_norm=cfg["train.max_grad_norm"], report_every=int(cfg["train.report_every"]))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(run: Run, cfg, args):
    train, test = _datasets(cfg)
    run.path("train", "jsonl").write_text(dumps_dataset(train))
    run.path("test", "jsonl").write_text(dumps_dataset(test))


def cmd_build_fixture(run: Run, cfg, args):
    vlm, rep = _fresh_model(cfg)
    A.write_csv(run.path("fixture", "csv"), ("mode", "k", "gain", "tau", "sink_slots", "min_sink_norm",
                                              "max_nonsink_norm"),
                [(rep.mode.value, rep.k, rep.gain, rep.tau, " ".join(map(str, rep.sink_slots)),
                  rep.min_sink_norm, rep.max_nonsink_norm)])
    _save_model(run, vlm, cfg)


def cmd_pretrain(run: Run, cfg, args):
    vlm = _load_model(cfg, cfg["checkpoint"])
    train, _ = _datasets(cfg)
    res = pretrain_dual(vlm, train, _train_cfg(cfg))
    for name, r in res.items():
        write_loss_csv(run.path(f"loss_{name}", "csv"), r.losses)
    _save_model(run, vlm, cfg)


def cmd_finetune(run: Run, cfg, args):
    vlm = _load_model(cfg, cfg["checkpoint"])
    train, _ = _datasets(cfg)
    r = finetune(vlm, train, _train_cfg(cfg))
    write_loss_csv(run.path("loss", "csv"), r.losses)
    _save_model(run, vlm, cfg)


def cmd_train_reweighter(run: Run, cfg, args):
    vlm = _load_model(cfg, cfg["checkpoint"])
    n = int(cfg["reweighter.examples"]) // 3
    data = gen_dataset(int(cfg["seed"]) + 3, (n, n, n), vlm.vocab)
    rw = Reweighter(vlm.lm.cfg.dim, seed=int(cfg["seed"]))
    r = train_reweighter(vlm, rw, data, _train_cfg(cfg, "reweighter"))
    write_loss_csv(run.path("loss", "csv"), r.losses)
    _, test = _datasets(cfg)
    w = reweight(embed_queries(vlm.lm, [e.query for e in test]), rw)
    rows = []
    for e, (ws, wn) in zip(test, w):
        d = cot_route(*label_predicates(e))
        rows.append((e.example_id, d.image_symbolic, d.query_holistic, d.mode.value, float(ws), float(wn)))
    write_decisions_csv(run.path("decisions", "csv"), rows)
    _save_model(run, vlm, cfg)


def _head(cfg) -> int:
    if cfg["analysis.head"] is None:
        raise ArgumentError("this analysis needs an explicit --head (or analysis.head in the config)")
    return int(cfg["analysis.head"])


def _analysis_examples(cfg):
    _, test = _datasets(cfg)
    return test[: int(cfg["analysis.examples"])] if cfg["analysis.examples"] else test


def cmd_detect_sinks(run: Run, cfg, args):
    vlm = _load_model(cfg, cfg["checkpoint"])
    examples = _analysis_examples(cfg)
    layer = vlm.vit.extract_index if cfg["analysis.layer"] is None else int(cfg["analysis.layer"])
    tau = vlm.tau_vit if cfg["analysis.tau"] is None else float(cfg["analysis.tau"])
    kind = PhiKind(cfg["analysis.phi"])
    rows = []
    for e in examples:
        _, trace = vlm.vit.forward(Tensor(e.patches), capture=True)
        ctx, dims, head = None, (), None
        if kind is PhiKind.AVG_ATTENTION:
            head = _head(cfg)
            attn_layer = max(layer - 1, 0)
            ctx = AttentionContext(trace.attention[attn_layer], np.arange(vlm.n_visual))
            crit = SinkCriterion(kind, tau, 0, head)
            rep = detect_sinks(trace.hidden[layer], crit, ctx)
            rep.criterion = SinkCriterion(kind, tau, layer, head)
        else:
            if kind is PhiKind.SINK_DIM_VALUE:
                norm_sinks = detect_sinks(trace.hidden[layer], SinkCriterion(PhiKind.NORM, vlm.tau_vit)).indices
                dims = tuple(d for d, _ in discover_sink_dims([trace.hidden[layer]], [norm_sinks])) if norm_sinks.size \
                    else (0,)
            rep = detect_sinks(trace.hidden, SinkCriterion(kind, tau, layer, None, dims))
        rows.extend(rep.csv_rows(e.example_id))
    A.write_csv(run.path("sinks", "csv"), CSV_HEADER, rows)


def cmd_reorder_eval(run: Run, cfg, args):
    vlm = _load_model(cfg, cfg["checkpoint"])
    _, test = _datasets(cfg)
    cache = vlm.encode_images(test)
    rows = []
    for placement in ("front", "end", "none"):
        plan = ReorderPlan.from_config({"reorder.placement": placement,
                                        "reorder.position_ids": cfg["reorder.position_ids"]})
        for r in run_benchmark(vlm, test, str(cfg["selection.mode"]), plan, cache).rows():
            rows.append((placement,) + r)
    A.write_csv(run.path("reorder", "csv"), ("placement",) + BENCH_HEADER, rows)


def cmd_relevance_map(run: Run, cfg, args):
    vlm = _load_model(cfg, cfg["checkpoint"])
    e = _analysis_examples(cfg)[0]
    _, trace = vlm.vit.forward(Tensor(e.patches), capture=True)
    layer = (vlm.vit.extract_index - 1) if cfg["analysis.layer"] is None else int(cfg["analysis.layer"])
    target = cfg["analysis.target"]
    if target is None:
        sinks = detect_sinks(trace.hidden[vlm.vit.extract_index], vlm.sink_criterion()).indices
        target = int(sinks[0]) if sinks.size else 0
    m = A.relevance_map(trace, layer, _head(cfg), int(target))
    A.write_csv(run.path("relevance", "csv"), ("row", "col", "value"), m.rows())
    A.write_dat(run.path("relevance", "dat"), ("row", "col", "value"), m.rows())


def _sequence(vlm: ToyVLM, example, cache=None):
    cache = cache or vlm.encode_images([example])
    return vlm.build(cache, [0], example.query[None, :], TokenMode.BOTH)


def cmd_decode_words(run: Run, cfg, args):
    vlm = _load_model(cfg, cfg["checkpoint"])
    e = _analysis_examples(cfg)[0]
    b = _sequence(vlm, e)
    seq = b.seq
    from .sequence import TokenSequence

    single = TokenSequence(Tensor(seq.embeddings.data[0]), seq.position_ids[0], seq.roles, seq.token_ids[0])
    wd = A.decode_word_distribution(single, vlm.lm)
    rows = [(int(slot), rank, w, p) for slot, ranked in zip(wd.slots, wd.ranked(5))
            for rank, (w, p) in enumerate(ranked)]
    A.write_csv(run.path("words", "csv"), ("slot", "rank", "word_id", "prob"), rows)


def _records(vlm, cfg):
    examples = _analysis_examples(cfg)
    layers = None if cfg["analysis.layer"] is None else [int(cfg["analysis.layer"])]
    return attention_records(vlm, examples, vlm.encode_images(examples), layers)


def cmd_profile_norm_attn(run: Run, cfg, args):
    vlm = _load_model(cfg, cfg["checkpoint"])
    tau = vlm.tau_vit if cfg["analysis.tau"] is None else float(cfg["analysis.tau"])
    prof = A.norm_attention_profile(_records(vlm, cfg), tau)
    header = ("bin_low", "bin_high", "mean_count", "mean_attention")
    A.write_csv(run.path("norm_attn", "csv"), header, prof.rows())
    A.write_dat(run.path("norm_attn", "dat"), header, prof.rows())


def cmd_attention_share(run: Run, cfg, args):
    vlm = _load_model(cfg, cfg["checkpoint"])
    examples = _analysis_examples(cfg)
    cache = vlm.encode_images(examples)
    prop, orig = llm_sink_dims(vlm, examples, cache)
    crits = (SinkCriterion(PhiKind.SINK_DIM_VALUE, float(cfg["analysis.tau_propagated"]), sink_dims=prop),
             SinkCriterion(PhiKind.SINK_DIM_VALUE, float(cfg["analysis.tau_emerged"]), sink_dims=orig))
    layers = None if cfg["analysis.layer"] is None else [int(cfg["analysis.layer"])]
    share = A.attention_share(attention_records(vlm, examples, cache, layers, classify=crits))
    A.write_csv(run.path("attention_share", "csv"), ("token_class", "count", "mean_attention", "sink_dims"),
                [(r.token_class.value, r.count, "absent" if r.mean is None else r.mean,
                  " ".join(map(str, {"vit->llm": prop, "llm_emerged": orig}.get(r.token_class.value, ()))))
                 for r in share])


def cmd_probe(run: Run, cfg, args):
    vlm = _load_model(cfg, cfg["checkpoint"])
    vocab = vlm.vocab
    n = max(int(cfg["data.global"]), 60)
    data = gen_dataset(int(cfg["seed"]) + 4, (n, 0, 0), vocab)
    cache = vlm.encode_images(data)
    s, ns = A.probe_features(cache.features, cache.sinks, int(cfg["seed"]))
    labels = np.array([e.answer for e in data])
    res = A.linear_probe(s, ns, labels, int(cfg["seed"]))
    A.write_csv(run.path("probe", "csv"), ("features", "accuracy"), res.rows())


def cmd_track_evolution(run: Run, cfg, args):
    listed = cfg["evolution.checkpoints"]
    paths = str(listed).split() if listed else ([cfg["checkpoint"]] if cfg["checkpoint"] else [])
    if not paths:
        raise ArgumentError("track-evolution needs --checkpoints PATH [PATH ...] or --checkpoint PATH")
    vlm = _load_model(cfg, paths[0])
    probe = _analysis_examples(cfg)[0]

    def load(p):
        load_model_state(vlm, load_checkpoint(p))

    def hidden_of_sinks():
        cache = vlm.encode_images([probe])
        b = vlm.build(cache, [0], probe.query[None, :], TokenMode.BOTH)
        _, trace = vlm.lm.forward(b.seq.embeddings, b.seq.position_ids, capture=True)
        vis = b.seq.indices(Role.VIS)
        slots = vis[b.sink_flags]
        return trace.hidden[-2][0], slots

    entries = A.track_sink_evolution(paths, load, hidden_of_sinks)
    rows = [(i, str(p), format_dim_values(e.dims)) for i, (p, e) in enumerate(zip(paths, entries))]
    A.write_csv(run.path("evolution", "csv"), ("index", "checkpoint", "top_dims"), rows)


def cmd_bench(run: Run, cfg, args):
    vlm = _load_model(cfg, cfg["checkpoint"])
    _, test = _datasets(cfg)
    table = run_benchmark(vlm, test, str(cfg["selection.mode"]), ReorderPlan.from_config(cfg))
    A.write_csv(run.path("bench", "csv"), BENCH_HEADER, table.rows())


def cmd_grad_check(run: Run, cfg, args):
    from .gradcheck import standard_probes

    rows = [(name, err) for name, err in standard_probes(int(cfg["seed"]))]
    A.write_csv(run.path("grad_check", "csv"), ("probe", "max_relative_error"), rows)


HANDLERS = {name: globals()["cmd_" + name.replace("-", "_")] for name in COMMANDS}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vitsink", description="ViT attention-sink toolkit on toy models")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path)
        p.add_argument("--checkpoint", type=Path)
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ANALYSIS:
            p.add_argument("--layer", type=int)
            p.add_argument("--head", type=int)
            p.add_argument("--tau", type=float)
            p.add_argument("--phi", choices=[k.value for k in PhiKind])
        if name == "track-evolution":
            p.add_argument("--checkpoints", type=Path, nargs="+")
        if name in ("bench", "reorder-eval"):
            p.add_argument("--selection", choices=["none", "sink_only", "nonsink_only", "cot", "cot_lm", "reweight"])
        if name in ("pretrain", "finetune"):
            p.add_argument("--steps", type=int)
            p.add_argument("--lr", type=float)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = {"seed": args.seed, "out": None if args.out is None else str(args.out),
                 "checkpoint": None if args.checkpoint is None else str(args.checkpoint)}
    if getattr(args, "checkpoints", None):
        overrides["evolution.checkpoints"] = " ".join(str(p) for p in args.checkpoints)
    for flag, key in (("layer", "analysis.layer"), ("head", "analysis.head"), ("tau", "analysis.tau"),
                      ("phi", "analysis.phi"), ("selection", "selection.mode"), ("steps", "train.steps"),
                      ("lr", "train.lr")):
        overrides[key] = getattr(args, flag, None)
    try:
        cfg = load_config(args.config, overrides)
        run = Run(args.command, cfg)
        HANDLERS[args.command](run, cfg, args)
        manifest = run.finish()
    except (SinkToolkitError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(manifest)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
