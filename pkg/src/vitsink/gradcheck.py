"""Gradient-check probes over composite graphs and the full toy pipeline (float64)."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .connector import ProjectorPair
from .models import LMConfig, ToyLM
from .selection import Reweighter
from .tensor import Tensor, grad_check
from .training import lm_loss


def composite_probe(seed: int, probes: int = 50) -> float:
    """Linear -> rmsnorm -> softmax -> weighted sum, checked at ``probes`` random input coordinates."""
    rng = np.random.default_rng([seed, 1])
    x = Tensor(rng.normal(size=(4, 6)), dtype=np.float64)
    w = Tensor(rng.normal(size=(6, 5)), dtype=np.float64)
    g = Tensor(rng.uniform(0.5, 1.5, size=5), dtype=np.float64)
    c = Tensor(rng.normal(size=(4, 5)), dtype=np.float64)

    def f(t):
        return T.sum_all(T.mul(T.softmax(T.rmsnorm(T.matmul(t, w), g)), c))

    coords = rng.choice(x.data.size, size=probes)
    return grad_check(f, x, coords=coords)


class PipelineProbe:
    """A 6-slot sequence [sys, sys, sink, non-sink, text, answer] through a float64 toy LM."""

    def __init__(self, seed: int = 0, d_in: int = 32, cfg: LMConfig | None = None):
        rng = np.random.default_rng([seed, 2])
        cfg = cfg or LMConfig()
        self.lm = ToyLM(cfg, seed=seed).astype(np.float64)
        self.pair = ProjectorPair.create(d_in, cfg.dim, seed=seed)
        self.pair.sink_mlp.astype(np.float64)
        self.pair.nonsink_mlp.astype(np.float64)
        self.rw = Reweighter(cfg.dim, 32, seed=seed).astype(np.float64)
        # break the zero-init symmetry so every reweighter weight gets a gradient
        self.rw.params["w2"].data[...] = rng.normal(0, 0.3, self.rw.params["w2"].shape)
        self.feats = Tensor(rng.normal(size=(2, d_in)), dtype=np.float64)
        self.q = Tensor(rng.normal(size=(1, cfg.dim)), dtype=np.float64)
        self.ids = np.array([0, 1, -1, -1, 5, 7])
        self.pos = np.array([0, 1, 2, 3, 4, 5])
        self.mask = np.array([False] * 5 + [True])

    def loss(self) -> Tensor:
        lm = self.lm
        sink = self.pair.sink_mlp(T.take(self.feats, [0], 0))
        non = self.pair.nonsink_mlp(T.take(self.feats, [1], 0))
        w = self.rw(self.q)  # (1, 2)
        vis = T.concat([T.mul(sink, T.take(w, [0], 1)), T.mul(non, T.take(w, [1], 1))], axis=0)
        emb = T.concat([lm.embed_tokens([0, 1]), vis, lm.embed_tokens([5, 7])], axis=0)
        logits, _ = lm.forward(emb, self.pos)
        return lm_loss(logits, np.where(self.ids < 0, 0, self.ids), self.mask)

    def check(self, param: Tensor, probes: int, seed: int) -> float:
        rng = np.random.default_rng([seed, 3])
        coords = rng.choice(param.data.size, size=probes)
        return grad_check(lambda _: self.loss(), param, coords=coords)


def standard_probes(seed: int = 0, probes: int = 50) -> list[tuple[str, float]]:
    p = PipelineProbe(seed)
    return [
        ("composite", composite_probe(seed, probes)),
        ("lm->sink_mlp.w1", p.check(p.pair.sink_mlp.params["w1"], probes, seed)),
        ("lm->nonsink_mlp.w2", p.check(p.pair.nonsink_mlp.params["w2"], probes, seed + 1)),
        ("lm->reweighter.w1", p.check(p.rw.params["w1"], probes, seed + 2)),
        ("lm->reweighter.w2", p.check(p.rw.params["w2"], probes, seed + 3)),
    ]
