"""Deterministic ViT fixtures with injected or emergent high-norm tokens."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .data import Vocab, encode_patches
from .errors import ArgumentError
from .models import ToyViT, ViTConfig
from .sinks import PhiKind, SinkCriterion, detect_sinks
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class FixtureMode(str, Enum):
    INJECTED = "injected"
    EMERGENT = "emergent"


@dataclass
class FixtureReport:
    mode: FixtureMode
    k: int
    gain: float
    tau: float
    sink_slots: np.ndarray
    min_sink_norm: float
    max_nonsink_norm: float
    notes: dict = field(default_factory=dict)

    @property
    def criterion(self) -> SinkCriterion:
        return SinkCriterion(PhiKind.NORM, self.tau)


def calibration_patches(seed: int, vocab: Vocab, count: int = 64) -> np.ndarray:
    """Random grids spanning one-color to uniform-palette images."""
    rng = np.random.default_rng([seed, 0xCA1])
    G = vocab.grid
    out = []
    for i in range(count):
        used = 1 + i % vocab.n_colors
        palette = rng.choice(vocab.n_colors, size=used, replace=False)
        colors = rng.choice(palette, size=(G, G))
        shapes = rng.integers(0, vocab.n_shapes, size=(G, G))
        cell = (int(rng.integers(G)), int(rng.integers(G))) if i % 2 else None
        out.append(encode_patches(colors, shapes, vocab.n_colors, vocab.n_shapes, cell))
    return np.stack(out)


def _structure_embeddings(vit: ToyViT, vocab: Vocab, rng) -> None:
    """Patch one-hots to dims [0, P); row and column one-hots after that."""
    cfg = vit.cfg
    G, P = vocab.grid, vocab.patch_dim
    if P + 2 * G > cfg.dim:
        raise ArgumentError(f"ViT dim {cfg.dim} too small for structured embeddings")
    w = np.zeros((cfg.patch_dim, cfg.dim), np.float32)
    w[np.arange(P), np.arange(P)] = 1.0
    pos = np.zeros((cfg.n_patches, cfg.dim), np.float32)
    cells = np.arange(cfg.n_patches)
    pos[cells, P + cells // G] = 1.0
    pos[cells, P + G + cells % G] = 1.0
    pos[:, P + 2 * G:] = rng.normal(0, 0.1, (cfg.n_patches, cfg.dim - P - 2 * G))
    vit.params["patch_embed.w"].data[...] = w
    vit.params["patch_embed.b"].data[...] = 0.0
    vit.params["pos_embed"].data[...] = pos
    # keep blocks as small perturbations of the residual stream
    for name, t in vit.params.items():
        if name.endswith((".wo", ".w2")):
            t.data *= 0.1


def build_injected(seed: int = 0, k: int = 3, gain: float = 40.0, vocab: Vocab | None = None,
                   cfg: ViTConfig | None = None) -> tuple[ToyViT, FixtureReport]:
    """ViT whose k gated slots receive gain * mean-pooled features.

    The summary is added right after the block feeding the extraction layer,
    so the extracted features of the gated slots carry the whole-image
    average at a norm far above every other token.
    """
    vocab = vocab or Vocab()
    cfg = cfg or ViTConfig(n_patches=vocab.grid ** 2, patch_dim=vocab.patch_dim)
    if not 0 <= k <= cfg.n_patches:
        raise ArgumentError(f"k={k} outside 0..{cfg.n_patches}")
    if gain <= 0:
        raise ArgumentError("gain must be positive")
    rng = np.random.default_rng([seed, 0xF1C])
    vit = ToyViT(cfg, seed=seed)
    _structure_embeddings(vit, vocab, rng)
    slots = np.sort(rng.choice(cfg.n_patches, size=k, replace=False)).astype(np.int64)
    gate = np.zeros(cfg.n_patches, np.float32)
    gate[slots] = 1.0
    vit.install_summary(gate, gain, after_block=vit.extract_index - 1)

    feats, _ = vit.forward(Tensor(calibration_patches(seed, vocab)))
    norms = np.sqrt((feats.data.astype(np.float64) ** 2).sum(-1))
    rest = np.setdiff1d(np.arange(cfg.n_patches), slots)
    max_non = float(norms[:, rest].max())
    if k:
        min_sink = float(norms[:, slots].min())
        if min_sink <= max_non:
            raise ArgumentError(f"gain {gain} too small: sink norm {min_sink:.3f} <= {max_non:.3f}")
        tau = 0.5 * (min_sink + max_non)
    else:
        min_sink = float("inf")
        tau = 2.0 * max_non
    report = FixtureReport(FixtureMode.INJECTED, k, gain, tau, slots, min_sink, max_non)
    return vit, report


def build_emergent(seed: int = 0, steps: int = 40, lr: float = 0.05, vocab: Vocab | None = None,
                   cfg: ViTConfig | None = None) -> tuple[ToyViT, FixtureReport]:
    """Briefly train a ViT to classify the majority color and report any high-norm tokens."""
    vocab = vocab or Vocab()
    cfg = cfg or ViTConfig(n_patches=vocab.grid ** 2, patch_dim=vocab.patch_dim)
    vit = ToyViT(cfg, seed=seed)
    rng = np.random.default_rng([seed, 0xE3E])
    head = Tensor(rng.normal(0, 1 / np.sqrt(cfg.dim), (cfg.dim, vocab.n_colors)).astype(np.float32))
    params = vit.parameters() + [head]
    losses = []
    for step in range(steps):
        G = vocab.grid
        colors = rng.integers(0, vocab.n_colors, size=(16, G, G))
        shapes = rng.integers(0, vocab.n_shapes, size=(16, G, G))
        x = np.stack([encode_patches(c, s, vocab.n_colors, vocab.n_shapes) for c, s in zip(colors, shapes)])
        y = np.array([np.bincount(c.reshape(-1), minlength=vocab.n_colors).argmax() for c in colors])
        with Tape(params, check_finite=True) as tape:
            feats, _ = vit.forward(Tensor(x), layer=cfg.layers)
            pooled = T.scale(T.matmul(Tensor(np.full((1, cfg.n_patches), 1.0, np.float32)), feats),
                             1.0 / cfg.n_patches)
            loss = T.cross_entropy(T.reshape(T.matmul(pooled, head), (16, vocab.n_colors)), y)
        tape.backward(loss)
        for p in params:
            p.data -= np.float32(lr) * p.grad
        losses.append(loss.item())

    feats, _ = vit.forward(Tensor(calibration_patches(seed, vocab)))
    norms = np.sqrt((feats.data.astype(np.float64) ** 2).sum(-1))
    tau = 3.0 * float(np.median(norms))
    counts = [len(detect_sinks(f, SinkCriterion(PhiKind.NORM, tau))) for f in feats.data]
    slots = np.flatnonzero((norms >= tau).any(axis=0))
    log.info("emergent fixture: mean sink count %.2f at tau %.3f", float(np.mean(counts)), tau)
    report = FixtureReport(FixtureMode.EMERGENT, int(round(np.mean(counts))), 0.0, tau, slots,
                           float(norms.max()), float(np.median(norms)),
                           notes={"losses": losses, "sink_counts": counts})
    return vit, report


def build_fixture(mode: FixtureMode | str = FixtureMode.INJECTED, seed: int = 0, **kwargs):
    mode = FixtureMode(mode)
    if mode is FixtureMode.INJECTED:
        return build_injected(seed, **kwargs)
    return build_emergent(seed, **kwargs)
