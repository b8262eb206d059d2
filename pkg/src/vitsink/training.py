"""Connector pretraining, joint fine-tuning and reweighter training."""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ArgumentError, FreezeViolation, NumericError
from .pipeline import Batch, Projector, TokenMode, ToyVLM, VisualCache, group_rows
from .selection import Reweighter, embed_queries
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 0.05
    batch_size: int = 32
    steps: int = 500
    seed: int = 0
    frozen: tuple[str, ...] = ()
    report_every: int = 50
    max_grad_norm: float | None = 1.0
    optimizer: str = "sgd"  # sgd | adam
    reshuffle: bool = False

    def __post_init__(self):
        if not self.lr > 0:
            raise ArgumentError(f"learning rate must be positive, got {self.lr}")
        if self.batch_size < 1 or self.steps < 0:
            raise ArgumentError("batch_size must be >= 1 and steps >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ArgumentError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    frozen_hashes: dict[str, str] = field(default_factory=dict)

    @property
    def initial(self) -> float:
        return self.losses[0]

    @property
    def final(self) -> float:
        return float(np.mean(self.losses[-max(1, len(self.losses) // 20):]))


def lm_loss(logits: Tensor, targets, output_mask) -> Tensor:
    """Mean next-token cross-entropy: logits at slot t-1 score the token at slot t, for masked t."""
    tgt = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(output_mask, dtype=bool)
    L = logits.shape[-2]
    if mask.shape[-1] != L or tgt.shape[-1] != L:
        raise ArgumentError("targets and mask must cover every slot")
    if not mask.any():
        raise ArgumentError("empty output mask")
    if mask[..., 0].any():
        raise ArgumentError("slot 0 has no preceding token to predict it")
    if mask.ndim == 1:
        slots = np.flatnonzero(mask)
        picked = T.take(logits, slots - 1, axis=logits.ndim - 2)
        return T.cross_entropy(picked, np.take(tgt, slots, axis=-1))
    shifted = T.take(logits, np.arange(L - 1), axis=logits.ndim - 2)
    return T.cross_entropy(shifted, tgt[..., 1:], mask[..., 1:])


def hash_group(params: dict[str, Tensor]) -> str:
    h = hashlib.blake2b(digest_size=16)
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name].data).tobytes())
    return h.hexdigest()


def hash_groups(groups: dict[str, dict[str, Tensor]], names) -> dict[str, str]:
    return {n: hash_group(groups[n]) for n in names}


class _Optimizer:
    def __init__(self, params: list[Tensor], cfg: TrainConfig):
        self.params, self.cfg = params, cfg
        self.t = 0
        if cfg.optimizer == "adam":
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        cfg = self.cfg
        grads = [p.grad for p in self.params]
        if cfg.max_grad_norm is not None:
            norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
            if norm > cfg.max_grad_norm:
                c = np.float32(cfg.max_grad_norm / norm)
                grads = [g * c for g in grads]
        self.t += 1
        lr = np.float32(cfg.lr)
        if cfg.optimizer == "sgd":
            for p, g in zip(self.params, grads):
                p.data -= lr * g
            return
        b1, b2, eps = 0.9, 0.999, 1e-8
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mh = m / (1 - b1 ** self.t)
            vh = v / (1 - b2 ** self.t)
            p.data -= (lr * mh / (np.sqrt(vh) + eps)).astype(p.dtype)


def run_training(vlm: ToyVLM, trainable: list[str], loss_fn: Callable[[int], Tensor], cfg: TrainConfig,
                 extra_groups: dict[str, dict[str, Tensor]] | None = None) -> TrainResult:
    """Generic loop: SGD (or Adam) on the named groups, freeze check on every other group."""
    groups = vlm.groups()
    if extra_groups:
        groups.update(extra_groups)
    for name in list(trainable) + list(cfg.frozen):
        if name not in groups:
            raise ArgumentError(f"unknown parameter group {name!r}; have {sorted(groups)}")
    overlap = set(trainable) & set(cfg.frozen)
    if overlap:
        raise ArgumentError(f"groups both trainable and frozen: {sorted(overlap)}")
    params = [t for n in trainable for t in groups[n].values()]
    live = {id(t) for t in params}
    # a group that aliases trainable tensors (a tied pair) is neither trained twice nor frozen
    frozen = [n for n in groups if n not in trainable
              and not all(id(t) in live for t in groups[n].values())]
    before = hash_groups(groups, frozen)
    opt = _Optimizer(params, cfg)
    result = TrainResult(frozen_hashes=before)
    for step in range(cfg.steps):
        with Tape(params, check_finite=True) as tape:
            try:
                loss = loss_fn(step)
            except NumericError as e:
                raise NumericError(f"step {step}: {e}") from e
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss at step {step}")
        tape.backward(loss)
        opt.step()
        result.losses.append(value)
        if cfg.report_every and step % cfg.report_every == 0:
            log.info("step %d loss %.4f", step, value)
    for p in params:
        p.grad = None
    after = hash_groups(groups, frozen)
    changed = [n for n in frozen if after[n] != before[n]]
    if changed:
        raise FreezeViolation(f"frozen groups modified: {changed}")
    return result


def batch_schedule(vlm: ToyVLM, cache: VisualCache, mode: TokenMode, cfg: TrainConfig) -> Callable[[int], np.ndarray]:
    """Fixed seeded order over layout-homogeneous batches, cycled by step."""
    n = len(cache)
    if n == 0:
        raise ArgumentError("empty training set")

    def epoch(e: int) -> list[np.ndarray]:
        order = np.random.default_rng([cfg.seed, 0x5EED, e if cfg.reshuffle else 0]).permutation(n)
        return group_rows(vlm, cache, mode, cfg.batch_size, order)

    cached: dict[int, list[np.ndarray]] = {}
    first = epoch(0)
    cached[0] = first
    per_epoch = len(first)

    def rows_for(step: int) -> np.ndarray:
        e = step // per_epoch if cfg.reshuffle else 0
        if e not in cached:
            cached.clear()
            cached[e] = epoch(e)
        return cached[e][step % per_epoch]

    return rows_for


def _supervised_loss(vlm, examples, cache, mode, projector, rows_for, weights_fn=None):
    def loss_fn(step: int) -> Tensor:
        rows = rows_for(step)
        q = np.stack([examples[r].query for r in rows])
        a = np.array([examples[r].answer for r in rows])
        w = None if weights_fn is None else weights_fn(rows)
        batch: Batch = vlm.build(cache, rows, q, mode, answers=a, projector=projector, weights=w)
        loss, _, _ = vlm.loss(batch)
        return loss

    return loss_fn


def pretrain_dual(vlm: ToyVLM, examples, cfg: TrainConfig, cache: VisualCache | None = None,
                  which: tuple[str, ...] = ("sink", "nonsink")) -> dict[str, TrainResult]:
    """Train each connector on its own token class with every other group frozen.

    The two runs share no parameters, so their order does not matter.
    """
    cache = cache or vlm.encode_images(examples)
    out = {}
    for name in which:
        mode = TokenMode.SINK_ONLY if name == "sink" else TokenMode.NONSINK_ONLY
        rows_for = batch_schedule(vlm, cache, mode, cfg)
        loss_fn = _supervised_loss(vlm, examples, cache, mode, Projector.DUAL, rows_for)
        out[name] = run_training(vlm, [f"{name}_mlp"], loss_fn, cfg)
    return out


def finetune(vlm: ToyVLM, examples, cfg: TrainConfig, cache: VisualCache | None = None,
             projector: Projector = Projector.DUAL) -> TrainResult:
    """Joint training of the connector(s) and the LM on the full visual sequence; ViT frozen."""
    cache = cache or vlm.encode_images(examples)
    rows_for = batch_schedule(vlm, cache, TokenMode.BOTH, cfg)
    loss_fn = _supervised_loss(vlm, examples, cache, TokenMode.BOTH, Projector(projector), rows_for)
    groups = ["lm", "sink_mlp", "nonsink_mlp"] if Projector(projector) is Projector.DUAL else ["lm", "single_mlp"]
    if vlm.pair.tied:
        groups = ["lm", "sink_mlp"]
    return run_training(vlm, groups, loss_fn, cfg)


def train_reweighter(vlm: ToyVLM, rw: Reweighter, examples, cfg: TrainConfig,
                     cache: VisualCache | None = None) -> TrainResult:
    """Only the reweighter learns; the loss flows back through the frozen LM."""
    cache = cache or vlm.encode_images(examples)
    vlm.reweighter = rw
    qemb = embed_queries(vlm.lm, [e.query for e in examples])
    rows_for = batch_schedule(vlm, cache, TokenMode.BOTH, cfg)
    loss_fn = _supervised_loss(vlm, examples, cache, TokenMode.BOTH, Projector.DUAL, rows_for,
                               weights_fn=lambda rows: rw(Tensor(qemb[rows])))
    return run_training(vlm, ["reweighter"], loss_fn, cfg)


def write_loss_csv(path, losses) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("step", "loss"))
        w.writerows((i, repr(float(v))) for i, v in enumerate(losses))
    return path
