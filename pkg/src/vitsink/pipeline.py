"""End-to-end toy vision-language model: ViT -> connectors -> toy LM."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as T
from .connector import MlpConnector, Placement, ProjectorPair, ReorderPlan, project_dual
from .data import SyntheticExample, Vocab
from .errors import ArgumentError, DimensionError
from .models import ToyLM, ToyViT
from .sequence import Role, TokenSequence
from .sinks import PhiKind, SinkCriterion, detect_sinks
from .tensor import Tensor


class TokenMode(str, Enum):
    """Which visual tokens reach the LM. Removal, not zero-scaling."""

    BOTH = "both"
    SINK_ONLY = "sink_only"
    NONSINK_ONLY = "nonsink_only"


class Projector(str, Enum):
    DUAL = "dual"
    SINGLE = "single"


@dataclass
class VisualCache:
    """Frozen ViT outputs for a list of examples."""

    features: np.ndarray  # (N, n, D')
    sinks: list[np.ndarray]
    norms: np.ndarray  # (N, n)

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class Batch:
    seq: TokenSequence
    sink_flags: np.ndarray  # (m,) per visual slot, shared by the batch
    answers: np.ndarray | None


class ToyVLM:
    """Glue that owns the frozen ViT, the connectors and the LM."""

    def __init__(self, vit: ToyViT, lm: ToyLM, pair: ProjectorPair, vocab: Vocab, tau_vit: float,
                 plan: ReorderPlan | None = None, single: MlpConnector | None = None):
        self.vit, self.lm, self.pair, self.vocab = vit, lm, pair, vocab
        self.tau_vit = float(tau_vit)
        self.plan = plan or ReorderPlan()
        self.single = single
        self.reweighter = None

    @property
    def n_visual(self) -> int:
        return self.vit.cfg.n_patches

    @property
    def n_sys(self) -> int:
        return len(self.vocab.sys)

    def groups(self) -> dict[str, dict[str, Tensor]]:
        out = {
            "vit": dict(self.vit.params),
            "lm": dict(self.lm.params),
            "sink_mlp": dict(self.pair.sink_mlp.params),
            "nonsink_mlp": dict(self.pair.nonsink_mlp.params),
        }
        if self.single is not None:
            out["single_mlp"] = dict(self.single.params)
        if self.reweighter is not None:
            out["reweighter"] = dict(self.reweighter.params)
        return out

    def state(self) -> dict[str, np.ndarray]:
        """Flat name -> array view of every module (buffers included)."""
        mods = {"vit": self.vit, "lm": self.lm, "sink_mlp": self.pair.sink_mlp,
                "nonsink_mlp": self.pair.nonsink_mlp}
        if self.single is not None:
            mods["single_mlp"] = self.single
        if self.reweighter is not None:
            mods["reweighter"] = self.reweighter
        return {f"{g}/{k}": v for g, m in mods.items() for k, v in m.state().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        mods = {"vit": self.vit, "lm": self.lm, "sink_mlp": self.pair.sink_mlp,
                "nonsink_mlp": self.pair.nonsink_mlp, "single_mlp": self.single,
                "reweighter": self.reweighter}
        for g, m in mods.items():
            if m is None:
                continue
            sub = {k.split("/", 1)[1]: v for k, v in state.items() if k.startswith(g + "/")}
            m.load_state(sub)

    # -- vision side ---------------------------------------------------------

    def sink_criterion(self) -> SinkCriterion:
        return SinkCriterion(PhiKind.NORM, self.tau_vit)

    def encode_images(self, examples: list[SyntheticExample], batch: int = 64) -> VisualCache:
        feats = []
        for i in range(0, len(examples), batch):
            x = np.stack([e.patches for e in examples[i:i + batch]])
            f, _ = self.vit.forward(Tensor(x))
            feats.append(f.data)
        features = np.concatenate(feats) if feats else np.zeros((0, self.n_visual, self.vit.cfg.dim), np.float32)
        crit = self.sink_criterion()
        sinks = [detect_sinks(f, crit).indices for f in features]
        norms = np.sqrt((features.astype(np.float64) ** 2).sum(-1))
        return VisualCache(features, sinks, norms)

    # -- sequence assembly ---------------------------------------------------

    def visual_layout(self, sinks: np.ndarray, mode: TokenMode) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(source patch index per visual slot, position id per slot, sink flag per slot)."""
        n = self.n_visual
        perm = self.plan.permutation(n, sinks)
        pos = self.n_sys + (perm if self.plan.position_ids.value == "transport" else np.arange(n))
        flags = np.isin(perm, sinks)
        keep = {TokenMode.BOTH: np.ones(n, bool), TokenMode.SINK_ONLY: flags,
                TokenMode.NONSINK_ONLY: ~flags}[TokenMode(mode)]
        if self.plan.position_ids.value == "reassign" and mode is not TokenMode.BOTH:
            pos = self.n_sys + np.arange(int(keep.sum()))
            return perm[keep], pos, flags[keep]
        return perm[keep], pos[keep], flags[keep]

    def layout_key(self, sinks: np.ndarray, mode: TokenMode) -> tuple:
        src, pos, flags = self.visual_layout(sinks, mode)
        return tuple(flags.tolist())

    def project(self, x: Tensor, flags: np.ndarray, projector: Projector) -> Tensor:
        if Projector(projector) is Projector.SINGLE:
            if self.single is None:
                raise ArgumentError("no single connector attached")
            return self.single(x)
        return project_dual(x, np.flatnonzero(flags), self.pair)

    def build(self, cache: VisualCache, rows, queries: np.ndarray, mode: TokenMode = TokenMode.BOTH,
              answers=None, projector: Projector = Projector.DUAL, weights: Tensor | None = None) -> Batch:
        """Assemble [sys; visual; query; answer?] for a batch sharing one visual layout.

        ``weights`` is an optional (B, 2) tensor of (w_sink, w_nonsink)
        multiplying the projected rows; zero-weight rows keep their slots.
        """
        rows = np.asarray(rows, dtype=np.int64)
        B = rows.size
        layouts = [self.visual_layout(cache.sinks[r], mode) for r in rows]
        flags = layouts[0][2]
        if any(not np.array_equal(l[2], flags) for l in layouts[1:]):
            raise ArgumentError("batch members must share a visual layout; group by layout_key")
        src = np.stack([l[0] for l in layouts])
        vpos = np.stack([l[1] for l in layouts])
        m = src.shape[1]
        lm = self.lm
        sys_ids = np.broadcast_to(np.array(self.vocab.sys), (B, self.n_sys))
        parts = [lm.embed_tokens(sys_ids)]
        if m:
            x = Tensor(np.take_along_axis(cache.features[rows], src[:, :, None], axis=1))
            proj = self.project(x, flags, projector)
            if weights is not None:
                if weights.shape != (B, 2):
                    raise DimensionError(f"weights shape {weights.shape} != ({B}, 2)")
                mult = T.reshape(T.take(weights, np.where(flags, 0, 1), axis=1), (B, m, 1))
                proj = T.mul(proj, mult)
            parts.append(proj)
        q = np.asarray(queries, dtype=np.int64)
        txt_pos = self.n_sys + self.n_visual + np.arange(q.shape[1])
        parts.append(lm.embed_tokens(q))
        pos = [np.broadcast_to(np.arange(self.n_sys), (B, self.n_sys)), vpos,
               np.broadcast_to(txt_pos, (B, q.shape[1]))]
        roles = [np.full(self.n_sys, Role.SYS), np.full(m, Role.VIS), np.full(q.shape[1], Role.TXT)]
        tok = [sys_ids, np.full((B, m), -1), q]
        ans = None
        if answers is not None:
            ans = np.asarray(answers, dtype=np.int64).reshape(B, 1)
            parts.append(lm.embed_tokens(ans))
            pos.append(np.full((B, 1), txt_pos[-1] + 1))
            roles.append(np.array([Role.OUT]))
            tok.append(ans)
        seq = TokenSequence(T.concat(parts, axis=1), np.concatenate(pos, axis=1),
                            np.concatenate(roles), np.concatenate(tok, axis=1))
        return Batch(seq, flags, None if ans is None else ans[:, 0])

    # -- heads ---------------------------------------------------------------

    def loss(self, batch: Batch, capture: bool = False):
        """Next-token cross-entropy on the answer slot(s); returns (loss, logits, trace)."""
        from .training import lm_loss

        logits, trace = self.lm.forward(batch.seq.embeddings, batch.seq.position_ids, capture=capture)
        out_mask = batch.seq.roles == Role.OUT
        return lm_loss(logits, batch.seq.token_ids, out_mask), logits, trace

    def answer_logits(self, batch: Batch) -> np.ndarray:
        """Logits at the last prompt slot, which emits the first output token."""
        logits, _ = self.lm.forward(batch.seq.embeddings, batch.seq.position_ids)
        last = int(np.flatnonzero(batch.seq.roles != Role.OUT)[-1])
        return logits.data[:, last]

    def predict(self, examples: list[SyntheticExample], cache: VisualCache | None = None,
                mode: TokenMode = TokenMode.BOTH, projector: Projector = Projector.DUAL,
                weights: np.ndarray | None = None, batch_size: int = 64) -> np.ndarray:
        """Greedy answer tokens restricted to the answer vocabulary."""
        cache = cache or self.encode_images(examples)
        allowed = self.vocab.answers
        preds = np.zeros(len(examples), dtype=np.int64)
        for rows in group_rows(self, cache, mode, batch_size):
            q = np.stack([examples[r].query for r in rows])
            w = None if weights is None else Tensor(np.asarray(weights)[rows])
            b = self.build(cache, rows, q, mode, projector=projector, weights=w)
            lg = self.answer_logits(b)
            preds[rows] = allowed[np.argmax(lg[:, allowed], axis=1)]
        return preds


def group_rows(vlm: ToyVLM, cache: VisualCache, mode: TokenMode, batch_size: int,
               order: np.ndarray | None = None) -> list[np.ndarray]:
    """Split rows into batches whose members share a visual layout, in a fixed order."""
    order = np.arange(len(cache)) if order is None else np.asarray(order)
    groups: dict[tuple, list[int]] = {}
    for r in order:
        groups.setdefault(vlm.layout_key(cache.sinks[r], mode), []).append(int(r))
    out = []
    for key in groups:
        rows = groups[key]
        out.extend(np.array(rows[i:i + batch_size]) for i in range(0, len(rows), batch_size))
    return out


def build_vlm(vit: ToyViT, tau_vit: float, seed: int = 0, vocab: Vocab | None = None, lm: ToyLM | None = None,
              plan: ReorderPlan | None = None, with_single: bool = False) -> ToyVLM:
    vocab = vocab or Vocab()
    lm = lm or ToyLM(seed=seed)
    d_in, d_out = vit.cfg.dim, lm.cfg.dim
    pair = ProjectorPair.create(d_in, d_out, seed=seed + 101)
    single = MlpConnector(d_in, d_out, seed=seed + 303) if with_single else None
    return ToyVLM(vit, lm, pair, vocab, tau_vit, plan, single)
