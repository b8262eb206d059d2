"""Toy vision encoder and toy causal language model with full capture."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ArgumentError, DimensionError
from .sequence import Role, TokenSequence
from .tensor import Tensor

MASK_VALUE = -1e9


class ParamModule:
    """Flat name -> Tensor parameter registry with buffers."""

    def __init__(self):
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, Tensor] = {}

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out.update({f"buffer:{k}": v.data for k, v in self.buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, t in list(self.params.items()) + [
            (f"buffer:{k}", v) for k, v in self.buffers.items()
        ]:
            if name not in state:
                raise DimensionError(f"missing tensor '{name}'")
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise DimensionError(f"'{name}': shape {arr.shape} != {t.shape}")
            t.data[...] = arr

    def astype(self, dtype):
        """Cast every parameter and buffer in place."""
        for t in list(self.params.values()) + list(self.buffers.values()):
            t.data = np.ascontiguousarray(t.data, dtype=dtype)
        return self


def _normal(rng, shape, std) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(np.float32))


def _ones(d) -> Tensor:
    return Tensor(np.ones(d, dtype=np.float32))


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=np.float32))


@dataclass
class CaptureTrace:
    """Hidden states for layers 0..L and per-layer attention (heads, T, T)."""

    hidden: list[np.ndarray] = field(default_factory=list)
    attention: list[np.ndarray] = field(default_factory=list)
    roles: np.ndarray | None = None


# ---------------------------------------------------------------------------
# rotary position encoding


def rope_tables(position_ids, head_dim: int, base: float = 10000.0):
    if head_dim % 2:
        raise DimensionError(f"rotary encoding needs an even head dim, got {head_dim}")
    pos = np.asarray(position_ids, dtype=np.float64)
    if np.any(pos < 0):
        raise ArgumentError("position ids must be non-negative")
    freqs = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = pos[..., None] * freqs
    cos = np.repeat(np.cos(ang), 2, axis=-1)
    sin = np.repeat(np.sin(ang), 2, axis=-1)
    sin[..., 0::2] *= -1.0
    return cos, sin


def apply_rope(x: Tensor, position_ids, base: float = 10000.0) -> Tensor:
    """Rotate each (2k, 2k+1) pair of the last axis by position_id * base^(-2k/d).

    ``x`` is (..., seq, head_dim); ``position_ids`` is (seq,) or broadcastable
    to x's leading dims with a trailing seq axis.
    """
    d = x.shape[-1]
    cos, sin = rope_tables(position_ids, d, base)
    if cos.ndim == 3 and x.ndim == 4:  # (B, T, d) ids against (B, H, T, d)
        cos, sin = cos[:, None], sin[:, None]
    swap = np.arange(d).reshape(-1, 2)[:, ::-1].reshape(-1)
    rotated = T.take(x, swap, axis=-1)
    return T.add(T.mul(x, Tensor(cos, dtype=x.dtype)), T.mul(rotated, Tensor(sin, dtype=x.dtype)))


# ---------------------------------------------------------------------------
# shared blocks


def _attention(h, p, prefix, heads, mask, rope_ids, rope_base, capture):
    B, L, D = h.shape
    dh = D // heads

    def split(t):
        return T.transpose(T.reshape(t, (B, L, heads, dh)), (0, 2, 1, 3))

    q = split(T.matmul(h, p[prefix + "wq"]))
    k = split(T.matmul(h, p[prefix + "wk"]))
    v = split(T.matmul(h, p[prefix + "wv"]))
    if rope_ids is not None:
        q = apply_rope(q, rope_ids, rope_base)
        k = apply_rope(k, rope_ids, rope_base)
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / np.sqrt(dh))
    if mask is not None:
        scores = T.add(scores, mask)
    attn = T.softmax(scores)
    if capture is not None:
        capture.attention.append(attn.data.copy())
    o = T.reshape(T.transpose(T.matmul(attn, v), (0, 2, 1, 3)), (B, L, D))
    return T.matmul(o, p[prefix + "wo"])


def _mlp(h, p, prefix):
    z = T.gelu(T.add(T.matmul(h, p[prefix + "w1"]), p[prefix + "b1"]))
    return T.add(T.matmul(z, p[prefix + "w2"]), p[prefix + "b2"])


def _block(x, p, i, heads, eps, mask, rope_ids, rope_base, capture):
    pre = f"blocks.{i}."
    h = T.rmsnorm(x, p[pre + "norm1"], eps)
    x = T.add(x, _attention(h, p, pre, heads, mask, rope_ids, rope_base, capture))
    h = T.rmsnorm(x, p[pre + "norm2"], eps)
    return T.add(x, _mlp(h, p, pre))


def _init_blocks(params, rng, layers, dim, hidden, out_std):
    std = 1.0 / np.sqrt(dim)
    for i in range(layers):
        pre = f"blocks.{i}."
        params[pre + "norm1"] = _ones(dim)
        for name in ("wq", "wk", "wv"):
            params[pre + name] = _normal(rng, (dim, dim), std)
        params[pre + "wo"] = _normal(rng, (dim, dim), out_std)
        params[pre + "norm2"] = _ones(dim)
        params[pre + "w1"] = _normal(rng, (dim, hidden), std)
        params[pre + "b1"] = _zeros(hidden)
        params[pre + "w2"] = _normal(rng, (hidden, dim), out_std)
        params[pre + "b2"] = _zeros(dim)


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1,) + x.shape), True
    return x, False


def _unbatch_trace(trace: CaptureTrace | None) -> None:
    if trace is None:
        return
    trace.hidden = [h[0] for h in trace.hidden]
    trace.attention = [a[0] for a in trace.attention]


# ---------------------------------------------------------------------------
# vision encoder


@dataclass
class ViTConfig:
    n_patches: int = 64
    patch_dim: int = 9
    dim: int = 32
    layers: int = 4
    heads: int = 4
    mlp_hidden: int = 64
    extract_layer: int = -2  # -2: second-to-last block output, -1: last
    eps: float = 1e-6


class ToyViT(ParamModule):
    """Non-causal pre-norm transformer over a grid of patch vectors.

    ``hidden[0]`` is the embedded input and ``hidden[l]`` the residual stream
    after block l, so the second-to-last layer is ``hidden[layers - 1]``.
    An optional summary pathway (installed by the injected-sink fixture) adds
    ``gain * mean_tokens(x)`` to the gated token slots after a given block.
    """

    def __init__(self, cfg: ViTConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or ViTConfig()
        if cfg.dim % cfg.heads:
            raise DimensionError("ViT dim must be divisible by heads")
        rng = np.random.default_rng(seed)
        p = self.params
        p["patch_embed.w"] = _normal(rng, (cfg.patch_dim, cfg.dim), 1.0 / np.sqrt(cfg.patch_dim))
        p["patch_embed.b"] = _zeros(cfg.dim)
        p["pos_embed"] = _normal(rng, (cfg.n_patches, cfg.dim), 0.5)
        _init_blocks(p, rng, cfg.layers, cfg.dim, cfg.mlp_hidden, 0.5 / np.sqrt(cfg.dim * cfg.layers))

    @property
    def extract_index(self) -> int:
        return self.cfg.layers + 1 + self.cfg.extract_layer

    def install_summary(self, gate: np.ndarray, gain: float, after_block: int) -> None:
        gate = np.asarray(gate, dtype=np.float32).reshape(self.cfg.n_patches, 1)
        self.buffers["summary.gate"] = Tensor(gate)
        self.buffers["summary.gain"] = Tensor(np.array([gain], dtype=np.float32))
        self.buffers["summary.after"] = Tensor(np.array([after_block], dtype=np.float32))

    def forward(self, patches: Tensor, capture: bool = False, layer: int | None = None):
        """Return (features at the extraction layer, trace or None)."""
        cfg = self.cfg
        if patches.shape[-2:] != (cfg.n_patches, cfg.patch_dim):
            raise DimensionError(
                f"expected (.., {cfg.n_patches}, {cfg.patch_dim}) patches, got {patches.shape}"
            )
        x, single = _batched(patches)
        p = self.params
        x = T.add(T.add(T.matmul(x, p["patch_embed.w"]), p["patch_embed.b"]), p["pos_embed"])
        trace = CaptureTrace() if capture else None
        hidden = [x]
        after = int(self.buffers["summary.after"].data[0]) if "summary.gate" in self.buffers else -1
        for i in range(cfg.layers):
            x = _block(x, p, i, cfg.heads, cfg.eps, None, None, 0.0, trace)
            if i == after:
                n = cfg.n_patches
                avg = Tensor(np.full((n, n), 1.0 / n, dtype=x.dtype))
                gated = T.mul(T.matmul(avg, x), self.buffers["summary.gate"])
                x = T.add(x, T.scale(gated, float(self.buffers["summary.gain"].data[0])))
            hidden.append(x)
        idx = self.extract_index if layer is None else layer
        if not 0 <= idx <= cfg.layers:
            raise ArgumentError(f"layer {idx} outside 0..{cfg.layers}")
        feats = hidden[idx]
        if trace is not None:
            trace.hidden = [h.data for h in hidden]
            if single:
                _unbatch_trace(trace)
        if single:
            feats = T.reshape(feats, feats.shape[1:])
        return feats, trace


def vit_forward(vit: ToyViT, image_patches: Tensor, capture: bool = False):
    return vit.forward(image_patches, capture)


# ---------------------------------------------------------------------------
# language model


@dataclass
class LMConfig:
    vocab: int = 64
    dim: int = 48
    layers: int = 4
    heads: int = 4
    mlp_hidden: int = 96
    rope_base: float = 10000.0
    eps: float = 1e-6


def causal_visibility(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


class ToyLM(ParamModule):
    """Causal pre-norm transformer with rotary positions on q and k.

    Causality follows slot order in the sequence; rotary angles follow the
    per-token position ids, which may be non-monotone after reordering.
    """

    def __init__(self, cfg: LMConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg = cfg or LMConfig()
        if cfg.dim % cfg.heads:
            raise DimensionError("LM dim must be divisible by heads")
        if (cfg.dim // cfg.heads) % 2:
            raise DimensionError("LM head dim must be even for rotary encoding")
        rng = np.random.default_rng(seed)
        p = self.params
        p["embed"] = _normal(rng, (cfg.vocab, cfg.dim), 1.0)
        _init_blocks(p, rng, cfg.layers, cfg.dim, cfg.mlp_hidden, 0.5 / np.sqrt(cfg.dim * cfg.layers))
        p["norm_f"] = _ones(cfg.dim)
        p["head"] = _normal(rng, (cfg.dim, cfg.vocab), 1.0 / np.sqrt(cfg.dim))

    def embed_tokens(self, ids) -> Tensor:
        return T.embedding(self.params["embed"], ids)

    def forward(
        self,
        embeddings: Tensor,
        position_ids,
        visible: np.ndarray | None = None,
        capture: bool = False,
    ):
        """Return (logits, trace). ``visible[i, j]`` allows i to attend j.

        The default visibility is causal in slot order; a custom matrix is
        intersected with nothing, so callers are responsible for causality.
        """
        cfg = self.cfg
        if embeddings.shape[-1] != cfg.dim:
            raise DimensionError(f"embedding dim {embeddings.shape[-1]} != {cfg.dim}")
        x, single = _batched(embeddings)
        B, L, _ = x.shape
        pos = np.asarray(position_ids, dtype=np.int64)
        if pos.shape[-1] != L:
            raise DimensionError(f"{pos.shape[-1]} position ids for {L} tokens")
        if np.any(pos < 0):
            raise ArgumentError("position ids must be non-negative")
        if pos.ndim == 2 and pos.shape[0] == 1 and single:
            pos = pos[0]
        vis = causal_visibility(L) if visible is None else np.asarray(visible, dtype=bool)
        add_mask = np.where(vis, 0.0, MASK_VALUE).astype(x.dtype)
        if add_mask.ndim == 3:
            add_mask = add_mask[:, None]
        mask = Tensor(add_mask)
        trace = CaptureTrace() if capture else None
        hidden = [x]
        p = self.params
        for i in range(cfg.layers):
            x = _block(x, p, i, cfg.heads, cfg.eps, mask, pos, cfg.rope_base, trace)
            hidden.append(x)
        logits = T.matmul(T.rmsnorm(x, p["norm_f"], cfg.eps), p["head"])
        if trace is not None:
            trace.hidden = [h.data for h in hidden]
            if single:
                _unbatch_trace(trace)
        if single:
            logits = T.reshape(logits, logits.shape[1:])
        return logits, trace

    def final_hidden(self, embeddings: Tensor, position_ids, visible=None) -> np.ndarray:
        _, trace = self.forward(embeddings, position_ids, visible, capture=True)
        return trace.hidden[-1]

    def head_logits(self, hidden: Tensor) -> Tensor:
        return T.matmul(T.rmsnorm(hidden, self.params["norm_f"], self.cfg.eps), self.params["head"])


def lm_forward(lm: ToyLM, seq: TokenSequence, capture: bool = False):
    logits, trace = lm.forward(seq.embeddings, seq.position_ids, capture=capture)
    if trace is not None:
        trace.roles = seq.roles.copy()
    return logits, trace


def generate(
    lm: ToyLM,
    seq: TokenSequence,
    max_new: int = 1,
    seed: int | None = None,
    allowed: np.ndarray | None = None,
) -> list[int]:
    """Greedy decoding; ``seed`` is accepted for interface symmetry only.

    Each new token is appended with role OUT and position id max(ids) + 1.
    ``allowed`` restricts the argmax to a subset of the vocabulary.
    """
    if max_new < 1:
        raise ArgumentError("max_new must be >= 1")
    if seq.batched:
        raise DimensionError("generate works on a single sequence")
    emb = seq.embeddings
    pos = list(np.asarray(seq.position_ids).tolist())
    out: list[int] = []
    for _ in range(max_new):
        logits, _ = lm.forward(emb, np.array(pos))
        last = logits.data[-1]
        if allowed is not None:
            allowed_ids = np.asarray(allowed)
            nxt = int(allowed_ids[np.argmax(last[allowed_ids])])
        else:
            nxt = int(np.argmax(last))
        out.append(nxt)
        emb = T.concat([emb, lm.embed_tokens(np.array([nxt]))], axis=0)
        pos.append(max(pos) + 1)
    return out

