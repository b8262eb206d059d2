import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vitsink import tensor as T
from vitsink.errors import ArgumentError, DimensionError
from vitsink.models import LMConfig, ToyLM, ToyViT, ViTConfig, apply_rope, generate, lm_forward
from vitsink.sequence import Role, TokenSequence
from vitsink.tensor import Tensor


@pytest.fixture(scope="module")
def lm():
    return ToyLM(seed=3)


@pytest.fixture(scope="module")
def vit():
    return ToyViT(seed=3)


def _emb(rng, n, d=48):
    return Tensor(rng.normal(size=(n, d)).astype(np.float32))


def test_rope_preserves_norm():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(5, 12)), dtype=np.float64)
    y = apply_rope(x, np.arange(5) * 7)
    assert np.allclose(np.linalg.norm(y.data, axis=-1), np.linalg.norm(x.data, axis=-1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 200))
def test_rope_depends_on_relative_offset_only(p, q, shift):
    rng = np.random.default_rng(p * 1000 + q)
    a = Tensor(rng.normal(size=(1, 12)), dtype=np.float64)
    b = Tensor(rng.normal(size=(1, 12)), dtype=np.float64)
    d1 = (apply_rope(a, [p]).data @ apply_rope(b, [q]).data.T).item()
    d2 = (apply_rope(a, [p + shift]).data @ apply_rope(b, [q + shift]).data.T).item()
    assert d1 == pytest.approx(d2, abs=1e-9)


def test_rope_pair_rotation_oracle():
    x = Tensor(np.array([[1.0, 0.0, 0.0, 1.0]]), dtype=np.float64)
    y = apply_rope(x, [3]).data[0]
    # pair 0 rotates by 3 rad, pair 1 by 3 * 10000^(-1/2)
    a0, a1 = 3.0, 3.0 * 10000 ** -0.5
    assert np.allclose(y, [np.cos(a0), np.sin(a0), -np.sin(a1), np.cos(a1)])


def test_rope_rejects_odd_dim():
    with pytest.raises(DimensionError):
        apply_rope(Tensor(np.ones((2, 5))), [0, 1])


def test_lm_is_causal_bit_exact(lm):
    rng = np.random.default_rng(1)
    emb = _emb(rng, 8)
    pos = np.arange(8)
    logits, _ = lm.forward(emb, pos)
    changed = emb.data.copy()
    changed[5:] += rng.normal(size=(3, 48)).astype(np.float32)
    logits2, _ = lm.forward(Tensor(changed), pos)
    assert np.array_equal(logits.data[:5], logits2.data[:5])
    assert not np.array_equal(logits.data[5:], logits2.data[5:])


def test_vit_is_not_causal(vit):
    rng = np.random.default_rng(2)
    x = rng.normal(size=(64, 9)).astype(np.float32)
    f1, _ = vit.forward(Tensor(x))
    x[-1] += 1.0
    f2, _ = vit.forward(Tensor(x))
    assert not np.array_equal(f1.data[0], f2.data[0])


def test_capture_shapes(lm, vit):
    rng = np.random.default_rng(3)
    _, tr = lm.forward(_emb(rng, 6), np.arange(6), capture=True)
    assert len(tr.hidden) == 5 and tr.hidden[0].shape == (6, 48)
    assert len(tr.attention) == 4 and tr.attention[0].shape == (4, 6, 6)
    assert np.allclose(tr.attention[2].sum(-1), 1.0, atol=1e-5)
    assert np.all(np.triu(tr.attention[1][0], 1) == 0)
    f, tr = vit.forward(Tensor(rng.normal(size=(2, 64, 9)).astype(np.float32)), capture=True)
    assert f.shape == (2, 64, 32)
    assert tr.attention[0].shape == (2, 4, 64, 64)
    assert np.array_equal(f.data, tr.hidden[vit.extract_index])


def test_vit_extraction_is_second_to_last(vit):
    assert vit.extract_index == vit.cfg.layers - 1
    f_last, _ = vit.forward(Tensor(np.zeros((64, 9), np.float32)), layer=vit.cfg.layers)
    assert f_last.shape == (64, 32)
    with pytest.raises(ArgumentError):
        vit.forward(Tensor(np.zeros((64, 9), np.float32)), layer=9)


def test_bad_shapes(lm, vit):
    with pytest.raises(DimensionError):
        vit.forward(Tensor(np.zeros((63, 9), np.float32)))
    with pytest.raises(DimensionError):
        lm.forward(Tensor(np.zeros((3, 47), np.float32)), np.arange(3))
    with pytest.raises(DimensionError):
        lm.forward(Tensor(np.zeros((3, 48), np.float32)), np.arange(4))
    with pytest.raises(ArgumentError):
        lm.forward(Tensor(np.zeros((3, 48), np.float32)), np.array([0, -1, 2]))
    with pytest.raises(DimensionError):
        ToyLM(LMConfig(dim=36, heads=4))


def test_position_ids_matter(lm):
    rng = np.random.default_rng(4)
    emb = _emb(rng, 5)
    a, _ = lm.forward(emb, np.arange(5))
    b, _ = lm.forward(emb, np.array([0, 1, 2, 3, 9]))
    assert not np.array_equal(a.data[-1], b.data[-1])


def test_batched_equals_unbatched(lm):
    rng = np.random.default_rng(5)
    e = rng.normal(size=(2, 6, 48)).astype(np.float32)
    pos = np.array([[0, 1, 2, 3, 4, 5], [0, 2, 1, 3, 4, 5]])
    batched, _ = lm.forward(Tensor(e), pos)
    for i in range(2):
        single, _ = lm.forward(Tensor(e[i]), pos[i])
        assert np.allclose(batched.data[i], single.data, atol=1e-5)


def test_generate_greedy_appends(lm):
    rng = np.random.default_rng(6)
    seq = TokenSequence(_emb(rng, 4), np.arange(4), np.full(4, Role.TXT), np.arange(4))
    out = generate(lm, seq, max_new=3)
    logits, _ = lm_forward(lm, seq)
    assert out[0] == int(np.argmax(logits.data[-1]))
    assert len(out) == 3
    allowed = np.array([5, 6])
    assert generate(lm, seq, 1, allowed=allowed)[0] in allowed


def test_param_state_round_trip(lm):
    other = ToyLM(seed=99)
    other.load_state(lm.state())
    for k, v in lm.params.items():
        assert np.array_equal(other.params[k].data, v.data)
    with pytest.raises(DimensionError):
        ToyLM(LMConfig(dim=32)).load_state(lm.state())
