import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vitsink.analysis import (
    AttentionRecord, ProbeResult, attention_share, attention_to_visual, binomial_band, cluster_tasks,
    decode_word_distribution, isolated_token_distribution, isolation_visibility, linear_probe,
    norm_attention_profile, norm_bin_edges, norm_bins, output_path, probe_features, relevance_map,
    track_sink_evolution, write_csv, write_dat,
)
from vitsink.data import TaskKind
from vitsink.errors import ArgumentError, FormatError
from vitsink.models import CaptureTrace, ToyLM, ToyViT
from vitsink.sequence import Role, TokenSequence
from vitsink.sinks import TokenClass
from vitsink.tensor import Tensor


def _trace(attn, roles=None):
    return CaptureTrace(hidden=[], attention=[attn], roles=roles)


def test_relevance_uniform():
    attn = np.full((2, 16, 16), 1 / 16)
    m = relevance_map(_trace(attn), 0, 1, 5)
    assert m.grid.shape == (4, 4) and np.allclose(m.grid, 1 / 16)


def test_relevance_delta():
    attn = np.zeros((1, 9, 9))
    attn[0, :, 0] = 1.0
    attn[0, 4, :] = 0.0
    attn[0, 4, 2] = 1.0
    m = relevance_map(_trace(attn), 0, 0, 2)
    expect = np.zeros((3, 3))
    expect[1, 1] = 1.0
    assert np.array_equal(m.grid, expect)


def test_relevance_random_oracle():
    rng = np.random.default_rng(0)
    attn = rng.random((3, 20, 20))
    roles = np.array([Role.SYS] * 2 + [Role.VIS] * 16 + [Role.TXT] * 2)
    m = relevance_map(_trace(attn, roles), 0, 2, 7)
    col = [attn[2, i, 7] for i in range(2, 18)]
    total = sum(col)
    for r in range(4):
        for c in range(4):
            assert m.grid[r, c] == pytest.approx(col[r * 4 + c] / total, abs=1e-12)


def test_relevance_errors():
    roles = np.array([Role.SYS] + [Role.VIS] * 4)
    attn = np.ones((1, 5, 5))
    with pytest.raises(ArgumentError):
        relevance_map(_trace(attn, roles), 0, 0, 0)
    with pytest.raises(ArgumentError):
        relevance_map(_trace(attn, roles), 1, 0, 1)
    with pytest.raises(ArgumentError):
        relevance_map(_trace(attn, roles), 0, 1, 1)


def test_relevance_on_vit_trace_is_normalized():
    vit = ToyViT(seed=1)
    x = np.random.default_rng(1).normal(size=(64, 9)).astype(np.float32)
    _, tr = vit.forward(Tensor(x), capture=True)
    for layer in range(4):
        for head in range(4):
            m = relevance_map(tr, layer, head, 10)
            assert m.grid.shape == (8, 8)
            assert np.all(m.grid >= 0) and abs(m.grid.sum() - 1) <= 1e-6


@pytest.fixture(scope="module")
def lm():
    return ToyLM(seed=2)


def _mixed_seq(rng, n_sys=2, n_vis=4, n_txt=3):
    n = n_sys + n_vis + n_txt
    emb = Tensor(rng.normal(size=(n, 48)).astype(np.float32))
    roles = np.array([Role.SYS] * n_sys + [Role.VIS] * n_vis + [Role.TXT] * n_txt)
    pos = np.array([0, 1, 4, 2, 5, 3, 6, 7, 8])[:n]
    return TokenSequence(emb, pos, roles, np.where(roles == Role.VIS, -1, 1))


def test_isolation_mask():
    roles = np.array([Role.SYS, Role.VIS, Role.VIS, Role.TXT])
    m = isolation_visibility(roles)
    assert m[1].tolist() == [False, True, False, False]
    assert m[2].tolist() == [False, False, True, False]
    assert m[3].tolist() == [True, False, False, True]


def test_word_distribution_isolated_and_exact(lm):
    rng = np.random.default_rng(3)
    for _ in range(20):
        seq = _mixed_seq(rng)
        wd = decode_word_distribution(seq, lm)
        assert np.allclose(wd.probs.sum(-1), 1.0, atol=1e-6)
        for i, slot in enumerate(wd.slots):
            assert np.allclose(wd.probs[i], isolated_token_distribution(seq, lm, slot), atol=1e-6)
        other = seq.embeddings.data.copy()
        non_vis = np.flatnonzero(seq.roles != Role.VIS)
        other[non_vis] += rng.normal(size=(non_vis.size, 48)).astype(np.float32)
        wd2 = decode_word_distribution(TokenSequence(Tensor(other), seq.position_ids, seq.roles, seq.token_ids), lm)
        assert np.array_equal(wd.probs, wd2.probs)


def test_word_distribution_ranked(lm):
    wd = decode_word_distribution(_mixed_seq(np.random.default_rng(4)), lm)
    ranked = wd.ranked(3)
    assert len(ranked) == 4 and all(len(r) == 3 for r in ranked)
    assert ranked[0][0][1] >= ranked[0][1][1] >= ranked[0][2][1]


def test_word_distribution_needs_visual(lm):
    seq = TokenSequence(Tensor(np.zeros((2, 48), np.float32)), [0, 1], [Role.TXT, Role.TXT], [1, 2])
    with pytest.raises(ArgumentError):
        decode_word_distribution(seq, lm)


def test_profile_single_bin():
    rec = AttentionRecord(np.full(10, 5.0), np.full(10, 0.1))
    prof = norm_attention_profile([rec], tau_vit=100.0)
    assert prof.mean_count.tolist() == [10, 0, 0, 0, 0, 0, 0]
    assert prof.mean_attention[0] == pytest.approx(0.1)
    assert np.isnan(prof.mean_attention[1])


def test_profile_bins_match_oracle():
    edges = norm_bin_edges(50.0)
    assert edges.tolist()[:3] == [0.0, 10.0, 20.0]
    norms = np.random.default_rng(5).uniform(0, 80, 200)
    norms[:3] = [10.0, 0.0, 60.0]
    got = norm_bins(norms, edges)
    for n, b in zip(norms, got):
        oracle = max(i for i in range(edges.size - 1) if edges[i] <= n)
        assert b == oracle


def test_profile_ratio_and_empty():
    recs = [AttentionRecord(np.array([5.0, 150.0]), np.array([0.01, 0.07]))]
    assert norm_attention_profile(recs, 100.0).top_bottom_ratio() == pytest.approx(7.0)
    with pytest.raises(ArgumentError):
        norm_attention_profile([], 100.0)


def test_attention_to_visual_mean():
    a = np.random.default_rng(6).random((2, 3, 4, 4))
    tr = CaptureTrace(attention=[a, 2 * a])
    got = attention_to_visual(tr, np.array([3]))
    assert np.allclose(got, 1.5 * a[:, :, 3].mean(axis=1))


def test_share_single_class():
    rows = attention_share([AttentionRecord(np.ones(3), np.array([0.1, 0.2, 0.3]), [TokenClass.NON_SINK] * 3)])
    assert rows[0].mean == pytest.approx(0.2) and rows[0].count == 3
    assert rows[1].mean is None and rows[2].mean is None


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_share_mass_conservation(seed):
    rng = np.random.default_rng(seed)
    recs = []
    for _ in range(3):
        n = 8
        recv = rng.random(n)
        kinds = [TokenClass.NON_SINK, TokenClass.LLM_EMERGED, TokenClass.VIT_TO_LLM]
        cls = [kinds[i] for i in rng.integers(0, 3, n)]
        recs.append(AttentionRecord(np.ones(n), recv, cls))
    rows = attention_share(recs)
    total = sum(r.count * r.mean for r in rows if r.mean is not None)
    assert total == pytest.approx(sum(r.received.sum() for r in recs), abs=1e-5)
    # counting oracle
    for row in rows:
        vals = [a for r in recs for c, a in zip(r.classes, r.received) if c == row.token_class]
        assert row.count == len(vals)
        if vals:
            assert row.mean == pytest.approx(sum(vals) / len(vals))


@pytest.mark.parametrize("c,g,label", [
    (1.0, 0.0, TaskKind.GLOBAL), (1.0, 5.0, TaskKind.GLOBAL),
    (4.0, 1.0, TaskKind.LOCAL), (4.0, 4.0, TaskKind.MIXED), (2.5, 2.5, TaskKind.MIXED),
])
def test_cluster_examples(c, g, label):
    assert cluster_tasks(c, g).label is label


@settings(max_examples=200, deadline=None)
@given(st.floats(0, 5), st.floats(0, 5))
def test_cluster_total_partition(c, g):
    label = cluster_tasks(c, g).label
    rules = [c < 2.5, c >= 2.5 and g < 2.5, c >= 2.5 and g >= 2.5]
    assert sum(rules) == 1
    assert label is [TaskKind.GLOBAL, TaskKind.LOCAL, TaskKind.MIXED][rules.index(True)]


def test_cluster_range():
    with pytest.raises(ArgumentError):
        cluster_tasks(5.1, 0)
    with pytest.raises(ArgumentError):
        cluster_tasks(0, -0.1)


def _separable(seed, n=300, k=4, d=16):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, k, n)
    centers = rng.normal(0, 3, (k, d))
    sink = centers[labels] + rng.normal(0, 0.5, (n, d))
    non = rng.normal(size=(n, d))
    return sink, non, labels


def test_probe_separable():
    sink, non, labels = _separable(7)
    res = linear_probe(sink, non, labels, seed=0)
    assert res.sink >= 0.9
    lo, hi = binomial_band(res.chance, res.n_val)
    assert lo <= res.nonsink <= hi
    assert [r[0] for r in res.rows()] == ["sink", "non-sink", "random"]


def test_probe_shuffled_labels_near_chance():
    sink, non, labels = _separable(8)
    shuffled = np.random.default_rng(9).permutation(labels)
    res = linear_probe(sink, non, shuffled, seed=1)
    lo, hi = binomial_band(res.chance, res.n_val)
    assert lo <= res.sink <= hi


def test_probe_errors():
    with pytest.raises(ArgumentError):
        linear_probe(np.ones((4, 2)), np.ones((4, 2)), [1, 1, 1, 1])


def test_probe_features():
    feats = np.arange(2 * 6 * 2, dtype=float).reshape(2, 6, 2)
    s, n = probe_features(feats, [np.array([0, 1]), np.array([5])], seed=0, n_random=5)
    assert np.allclose(s[0], feats[0, :2].mean(0)) and np.allclose(s[1], feats[1, 5])
    assert np.allclose(n[1], feats[1, :5].mean(0))
    with pytest.raises(ArgumentError):
        probe_features(feats, [np.array([], int), np.array([1])])


def test_evolution_identical_checkpoints():
    h = np.random.default_rng(10).normal(size=(6, 8))
    h[1, 3] = 30
    state = {}
    entries = track_sink_evolution(["a", "b"], lambda ck: state.update(ck=ck), lambda: (h, [1]))
    assert entries[0].dims == entries[1].dims
    assert entries[0].dims[0][0] == 3 and [e.label for e in entries] == ["a", "b"]


def test_evolution_incompatible():
    def load(_):
        raise KeyError("lm/embed")

    with pytest.raises(FormatError):
        track_sink_evolution(["x"], load, lambda: (np.ones((2, 2)), [0]))


def test_output_files(tmp_path):
    p = output_path(tmp_path / "o", "run1", "profile", "csv")
    assert p.name == "run1_profile.csv"
    write_csv(p, ("a", "b"), [(1, 2.5)])
    assert list(csv.reader(p.open())) == [["a", "b"], ["1", "2.5"]]
    d = write_dat(tmp_path / "x.dat", ("a", "b"), [(1, 2)])
    assert d.read_text() == "# a b\n1 2\n"
