import copy
import csv
import math

import numpy as np
import pytest

from vitsink import tensor as T
from vitsink.connector import ProjectorPair
from vitsink.errors import ArgumentError, FreezeViolation, NumericError
from vitsink.gradcheck import PipelineProbe
from vitsink.pipeline import Projector, build_vlm
from vitsink.selection import Reweighter
from vitsink.tensor import Tensor
from vitsink.training import (
    TrainConfig, finetune, hash_group, hash_groups, lm_loss, pretrain_dual, run_training, train_reweighter,
    write_loss_csv,
)


def test_config_validation():
    with pytest.raises(ArgumentError):
        TrainConfig(lr=0)
    with pytest.raises(ArgumentError):
        TrainConfig(steps=-1)
    with pytest.raises(ArgumentError):
        TrainConfig(optimizer="rmsprop")


def test_lm_loss_uniform():
    logits = Tensor(np.zeros((4, 64)))
    mask = np.array([False, False, True, True])
    assert lm_loss(logits, [1, 2, 3, 4], mask).item() == pytest.approx(math.log(64), abs=1e-6)


def test_lm_loss_confident():
    targets = np.array([0, 5, 9])
    x = np.zeros((3, 64))
    x[0, 5] = 50.0
    x[1, 9] = 50.0
    assert lm_loss(Tensor(x), targets, [False, True, True]).item() < 0.01


def test_lm_loss_oracle_and_batched():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 5, 7))
    t = rng.integers(0, 7, (2, 5))
    m = np.array([[False, False, True, False, True], [False, True, False, False, True]])
    terms = []
    for b in range(2):
        for s in range(1, 5):
            if m[b, s]:
                row = x[b, s - 1]
                terms.append(math.log(sum(math.exp(v) for v in row)) - row[t[b, s]])
    got = lm_loss(Tensor(x, dtype=np.float64), t, m).item()
    assert got == pytest.approx(np.mean(terms), abs=1e-6)
    got1 = lm_loss(Tensor(x[0], dtype=np.float64), t[0], m[0]).item()
    assert got1 == pytest.approx(np.mean(terms[:2]), abs=1e-6)


def test_lm_loss_errors():
    with pytest.raises(ArgumentError):
        lm_loss(Tensor(np.zeros((3, 4))), [0, 1, 2], [False, False, False])
    with pytest.raises(ArgumentError):
        lm_loss(Tensor(np.zeros((3, 4))), [0, 1, 2], [True, False, False])


def test_hash_is_content_sensitive():
    g = {"w": Tensor(np.zeros(3))}
    h0 = hash_group(g)
    g["w"].data[1] = 1e-30
    assert hash_group(g) != h0


@pytest.fixture
def setup(injected, vocab, small_data):
    vit, rep = injected
    vlm = build_vlm(vit, rep.tau, seed=0, vocab=vocab)
    return vlm, small_data, vlm.encode_images(small_data)


def test_zero_steps_leave_pair_unchanged(setup):
    vlm, data, cache = setup
    before = {k: v.copy() for k, v in vlm.state().items()}
    res = pretrain_dual(vlm, data, TrainConfig(steps=0), cache)
    assert res["sink"].losses == [] and res["nonsink"].losses == []
    for k, v in vlm.state().items():
        assert np.array_equal(v, before[k])


def test_pretrain_independence_and_freeze(setup):
    vlm, data, cache = setup
    groups = vlm.groups()
    before = hash_groups(groups, groups)
    pretrain_dual(vlm, data, TrainConfig(lr=0.5, steps=5, batch_size=6), cache, which=("sink",))
    after = hash_groups(vlm.groups(), groups)
    assert after["sink_mlp"] != before["sink_mlp"]
    for name in ("nonsink_mlp", "lm", "vit"):
        assert after[name] == before[name]


def test_sink_gradients_through_lm():
    p = PipelineProbe(seed=3)
    assert p.check(p.pair.sink_mlp.params["w1"], 20, 0) <= 1e-3
    assert p.check(p.rw.params["w2"], 20, 1) <= 1e-3


def test_finetune_keeps_vit_frozen(setup):
    vlm, data, cache = setup
    vit_hash = hash_group(vlm.groups()["vit"])
    lm_hash = hash_group(vlm.groups()["lm"])
    res = finetune(vlm, data, TrainConfig(lr=0.1, steps=4, batch_size=6), cache)
    assert len(res.losses) == 4
    assert hash_group(vlm.groups()["vit"]) == vit_hash
    assert hash_group(vlm.groups()["lm"]) != lm_hash


def test_training_is_deterministic(injected, vocab, small_data):
    vit, rep = injected
    runs = []
    for _ in range(2):
        vlm = build_vlm(vit, rep.tau, seed=0, vocab=vocab)
        cache = vlm.encode_images(small_data)
        cfg = TrainConfig(lr=0.2, steps=6, batch_size=6, seed=4)
        pre = pretrain_dual(vlm, small_data, cfg, cache)
        ft = finetune(vlm, small_data, cfg, cache)
        runs.append((pre["sink"].losses, pre["nonsink"].losses, ft.losses, vlm.state()))
    a, b = runs
    assert a[0] == b[0] and a[1] == b[1] and a[2] == b[2]
    for k in a[3]:
        assert np.array_equal(a[3][k], b[3][k])


def test_reweighter_only_updates_itself(setup):
    vlm, data, cache = setup
    groups = vlm.groups()
    before = hash_groups(groups, groups)
    rw = Reweighter(48, 32, seed=0)
    rw_before = hash_group(rw.params)
    res = train_reweighter(vlm, rw, data, TrainConfig(lr=0.05, steps=200, batch_size=6), cache)
    assert len(res.losses) == 200
    assert hash_group(rw.params) != rw_before
    after = hash_groups(vlm.groups(), groups)
    assert after == before
    assert set(res.frozen_hashes) == {"vit", "lm", "sink_mlp", "nonsink_mlp"}


def test_freeze_violation_detected(setup):
    vlm, _, _ = setup
    lm_param = next(iter(vlm.groups()["lm"].values()))
    sink_w = vlm.pair.sink_mlp.params["w1"]

    def sneaky(step):
        lm_param.data[...] += 1.0
        return T.sum_all(T.mul(sink_w, sink_w))

    with pytest.raises(FreezeViolation):
        run_training(vlm, ["sink_mlp"], sneaky, TrainConfig(steps=1))


def test_unknown_and_overlapping_groups(setup):
    vlm, _, _ = setup
    loss = lambda step: T.sum_all(vlm.pair.sink_mlp.params["b1"])
    with pytest.raises(ArgumentError):
        run_training(vlm, ["nope"], loss, TrainConfig(steps=1))
    with pytest.raises(ArgumentError):
        run_training(vlm, ["sink_mlp"], loss, TrainConfig(steps=1, frozen=("sink_mlp",)))
    with pytest.raises(ArgumentError):
        run_training(vlm, ["sink_mlp"], loss, TrainConfig(steps=1, frozen=("ghost",)))


def test_non_finite_aborts_with_step(setup):
    vlm, _, _ = setup
    w = vlm.pair.sink_mlp.params["b1"]

    def loss(step):
        scale = 1.0 if step < 2 else np.inf
        return T.sum_all(T.scale(w, scale))

    with np.errstate(invalid="ignore", over="ignore"):
        with pytest.raises(NumericError, match="step 2"):
            run_training(vlm, ["sink_mlp"], loss, TrainConfig(steps=5, max_grad_norm=None))


def test_tied_pair_reproduces_single_connector(injected, vocab, small_data):
    vit, rep = injected
    single = build_vlm(vit, rep.tau, seed=0, vocab=vocab, with_single=True)
    tied = build_vlm(vit, rep.tau, seed=0, vocab=vocab)
    tied.pair = ProjectorPair.tied_to(copy.deepcopy(single.single))
    cfg = TrainConfig(lr=0.1, steps=8, batch_size=6, seed=2)
    cache = single.encode_images(small_data)
    a = finetune(single, small_data, cfg, cache, projector=Projector.SINGLE)
    b = finetune(tied, small_data, cfg, cache, projector=Projector.DUAL)
    assert np.allclose(a.losses, b.losses, atol=1e-6, rtol=0)
    for k, v in single.single.params.items():
        assert np.allclose(v.data, tied.pair.sink_mlp.params[k].data, atol=1e-5)


def test_loss_csv(tmp_path):
    path = write_loss_csv(tmp_path / "l.csv", [2.5, 1.25])
    rows = list(csv.reader(path.open()))
    assert rows == [["step", "loss"], ["0", "2.5"], ["1", "1.25"]]
