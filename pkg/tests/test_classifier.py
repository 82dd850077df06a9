import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from merlin.classifier import (ContractError, MlpArchitecture, OnlineStream, TrainConfig, WeightVector, evaluate,
                               flatten, init_mlp, masked_cross_entropy, predict, seen_mask, train_base_models,
                               train_online, unflatten)
from merlin.data import build_split_mnist
from merlin.kernels import mlp_forward

ARCH = MlpArchitecture()


def blobs(rng, n):
    y = rng.integers(0, 2, n)
    x = rng.normal(0, 1, (n, 2)) + np.where(y[:, None] == 1, 4.0, -4.0)
    return x, y


def test_parameter_count_and_layout():
    assert ARCH.n_params == 89_610
    w = init_mlp(ARCH, 0)
    layers = w.layers
    # first bias of layer 1 sits right after the 784x100 weight block
    assert np.shares_memory(layers[0][1], w.values)
    assert layers[0][1].__array_interface__["data"][0] == w.values[784 * 100:].__array_interface__["data"][0]
    w.values[784 * 100] = 7.0
    assert layers[0][1][0] == 7.0


def test_init_deterministic_and_bounded():
    a, b = init_mlp(ARCH, 3), init_mlp(ARCH, 3)
    assert np.array_equal(a.values, b.values)
    for (W, bias), (i, _) in zip(a.layers, ARCH.layer_shapes):
        assert np.all(np.abs(W) <= 1 / np.sqrt(i)) and not bias.any()


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 12), min_size=1, max_size=3), st.integers(1, 9), st.integers(1, 5),
       st.integers(0, 2**31 - 1))
def test_flatten_round_trip(hidden, din, dout, seed):
    arch = MlpArchitecture(din, tuple(hidden), dout)
    v = np.random.default_rng(seed).normal(size=arch.n_params)
    assert np.array_equal(flatten(unflatten(v, arch)), v)


def test_unflatten_length_mismatch():
    with pytest.raises(ContractError):
        unflatten(np.zeros(10), ARCH)
    with pytest.raises(ContractError):
        WeightVector(np.zeros(5), ARCH)


def test_masked_cross_entropy_rejects_unseen_label():
    with pytest.raises(ContractError):
        masked_cross_entropy(np.zeros((1, 10)), [3], seen_mask([0, 1], 10))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sets(st.integers(0, 9), min_size=1, max_size=9))
def test_predictions_stay_in_mask(seed, classes):
    rng = np.random.default_rng(seed)
    arch = MlpArchitecture(6, (5,), 10)
    w = WeightVector(rng.normal(0, 3, arch.n_params), arch)
    pred = predict(w, rng.normal(size=(40, 6)), seen_mask(classes, 10))
    assert set(pred.tolist()) <= classes


def test_monotone_mask_keeps_correct_seen_predictions():
    rng = np.random.default_rng(1)
    arch = MlpArchitecture(6, (5,), 10)
    w = WeightVector(rng.normal(0, 3, arch.n_params), arch)
    x = rng.normal(size=(200, 6))
    small, big = seen_mask([0, 1, 2], 10), seen_mask([0, 1, 2, 3, 4, 5], 10)
    p_small, p_big = predict(w, x, small), predict(w, x, big)
    # a prediction in the larger mask that lands on an old class agrees with the smaller mask
    old = np.isin(p_big, [0, 1, 2])
    assert np.array_equal(p_big[old], p_small[old])


def test_evaluate_matches_brute_argmax():
    rng = np.random.default_rng(2)
    arch = MlpArchitecture(8, (6,), 4)
    w = init_mlp(arch, rng)
    x, y = rng.normal(size=(50, 8)), rng.integers(0, 4, 50)
    hits = 0
    for xi, yi in zip(x, y):
        h = np.maximum(xi @ w.layers[0][0] + w.layers[0][1], 0)
        logits = h @ w.layers[1][0] + w.layers[1][1]
        best = max(range(4), key=lambda c: logits[c])
        hits += best == yi
    assert evaluate(w, x, y) == 100.0 * hits / 50


def test_evaluate_constant_and_chance():
    arch = MlpArchitecture(3, (4,), 10)
    w = init_mlp(arch, 0)
    w.values[:] = 0.0
    _, bias = w.layers[-1]
    bias[7] = 1.0
    assert evaluate(w, np.ones((20, 3)), np.full(20, 7)) == 100.0
    rng = np.random.default_rng(0)
    w = init_mlp(ARCH, rng)
    acc = evaluate(w, rng.random((2000, 784)), np.repeat(np.arange(10), 200))
    assert 7.0 <= acc <= 13.0 or acc in (0.0, 10.0)
    with pytest.raises(ContractError):
        evaluate(w, np.zeros((0, 784)), np.zeros(0, int))


@pytest.mark.parametrize("seed", range(3))
def test_train_online_on_blobs(seed):
    # two pixel-space blobs, full-size network, default optimiser: 20 Adam steps suffice
    rng = np.random.default_rng(seed)
    centres = np.random.default_rng(99).random((2, 784))

    def sample(n):
        y = rng.integers(0, 2, n)
        return np.clip(centres[y] + rng.normal(0, 0.3, (n, 784)), 0, 1), y

    (x, y), (xt, yt) = sample(200), sample(500)
    seen = seen_mask([0, 1], 10)
    s = OnlineStream(x, y)
    w = train_online(init_mlp(ARCH, seed), s, seen, rng, inclusion_p=1.0)
    assert s.visits == 200
    assert evaluate(w, xt, yt, seen) >= 95.0


def test_train_online_p_zero_unchanged(caplog):
    arch = MlpArchitecture(2, (4,), 2)
    w0 = init_mlp(arch, 1)
    x, y = blobs(np.random.default_rng(0), 30)
    with caplog.at_level(logging.WARNING):
        w = train_online(w0, OnlineStream(x, y), None, np.random.default_rng(0), inclusion_p=0.0)
    assert np.array_equal(w.values, w0.values)
    assert "no stream points" in caplog.text


def test_stream_is_single_use():
    s = OnlineStream(np.zeros((3, 2)), np.zeros(3, int))
    list(s)
    with pytest.raises(ContractError):
        list(s)


def test_base_models_distinct_and_single_pass():
    rng = np.random.default_rng(0)
    arch = MlpArchitecture(2, (8,), 2)
    x, y = blobs(rng, 100)
    seen_points = []
    ms = train_base_models(x, y, None, 3, rngs=[np.random.default_rng(i) for i in range(3)],
                           init_rngs=[np.random.default_rng(9)] * 3, arch=arch,
                           observers=[lambda a, b: seen_points.append(b)])
    assert ms.visits == 100 and len(seen_points) == 100
    assert len(ms.accepted) == 3 and all(20 < a < 80 for a in ms.accepted)
    assert not np.array_equal(ms.models[0].values, ms.models[1].values)
    one = train_base_models(x, y, None, 1, [rng], [rng], arch)
    assert len(one.models) == 1
    with pytest.raises(ContractError):
        train_base_models(x, y, None, 0, [], [], arch)


@pytest.mark.slow
def test_split_task_zero_base_models(mnist):
    train, test = mnist
    task = build_split_mnist(train, test, np.random.default_rng(0)).tasks[0]
    seen = seen_mask(task.classes, 10)
    ms = train_base_models(task.x_train, task.y_train, seen, 10, [np.random.default_rng(i) for i in range(10)],
                           [np.random.default_rng(100 + i) for i in range(10)], ARCH, TrainConfig())
    accs = [evaluate(w, task.x_test, task.y_test, seen) for w in ms.models]
    assert min(accs) >= 95.0, accs
