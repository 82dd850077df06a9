import gzip
import struct

import numpy as np
import pytest

from merlin.data import (ExemplarStore, IdxConsistencyError, IdxFormatError, IdxLengthError, RawDataset, Reservoir,
                         build_permuted_mnist, build_split_mnist, build_synthetic_tasks, load_idx, parse_idx,
                         update_exemplars)


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims) + bytes(payload)


def write_pair(tmp_path, n_img=3, n_lab=3, gz=False):
    img = idx_bytes(0x803, (n_img, 2, 2), range(4 * n_img))
    lab = idx_bytes(0x801, (n_lab,), [i % 10 for i in range(n_lab)])
    opener = gzip.open if gz else open
    suffix = ".gz" if gz else ""
    with opener(tmp_path / f"i{suffix}", "wb") as fh:
        fh.write(img)
    with opener(tmp_path / f"l{suffix}", "wb") as fh:
        fh.write(lab)
    return tmp_path / f"i{suffix}", tmp_path / f"l{suffix}"


@pytest.mark.parametrize("gz", [False, True])
def test_load_idx_round_trip(tmp_path, gz):
    ds = load_idx(*write_pair(tmp_path, gz=gz))
    assert ds.images.shape == (3, 4) and ds.labels.tolist() == [0, 1, 2]
    assert ds.images[1, 0] == 4 / 255


def test_idx_errors(tmp_path):
    with pytest.raises(IdxFormatError, match="0x00000802.*0x00000803"):
        parse_idx(idx_bytes(0x802, (1, 2, 2), range(4)), 0x803)
    with pytest.raises(IdxLengthError):
        parse_idx(idx_bytes(0x803, (2, 2, 2), range(5)), 0x803)
    with pytest.raises(IdxLengthError):
        parse_idx(b"\x00\x00", 0x803)
    with pytest.raises(IdxConsistencyError):
        load_idx(*write_pair(tmp_path, n_img=3, n_lab=4))


def test_mnist_files(mnist):
    train, test = mnist
    assert train.images.shape == (60_000, 784) and test.images.shape == (10_000, 784)
    assert train.labels[0] == 5
    assert set(np.unique(train.labels)) == set(range(10))
    assert train.images.min() >= 0.0 and train.images.max() <= 1.0


def fake_raw(rng, n=3000):
    y = np.repeat(np.arange(10), n // 10)
    return RawDataset(rng.random((len(y), 784)), y)


def test_split_tasks():
    rng = np.random.default_rng(0)
    seq = build_split_mnist(fake_raw(rng), fake_raw(rng, 500), np.random.default_rng(1), n_per_task=200)
    assert [t.classes for t in seq.tasks] == [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]
    assert seq.tasks[2].classes == (4, 5)
    for t in seq.tasks:
        assert len(t.y_train) == 200 and set(t.y_train) <= set(t.classes) and set(t.y_test) <= set(t.classes)
        assert len(set(t.meta["train_indices"])) == 200
    with pytest.raises(ValueError):
        build_split_mnist(fake_raw(rng, 100), fake_raw(rng, 100), rng, n_per_task=50)


def test_permuted_tasks():
    rng = np.random.default_rng(0)
    raw = fake_raw(rng, 1000)
    a = build_permuted_mnist(raw, raw, np.random.default_rng(3), n_per_task=50)
    b = build_permuted_mnist(raw, raw, np.random.default_rng(3), n_per_task=50)
    assert len(a.tasks) == 10 and not a.class_incremental
    for ta, tb in zip(a.tasks, b.tasks):
        perm = ta.meta["perm"]
        assert np.array_equal(perm, tb.meta["perm"])
        inv = np.argsort(perm)
        assert np.array_equal(ta.x_test[:, inv], raw.images)
        assert np.array_equal(ta.x_train[:, inv], raw.images[ta.meta["train_indices"]])
    for seed in range(10):
        perms = [t.meta["perm"].tobytes() for t in build_permuted_mnist(raw, raw, np.random.default_rng(seed), 5).tasks]
        assert len(set(perms)) == 10


def nearest_mean_accuracy(t):
    means = t.meta["means"]
    pred = np.array(t.classes)[np.argmin(((t.x_test[:, None, :] - means[None]) ** 2).sum(-1), axis=1)]
    return np.mean(pred == t.y_test)


def test_synthetic_separation():
    far = build_synthetic_tasks(np.random.default_rng(0), k=3, dim=20, n=50, n_test=2000, separation=10.0)
    assert all(nearest_mean_accuracy(t) > 0.99 for t in far.tasks)
    flat = build_synthetic_tasks(np.random.default_rng(0), k=3, dim=20, n=50, n_test=2000, separation=0.0)
    assert all(abs(nearest_mean_accuracy(t) - 0.5) < 0.05 for t in flat.tasks)
    t = far.tasks[0]
    assert {"task_index", "x_train", "y_train", "x_test", "y_test", "classes", "meta"} <= set(vars(t))


def test_exemplar_budget_split():
    store = ExemplarStore(200)
    rng = np.random.default_rng(0)
    for k in range(5):
        res = Reservoir(store.quota(k + 1), rng)
        for i in range(1000):
            res(np.full(3, float(i)), k)
        update_exemplars(store, k, res, rng)
        if k == 0:
            assert len(store) == 200
    assert [len(store.per_task[k]) for k in range(5)] == [40] * 5
    x, y = store.arrays()
    assert x.shape == (200, 3) and sorted(set(y.tolist())) == list(range(5))


def test_reservoir_uniform():
    trials, n, cap = 10_000, 1000, 40
    counts = np.zeros(n)
    rng = np.random.default_rng(0)
    for _ in range(trials):
        r = Reservoir(cap, rng)
        for i in range(n):
            r(i, 0)
        counts[[x for x, _ in r.items]] += 1
    p = counts / trials
    sd = np.sqrt(0.04 * 0.96 / trials)
    assert abs(p.mean() - 0.04) < 1e-12
    assert np.abs(p - 0.04).max() < 5 * sd
    # first and second halves of the stream are equally represented
    assert abs(p[:500].mean() - p[500:].mean()) < 4 * sd / np.sqrt(250)
