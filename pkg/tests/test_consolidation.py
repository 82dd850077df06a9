import copy

import numpy as np
import pytest

from merlin.classifier import ContractError, MlpArchitecture, WeightVector
from merlin.consolidation import ConsolidationConfig, Consolidator, consolidate, prior_digest, pseudo_model_batch
from merlin.rng import stream
from merlin.vae import VaeConfig, WeightVae

ARCH = MlpArchitecture(10, (6,), 3)


def task_models(k, seed, n=4):
    rng = np.random.default_rng(seed * 100 + k)
    centre = rng.normal(0, 1, ARCH.n_params)
    return [WeightVector(centre + 0.05 * rng.normal(size=ARCH.n_params), ARCH) for _ in range(n)]


def trained_vae(seed, tasks=1, epochs=20):
    vae = WeightVae(VaeConfig(chunk_size=16, hidden=12, max_tasks=3, epochs=epochs), ARCH, stream(seed, "init"))
    for k in range(tasks):
        vae.train_task(task_models(k, seed), k, stream(seed, "vae", k))
    return vae


def test_priors_and_store_untouched():
    vae = trained_vae(0, tasks=2)
    maps = vae.theta[vae.layout.prior_slice()].copy()
    snaps = [(g.mean.copy(), g.log_var.copy()) for g in vae.store]
    digest = prior_digest(vae)
    theta = vae.theta.copy()
    consolidate(vae, ConsolidationConfig(P=3, epochs=3), seed=0, stage=1)
    assert prior_digest(vae) == digest
    assert np.array_equal(vae.theta[vae.layout.prior_slice()], maps)
    for g, (m, lv) in zip(vae.store, snaps):
        assert np.array_equal(g.mean, m) and np.array_equal(g.log_var, lv)
    assert not np.array_equal(vae.theta, theta)


def test_coverage_and_determinism():
    a, b = trained_vae(1, tasks=3, epochs=3), trained_vae(1, tasks=3, epochs=3)
    ra = consolidate(a, ConsolidationConfig(P=2, epochs=4), seed=5, stage=2)
    rb = consolidate(b, ConsolidationConfig(P=2, epochs=4), seed=5, stage=2)
    assert ra.coverage == [3, 3, 3, 3]
    assert all(len(l) == 3 for l in ra.losses)
    assert np.array_equal(a.theta, b.theta) and ra.losses == rb.losses


def test_separate_optimizer_state():
    vae = trained_vae(2)
    acc = vae.opt.acc.copy()
    c = Consolidator(vae, ConsolidationConfig(P=2, epochs=1))
    c(0, 0)
    assert np.array_equal(vae.opt.acc, acc)
    assert c.opt.acc.any() and not c.opt.acc[vae.layout.prior_slice()].any()


def test_empty_store_rejected():
    vae = WeightVae(VaeConfig(chunk_size=16, hidden=8, max_tasks=2), ARCH, stream(0, "init"))
    with pytest.raises(ContractError):
        consolidate(vae, ConsolidationConfig(), seed=0)
    with pytest.raises(ValueError):
        ConsolidationConfig(P=0)


def test_pseudo_model_batch():
    vae = trained_vae(3, epochs=2)
    (one,) = pseudo_model_batch(vae, 0, 1, stream(0, "p"))
    assert one.shape == (vae.n_chunks, 16)
    a = pseudo_model_batch(vae, 0, 2, stream(0, "p"))
    b = pseudo_model_batch(vae, 0, 2, stream(1, "p"))
    assert not np.array_equal(a[0], b[0]) and not np.array_equal(a[0], a[1])
    with pytest.raises(ContractError):
        pseudo_model_batch(vae, 0, 0, stream(0, "p"))


def test_consolidation_limits_forgetting_on_toy_tasks():
    # task-0 pseudo-models drawn before task 1 is learned are the reference; compare the paired
    # branches (consolidate vs not) after task 1 on their negative ELBO with fixed noise
    wins = 0
    for seed in range(5):
        vae = trained_vae(seed)
        ref = pseudo_model_batch(vae, 0, 5, stream(seed, "ref"))
        eps = [stream(seed, "eps", i).standard_normal((len(r), 2)) for i, r in enumerate(ref)]
        vae.train_task(task_models(1, seed), 1, stream(seed, "vae", 1))
        plain = copy.deepcopy(vae)
        consolidate(vae, ConsolidationConfig(P=5, epochs=2), seed, 1)

        def loss(v):
            return np.mean([v.elbo_loss(m, v.cond(0), v.store[0], e) for m, e in zip(ref, eps)])

        wins += loss(vae) < loss(plain)
    assert wins >= 3
