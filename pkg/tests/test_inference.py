import weakref

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from merlin import classifier
from merlin.classifier import ContractError, MlpArchitecture, WeightVector, init_mlp, predict, seen_mask
from merlin.data import ExemplarStore, build_synthetic_tasks
from merlin.inference import (InferenceConfig, aggregate_priors, finetune_on_exemplars, majority_vote,
                              task_agnostic_infer, task_aware_infer)
from merlin.rng import stream
from merlin.vae import GaussianDiag, VaeConfig, WeightVae

ARCH = MlpArchitecture(8, (6,), 4)


def setup(k=2, seed=0, per_task=10):
    seq = build_synthetic_tasks(np.random.default_rng(seed), k=k, dim=8, n=50, n_test=30)
    vae = WeightVae(VaeConfig(chunk_size=20, hidden=8, max_tasks=3, epochs=1), ARCH, stream(seed, "v"))
    ex = ExemplarStore(per_task * k)
    for t in seq.tasks:
        vae.store.freeze(vae.prior(t.task_index))
        ex.per_task[t.task_index] = list(zip(t.x_train[:per_task], t.y_train[:per_task]))
    return seq, vae, ex


# -- prior aggregation -------------------------------------------------------------


def test_aggregate_two_priors():
    g = aggregate_priors([GaussianDiag([0.0], [0.0]), GaussianDiag([2.0], [np.log(3.0)])])
    assert g.mean[0] == 1.0 and abs(g.var[0] - 2.0) < 1e-12


def test_aggregate_matches_brute_mean():
    rng = np.random.default_rng(0)
    ps = [GaussianDiag(rng.normal(size=3), rng.normal(size=3)) for _ in range(7)]
    g = aggregate_priors(ps)
    for d in range(3):
        m = sum(p.mean[d] for p in ps) / 7
        v = sum(np.exp(p.log_var[d]) for p in ps) / 7
        assert abs(g.mean[d] - m) < 1e-12 and abs(g.var[d] - v) < 1e-12
    one = aggregate_priors(ps[:1])
    assert np.allclose(one.mean, ps[0].mean, atol=1e-15) and np.allclose(one.log_var, ps[0].log_var, atol=1e-15)
    with pytest.raises(ContractError):
        aggregate_priors([])


# -- voting ----------------------------------------------------------------------


def test_vote_examples():
    assert majority_vote([[1], [1], [2]])[0] == 1
    assert majority_vote([[2], [1]])[0] == 1
    with pytest.raises(ContractError):
        majority_vote(np.zeros((0, 3), int))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 20), st.integers(0, 2**31 - 1))
def test_vote_histogram_oracle_and_permutation_invariance(members, n, seed):
    rng = np.random.default_rng(seed)
    votes = rng.integers(0, 5, (members, n))
    out = majority_vote(votes, 5)
    for i in range(n):
        hist = [int(np.sum(votes[:, i] == c)) for c in range(5)]
        assert out[i] == hist.index(max(hist))
    assert np.array_equal(majority_vote(votes[rng.permutation(members)], 5), out)


# -- finetuning --------------------------------------------------------------------


def test_finetune_zero_epochs_identity_and_training_accuracy():
    seq, _, _ = setup()
    t = seq.tasks[0]
    w = init_mlp(ARCH, 0)
    seen = seen_mask(t.classes, 4)
    same = finetune_on_exemplars(w, t.x_train, t.y_train, seen, InferenceConfig(finetune_epochs=0), stream(0, "f"))
    assert np.array_equal(same.values, w.values)
    acc0 = np.mean(predict(w, t.x_train, seen) == t.y_train)
    tuned = finetune_on_exemplars(w, t.x_train, t.y_train, seen, InferenceConfig(), stream(0, "f"))
    assert np.mean(predict(tuned, t.x_train, seen) == t.y_train) >= acc0
    assert not np.array_equal(tuned.values, w.values)


def test_finetune_without_exemplars_warns(caplog):
    w = init_mlp(ARCH, 0)
    out = finetune_on_exemplars(w, np.zeros((0, 8)), np.zeros(0, int), None, InferenceConfig(), stream(0, "f"))
    assert out is w and "no exemplars" in caplog.text


# -- ensembles -----------------------------------------------------------------------


def test_at_most_one_weight_vector_alive(monkeypatch):
    seq, vae, ex = setup()
    live, peak = [0], [0]
    orig = classifier.WeightVector.__post_init__

    def released():
        live[0] -= 1

    def tracked(self):
        orig(self)
        live[0] += 1
        peak[0] = max(peak[0], live[0])
        weakref.finalize(self, released)

    monkeypatch.setattr(classifier.WeightVector, "__post_init__", tracked)
    for infer in (task_agnostic_infer, task_aware_infer):
        res = infer(vae, ex, seq.tasks, InferenceConfig(E=5), 0, 1, 4)
        assert res.peak_live_models == 1
    assert peak[0] == 1


def test_single_member_zero_finetune_is_plain_evaluation():
    seq, vae, ex = setup()
    cfg = InferenceConfig(E=1, mode="aware", finetune_epochs=0)
    res = task_aware_infer(vae, ex, seq.tasks, cfg, 3, 1, 4)
    for j, t in enumerate(seq.tasks):
        w = vae.sample_model(vae.store[j], stream(3, "infer", "aware", 1, j, 0), j)
        assert np.array_equal(res.predictions[j], predict(w, t.x_test, seen_mask(t.classes, 4)))


def test_aware_predictions_stay_in_task_classes():
    seq, vae, ex = setup()
    res = task_aware_infer(vae, ex, seq.tasks, InferenceConfig(E=3), 0, 1, 4)
    for p, t in zip(res.predictions, seq.tasks):
        assert set(p.tolist()) <= set(t.classes)
    res = task_agnostic_infer(vae, ex, seq.tasks, InferenceConfig(E=3), 0, 1, 4)
    allowed = {c for t in seq.tasks for c in t.classes}
    assert all(set(p.tolist()) <= allowed for p in res.predictions)


def test_agnostic_with_one_task_matches_aware():
    seq, vae, ex = setup(k=1)
    fixed = init_mlp(ARCH, 9)
    cfg = InferenceConfig(E=3, finetune_epochs=0)
    a = task_agnostic_infer(vae, ex, seq.tasks, cfg, 0, 0, 4, sampler=lambda rng, j=None: fixed.copy())
    b = task_aware_infer(vae, ex, seq.tasks, cfg, 0, 0, 4, sampler=lambda rng, j=None: fixed.copy())
    assert np.array_equal(a.predictions[0], b.predictions[0])
    # the decoder inputs coincide too: averaged prior and soft task code reduce to task 0's
    g = aggregate_priors([vae.store[0]])
    assert np.allclose(g.mean, vae.store[0].mean) and np.allclose(g.log_var, vae.store[0].log_var)
    soft = np.zeros(3)
    soft[0] = 1.0
    assert np.array_equal(vae.cond(soft), vae.cond(0))


def test_unknown_task_and_missing_exemplars():
    seq, vae, ex = setup()
    vae.store._snaps.pop()
    with pytest.raises(ContractError):
        task_aware_infer(vae, ex, seq.tasks, InferenceConfig(E=1), 0, 1, 4)
    seq, vae, _ = setup()
    res = task_agnostic_infer(vae, ExemplarStore(10), seq.tasks, InferenceConfig(E=1), 0, 1, 4)
    assert res.finetuned is False


def test_config_validation():
    with pytest.raises(ValueError):
        InferenceConfig(E=0)
    with pytest.raises(ValueError):
        InferenceConfig(mode="both")
