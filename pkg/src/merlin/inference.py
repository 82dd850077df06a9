"""Ensembles of decoder-sampled, exemplar-finetuned classifiers with majority voting."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .classifier import ContractError, TrainConfig, WeightVector, predict, seen_mask, train_epochs
from .rng import stream
from .vae import GaussianDiag, WeightVae

log = logging.getLogger(__name__)


@dataclass
class InferenceConfig:
    E: int = 30
    mode: str = "agnostic"          # "agnostic" | "aware"
    finetune_epochs: int = 3
    lr: float = 1e-3
    weight_decay: float = 1e-3
    batch_size: int = 10

    def __post_init__(self):
        if self.E < 1:
            raise ValueError("ensemble size E must be >= 1")
        if self.mode not in ("agnostic", "aware"):
            raise ValueError(f"mode must be 'agnostic' or 'aware', got {self.mode!r}")

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, weight_decay=self.weight_decay, batch_size=self.batch_size)


class LiveModelTracker:
    """Counts materialised ensemble members; the sweep keeps at most one alive."""

    def __init__(self):
        self.live = 0
        self.peak = 0
        self.created = 0

    def acquire(self):
        self.live += 1
        self.created += 1
        self.peak = max(self.peak, self.live)

    def release(self):
        self.live -= 1


@dataclass
class InferenceResult:
    accuracies: list[float]               # one per task evaluated
    predictions: list[np.ndarray]
    finetuned: bool = True
    peak_live_models: int = 0
    meta: dict = field(default_factory=dict)


def aggregate_priors(priors) -> GaussianDiag:
    """Mean of the means and mean of the variances."""
    priors = list(priors)
    if not priors:
        raise ContractError("cannot aggregate an empty prior store")
    mean = np.mean([p.mean for p in priors], axis=0)
    var = np.mean([np.exp(p.log_var) for p in priors], axis=0)
    return GaussianDiag(mean, np.log(var))


def majority_vote(votes: np.ndarray, n_classes: int | None = None) -> np.ndarray:
    """``votes`` is (members, examples); ties go to the smallest class index."""
    votes = np.asarray(votes, dtype=np.int64)
    if votes.ndim != 2 or votes.shape[0] == 0:
        raise ContractError("majority_vote needs at least one member")
    n_classes = n_classes or int(votes.max()) + 1
    counts = np.zeros((votes.shape[1], n_classes), dtype=np.int64)
    cols = np.arange(votes.shape[1])
    for row in votes:
        np.add.at(counts, (cols, row), 1)
    return counts.argmax(axis=1)     # argmax returns the first (smallest) maximum


def finetune_on_exemplars(w: WeightVector, x: np.ndarray, y: np.ndarray, seen, cfg: InferenceConfig,
                          rng: np.random.Generator, inplace: bool = False) -> WeightVector:
    if len(y) == 0:
        log.warning("finetune_on_exemplars: no exemplars; weights unchanged")
        return w
    return train_epochs(w, x, y, seen, cfg.finetune_epochs, rng, cfg.train_config(), inplace=inplace)


def _ensemble(sample, n_models: int, ex_x, ex_y, seen, test_sets, cfg: InferenceConfig, seed, label,
              tracker: LiveModelTracker, n_classes: int) -> list[np.ndarray]:
    votes = [np.empty((n_models, len(ys)), dtype=np.int64) for _, ys in test_sets]
    for e in range(n_models):
        rng = stream(seed, "infer", *label, e)
        tracker.acquire()
        w = sample(rng)
        w = finetune_on_exemplars(w, ex_x, ex_y, seen, cfg, rng, inplace=True)   # no second copy alive
        for i, (xs, _) in enumerate(test_sets):
            votes[i][e] = predict(w, xs, seen)
        del w
        tracker.release()
    return [majority_vote(v, n_classes) for v in votes]


def task_agnostic_infer(vae: WeightVae, exemplars, tasks, cfg: InferenceConfig, seed: int, stage: int,
                        n_classes: int, sampler=None) -> InferenceResult:
    """One prior (the average of all stored priors), finetune on every exemplar, full seen mask."""
    k = len(tasks)
    ex_x, ex_y = exemplars.arrays(range(k))
    seen = seen_mask(sorted({c for t in tasks for c in t.classes}), n_classes)
    g = aggregate_priors(vae.store[j] for j in range(k))
    soft_task = np.zeros(vae.cfg.max_tasks)
    soft_task[:k] = 1.0 / k
    sample = sampler or (lambda rng: vae.sample_model(g, rng, soft_task))
    tracker = LiveModelTracker()
    preds = _ensemble(sample, cfg.E, ex_x, ex_y, seen, [(t.x_test, t.y_test) for t in tasks], cfg, seed,
                      ("agnostic", stage), tracker, n_classes)
    accs = [100.0 * float(np.mean(p == t.y_test)) for p, t in zip(preds, tasks)]
    return InferenceResult(accs, preds, len(ex_y) > 0, tracker.peak)


def task_aware_infer(vae: WeightVae, exemplars, tasks, cfg: InferenceConfig, seed: int, stage: int,
                     n_classes: int, sampler=None) -> InferenceResult:
    """Per task: its own prior, its own exemplars, its own class mask."""
    accs, preds, peak, finetuned = [], [], 0, True
    for t in tasks:
        if t.task_index >= len(vae.store) and sampler is None:
            raise ContractError(f"unknown task id {t.task_index}")
        ex_x, ex_y = exemplars.arrays([t.task_index])
        finetuned &= len(ex_y) > 0
        seen = seen_mask(t.classes, n_classes)
        if sampler is None:
            g = vae.store[t.task_index]
            sample = lambda rng, g=g, j=t.task_index: vae.sample_model(g, rng, j)
        else:
            sample = lambda rng, j=t.task_index: sampler(rng, j)
        tracker = LiveModelTracker()
        (p,) = _ensemble(sample, cfg.E, ex_x, ex_y, seen, [(t.x_test, t.y_test)], cfg, seed,
                         ("aware", stage, t.task_index), tracker, n_classes)
        peak = max(peak, tracker.peak)
        preds.append(p)
        accs.append(100.0 * float(np.mean(p == t.y_test)))
    return InferenceResult(accs, preds, finetuned, peak)
