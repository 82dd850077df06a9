"""Refit encoder and decoder on decoder-generated pseudo-models of every task seen so far."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .classifier import ContractError
from .kernels import vae_elbo_batch
from .optim import AdaGrad
from .rng import stream
from .vae import WeightVae


@dataclass
class ConsolidationConfig:
    P: int = 5
    epochs: int = 2
    lr: float = 1e-3
    eps: float = 1e-10

    def __post_init__(self):
        if self.P < 1 or self.epochs < 1:
            raise ValueError(f"P and epochs must be >= 1, got P={self.P}, epochs={self.epochs}")


@dataclass
class ConsolidationReport:
    coverage: list[int]          # per epoch: number of tasks replayed
    losses: list[list[float]]    # per epoch, per task: summed negative ELBO before the step


def prior_digest(vae: WeightVae) -> str:
    h = hashlib.sha256(vae.theta[vae.layout.prior_slice()].tobytes())
    h.update(vae.store.digest())
    return h.hexdigest()


def pseudo_model_batch(vae: WeightVae, task_index: int, P: int, rng: np.random.Generator) -> list[np.ndarray]:
    """``P`` decoder samples from the frozen prior of one task, kept as chunk matrices."""
    if P < 1:
        raise ContractError("P must be >= 1")
    g = vae.snapshot(task_index)
    return [vae.sample_chunks(g, rng, task_index) for _ in range(P)]


class Consolidator:
    """Holds a separate AdaGrad state so replay steps do not inflate the task-training accumulators."""

    def __init__(self, vae: WeightVae, cfg: ConsolidationConfig):
        self.vae, self.cfg = vae, cfg
        self.opt = AdaGrad(vae.layout.size, lr=cfg.lr, eps=cfg.eps)
        self.mask = ~vae.prior_mask()

    def __call__(self, seed: int, stage: int) -> ConsolidationReport:
        vae, cfg = self.vae, self.cfg
        k = len(vae.store)
        if k == 0:
            raise ContractError("consolidation needs at least one stored task prior")
        rep = ConsolidationReport([], [])
        L = vae.cfg.latent_dim
        for ep in range(cfg.epochs):
            seen, losses = 0, []
            for j in range(k):
                rng = stream(seed, "consolidate", stage, ep, j)
                mats = pseudo_model_batch(vae, j, cfg.P, rng)
                x = np.concatenate(mats)
                cond = np.tile(vae.cond(j), (cfg.P, 1))
                snap = vae.snapshot(j)
                pm = np.broadcast_to(snap.mean, (len(x), L))
                plv = np.broadcast_to(snap.log_var, (len(x), L))
                eps = rng.standard_normal((len(x), L))
                grad = np.zeros_like(vae.theta)
                loss, *_ = vae_elbo_batch(vae.theta, vae.layout, x, cond, pm, plv, eps, None, grad)
                self.opt.step(vae.theta, grad, mask=self.mask)
                losses.append(loss)
                seen += 1
            rep.coverage.append(seen)
            rep.losses.append(losses)
        return rep


def consolidate(vae: WeightVae, cfg: ConsolidationConfig, seed: int, stage: int = 0,
                consolidator: Consolidator | None = None) -> ConsolidationReport:
    return (consolidator or Consolidator(vae, cfg))(seed, stage)
