"""VAE over chunks of classifier weights with learned per-task Gaussian priors.

Parameters are one flat vector (see :class:`merlin.kernels.VaeLayout`): the
encoder and decoder (one 50-unit ReLU layer each) and two ``tasks x latent``
maps giving the prior mean and log-variance of each task. The decoder output
is read as the mean of a unit-variance Gaussian over chunk values.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import chunking
from .autodiff import Graph
from .classifier import ContractError, MlpArchitecture, WeightVector, unflatten
from .kernels import (VaeLayout, kl_rows, masked_xent_grad, mlp_forward, vae_decode, vae_elbo_batch,
                      vae_encode, vae_train_epoch)
from .optim import AdaGrad

log = logging.getLogger(__name__)


class UnsupportedOperation(RuntimeError):
    pass


@dataclass(frozen=True)
class TaskDescriptor:
    task_index: int
    max_tasks: int

    def __post_init__(self):
        if not 0 <= self.task_index < self.max_tasks:
            raise ContractError(f"task_index {self.task_index} outside [0, {self.max_tasks})")

    @property
    def vector(self) -> np.ndarray:
        v = np.zeros(self.max_tasks)
        v[self.task_index] = 1.0
        return v


@dataclass(frozen=True)
class GaussianDiag:
    mean: np.ndarray
    log_var: np.ndarray

    def __post_init__(self):
        m = np.array(self.mean, dtype=np.float64)
        lv = np.array(self.log_var, dtype=np.float64)
        if m.shape != lv.shape:
            raise ContractError(f"mean {m.shape} and log_var {lv.shape} differ")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(lv))):
            raise ContractError("Gaussian parameters must be finite")
        m.flags.writeable = lv.flags.writeable = False
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "log_var", lv)

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @classmethod
    def standard(cls, dim: int) -> "GaussianDiag":
        return cls(np.zeros(dim), np.zeros(dim))


@dataclass
class PriorParams:
    """Views onto the prior maps inside the VAE parameter vector."""
    W_mu: np.ndarray
    W_logvar: np.ndarray


@dataclass
class VaeConfig:
    chunk_size: int = 300
    hidden: int = 50
    latent_dim: int = 2
    max_tasks: int = 10
    n_freq: int = 1                 # octaves in the chunk-index code (1 gives the 3-dim code)
    task_conditioned: bool = True   # also feed the one-hot task to encoder and decoder
    weight_scaling: str = "fan_in"  # "none" | "fan_in": per-layer rescale to unit-range values
    epochs: int = 25
    lr: float = 1e-3
    eps: float = 1e-10
    sn_prior: bool = False          # fix every prior to N(0, I)
    aux_clf_loss: bool = False
    clf_weight: float = 1.0
    aux_batch: int = 10
    prior_init_std: float = 0.0     # spread of the initial prior means across tasks
    prior_init_logvar: float = 0.0


class PriorStore:
    """Frozen per-task prior snapshots (value copies)."""

    def __init__(self):
        self._snaps: list[GaussianDiag] = []

    def freeze(self, g: GaussianDiag) -> None:
        self._snaps.append(GaussianDiag(g.mean.copy(), g.log_var.copy()))

    def __len__(self):
        return len(self._snaps)

    def __getitem__(self, i) -> GaussianDiag:
        if not 0 <= i < len(self._snaps):
            raise KeyError(f"no prior snapshot for task {i} ({len(self._snaps)} stored)")
        return self._snaps[i]

    def __iter__(self):
        return iter(self._snaps)

    def digest(self) -> bytes:
        return b"".join(s.mean.tobytes() + s.log_var.tobytes() for s in self._snaps)


def kl_diag_gauss(q: GaussianDiag, p: GaussianDiag) -> float:
    return float(kl_rows(q.mean[None], q.log_var[None], p.mean[None], p.log_var[None])[0])


def reparam_sample(g: GaussianDiag, noise: np.ndarray) -> np.ndarray:
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape[-1] != g.mean.shape[-1]:
        raise ContractError(f"noise dim {noise.shape[-1]} != latent dim {g.mean.shape[-1]}")
    return g.mean + np.exp(0.5 * g.log_var) * noise


def layer_scales(arch: MlpArchitecture, mode: str) -> np.ndarray:
    """Per-entry multiplier applied to flat weights before they reach the VAE."""
    if mode == "none":
        return np.ones(arch.n_params)
    if mode != "fan_in":
        raise ValueError(f"unknown weight_scaling {mode!r}")
    parts = []
    for i, o in arch.layer_shapes:
        parts.append(np.full(i * o + o, np.sqrt(i)))
    return np.concatenate(parts)


def fan_in_init(layout: VaeLayout, rng: np.random.Generator) -> np.ndarray:
    theta = np.zeros(layout.size)
    v = layout.views(theta)
    for name in ("enc_w1", "enc_wm", "enc_wv", "dec_w1", "dec_w2"):
        fan_in = v[name].shape[0]
        b = 1.0 / np.sqrt(fan_in)
        v[name][...] = rng.uniform(-b, b, size=v[name].shape)
    return theta


class WeightVae:
    """Encoder, decoder, learned priors and the frozen prior store, plus training state."""

    def __init__(self, cfg: VaeConfig, arch: MlpArchitecture, rng: np.random.Generator,
                 offset: np.ndarray | None = None):
        self.cfg, self.arch = cfg, arch
        # weights are modelled relative to ``offset`` (a seed-regenerable shared init), if given
        self.offset = np.zeros(arch.n_params) if offset is None else np.asarray(offset, dtype=np.float64).copy()
        self.n_chunks = chunking.n_chunks(arch.n_params, cfg.chunk_size)
        self.codes = chunking.chunk_codes(self.n_chunks, cfg.n_freq)
        q = self.codes.shape[1] + (cfg.max_tasks if cfg.task_conditioned else 0)
        self.layout = VaeLayout(cfg.chunk_size, q, cfg.hidden, cfg.latent_dim, cfg.max_tasks)
        self.theta = fan_in_init(self.layout, rng)
        v = self.views
        v["prior_mu"][...] = cfg.prior_init_std * rng.standard_normal(v["prior_mu"].shape)
        v["prior_lv"][...] = cfg.prior_init_logvar
        self.opt = AdaGrad(self.layout.size, lr=cfg.lr, eps=cfg.eps)
        self.store = PriorStore()
        self.scale = layer_scales(arch, cfg.weight_scaling)
        self.epoch_losses: list[list[float]] = []

    # -- parameter views -------------------------------------------------------

    @property
    def views(self) -> dict[str, np.ndarray]:
        return self.layout.views(self.theta)

    @property
    def priors(self) -> PriorParams:
        v = self.views
        return PriorParams(v["prior_mu"], v["prior_lv"])

    def prior_mask(self) -> np.ndarray:
        m = np.zeros(self.layout.size, dtype=bool)
        m[self.layout.prior_slice()] = True
        return m

    # -- conditioning ------------------------------------------------------------

    def cond(self, task) -> np.ndarray:
        """(n_chunks, Q) conditioning rows. ``task`` is an index, a one-hot/soft vector, or None."""
        if not self.cfg.task_conditioned:
            return self.codes
        if isinstance(task, (int, np.integer)):
            task = TaskDescriptor(int(task), self.cfg.max_tasks).vector
        tv = np.zeros(self.cfg.max_tasks) if task is None else np.asarray(task, dtype=np.float64)
        return np.hstack([self.codes, np.broadcast_to(tv, (self.n_chunks, self.cfg.max_tasks))])

    def to_vae_space(self, values: np.ndarray) -> np.ndarray:
        return chunking.chunk_matrix((np.asarray(values) - self.offset) * self.scale, self.cfg.chunk_size)

    def from_vae_space(self, mat: np.ndarray) -> WeightVector:
        return WeightVector(chunking.assemble_matrix(mat, self.arch.n_params) / self.scale + self.offset, self.arch)

    # -- model pieces ------------------------------------------------------------

    def prior(self, t: TaskDescriptor | int) -> GaussianDiag:
        idx = t.task_index if isinstance(t, TaskDescriptor) else int(t)
        if not 0 <= idx < self.cfg.max_tasks:
            raise ContractError(f"task_index {idx} outside [0, {self.cfg.max_tasks})")
        if self.cfg.sn_prior:
            return GaussianDiag.standard(self.cfg.latent_dim)
        p = self.priors
        return GaussianDiag(p.W_mu[idx], p.W_logvar[idx])

    def encode(self, x: np.ndarray, cond: np.ndarray) -> GaussianDiag | tuple:
        x, cond = np.atleast_2d(x), np.atleast_2d(cond)
        if x.shape[1] != self.cfg.chunk_size or cond.shape[1] != self.layout.cond:
            raise ContractError(f"encode: chunk width {x.shape[1]} / cond width {cond.shape[1]}, "
                                f"expected {self.cfg.chunk_size} / {self.layout.cond}")
        m, lv, _, _ = vae_encode(self.views, x, cond)
        return m, lv

    def decode(self, z: np.ndarray, cond: np.ndarray) -> np.ndarray:
        z, cond = np.atleast_2d(z), np.atleast_2d(cond)
        if z.shape[1] != self.cfg.latent_dim or cond.shape[1] != self.layout.cond:
            raise ContractError(f"decode: z width {z.shape[1]} / cond width {cond.shape[1]}")
        return vae_decode(self.views, z, cond)[0]

    def elbo_loss(self, x: np.ndarray, cond: np.ndarray, prior: GaussianDiag, noise: np.ndarray) -> float:
        """Negative one-sample ELBO summed over the given chunk rows."""
        x, cond, noise = np.atleast_2d(x), np.atleast_2d(cond), np.atleast_2d(noise)
        n = len(x)
        pm = np.broadcast_to(prior.mean, (n, self.cfg.latent_dim))
        plv = np.broadcast_to(prior.log_var, (n, self.cfg.latent_dim))
        return vae_elbo_batch(self.theta, self.layout, x, cond, pm, plv, noise)[0]

    # -- training ------------------------------------------------------------------

    def train_task(self, models: list[WeightVector], task_index: int, rng: np.random.Generator,
                   clf_data=None, force_numpy: bool = False) -> list[float]:
        """Fit the VAE on every (model, chunk) pair of one task, then freeze its prior.

        Returns the mean per-chunk loss of each epoch.
        """
        if not models:
            raise ContractError("train_task needs at least one base model")
        if self.cfg.aux_clf_loss:
            losses = self._train_task_aux(models, task_index, rng, clf_data)
        else:
            losses = self._train_task_chunks(models, task_index, rng, force_numpy)
        self.epoch_losses.append(losses)
        self.store.freeze(self.prior(task_index))
        return losses

    def _train_task_chunks(self, models, task_index, rng, force_numpy) -> list[float]:
        X = np.concatenate([self.to_vae_space(w.values) for w in models])
        cond = np.ascontiguousarray(np.tile(self.cond(task_index), (len(models), 1)))
        prow_val = -1 if self.cfg.sn_prior else task_index
        out = []
        for _ in range(self.cfg.epochs):
            rows = rng.permutation(len(X))
            eps = rng.standard_normal((len(X), self.cfg.latent_dim))
            prow = np.full(len(X), prow_val, dtype=np.int64)
            losses = vae_train_epoch(self.theta, self.opt.acc, self.layout, X, cond, rows, prow, eps,
                                     self.cfg.lr, self.cfg.eps, force_numpy=force_numpy)
            self.opt.t += len(rows)
            out.append(float(losses.mean()))
        return out

    def _train_task_aux(self, models, task_index, rng, clf_data) -> list[float]:
        if clf_data is None:
            raise ContractError("auxiliary classification loss needs labelled task data")
        xs, ys, seen = clf_data
        mats = [self.to_vae_space(w.values) for w in models]
        cond = self.cond(task_index)
        out = []
        for _ in range(self.cfg.epochs):
            tot = 0.0
            for mi in rng.permutation(len(models)):
                idx = rng.choice(len(ys), min(self.cfg.aux_batch, len(ys)), replace=False)
                eps = rng.standard_normal((self.n_chunks, self.cfg.latent_dim))
                grad = np.zeros_like(self.theta)
                loss = self.elbo_plus_clf_loss(mats[mi], cond, task_index, eps, xs[idx], ys[idx], seen, grad)
                self.opt.step(self.theta, grad)
                tot += loss
            out.append(tot / (len(models) * self.n_chunks))
        return out

    def elbo_plus_clf_loss(self, mat, cond, task_index, eps, x, y, seen, grad=None,
                           clf_weight: float | None = None) -> float:
        """Negative ELBO over all chunks of one model plus the classification loss of the
        assembled reconstruction on a labelled minibatch."""
        if not self.cfg.aux_clf_loss:
            raise UnsupportedOperation("elbo_plus_clf_loss requires aux_clf_loss=True")
        w_clf = self.cfg.clf_weight if clf_weight is None else clf_weight
        n = len(mat)
        prow_val = -1 if self.cfg.sn_prior else task_index
        pr = self.prior(task_index)
        pm = np.broadcast_to(pr.mean, (n, self.cfg.latent_dim))
        plv = np.broadcast_to(pr.log_var, (n, self.cfg.latent_dim))
        prow = np.full(n, prow_val, dtype=np.int64)
        # forward pass only, to get the reconstruction
        elbo, _, _, r = vae_elbo_batch(self.theta, self.layout, mat, cond, pm, plv, eps)
        if w_clf == 0.0:
            if grad is not None:
                vae_elbo_batch(self.theta, self.layout, mat, cond, pm, plv, eps, prow, grad)
            return elbo
        flat = chunking.assemble_matrix(r, self.arch.n_params) / self.scale + self.offset
        layers = unflatten(flat, self.arch)
        glayers = unflatten(np.zeros_like(flat), self.arch)
        logits, acts = mlp_forward(layers, x)
        ce, d = masked_xent_grad(logits, y, seen)
        if grad is not None:
            for li in range(len(layers) - 1, -1, -1):
                glayers[li][0][...] = acts[li].T @ d
                glayers[li][1][...] = d.sum(0)
                if li:
                    d = (d @ layers[li][0].T) * (acts[li] > 0)
            gflat = np.concatenate([np.concatenate([g.ravel(), b]) for g, b in glayers]) / self.scale
            ext = np.zeros(n * self.cfg.chunk_size)
            ext[: gflat.size] = w_clf * gflat
            vae_elbo_batch(self.theta, self.layout, mat, cond, pm, plv, eps, prow, grad,
                           ext_dr=ext.reshape(n, -1))
        return elbo + w_clf * ce

    # -- sampling ------------------------------------------------------------------

    def sample_chunks(self, g: GaussianDiag, rng: np.random.Generator, task=None) -> np.ndarray:
        """Decoder means for one z per chunk drawn from ``g`` (VAE space, (n_chunks, C))."""
        z = reparam_sample(g, rng.standard_normal((self.n_chunks, self.cfg.latent_dim)))
        return self.decode(z, self.cond(task))

    def sample_model(self, g: GaussianDiag, rng: np.random.Generator, task=None) -> WeightVector:
        return self.from_vae_space(self.sample_chunks(g, rng, task))

    def snapshot(self, task_index: int) -> GaussianDiag:
        if task_index >= len(self.store):
            raise ContractError(f"no prior snapshot for task {task_index}")
        return self.store[task_index]


def export_latents(store: PriorStore, n_per_task: int, rng: np.random.Generator) -> list[tuple]:
    """``(task, z..., sample_id)`` rows: ``n_per_task`` draws from every stored prior."""
    if len(store) == 0:
        raise ContractError("no task priors to draw latents from")
    rows, sid = [], 0
    for t, g in enumerate(store):
        for z in reparam_sample(g, rng.standard_normal((n_per_task, len(g.mean)))):
            rows.append((t, *z.tolist(), sid))
            sid += 1
    return rows


def write_latents(rows, path: Path, latent_dim: int) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["task", *[f"dim{i}" for i in range(latent_dim)], "sample_id"])
        for sid, r in enumerate(rows):   # ids stay unique when rows from several seeds are concatenated
            wr.writerow([r[0], *[repr(float(v)) for v in r[1:-1]], sid])


def elbo_graph(chunk_size: int, cond_dim: int, hidden: int, latent: int, rows: int = 1) -> Graph:
    """The ELBO as an autodiff graph (reference implementation for the fused kernel)."""
    g = Graph()
    x = g.input("x", (rows, chunk_size))
    c = g.input("cond", (rows, cond_dim))
    eps = g.input("eps", (rows, latent))
    pm = g.param("prior_mu", (rows, latent))
    plv = g.param("prior_lv", (rows, latent))
    ew1 = g.param("enc_w1", (chunk_size + cond_dim, hidden))
    eb1 = g.param("enc_b1", (1, hidden))
    h = g.relu(g.bias_add(g.matmul(g.concat(x, c), ew1), eb1), name="enc_h")
    mq = g.bias_add(g.matmul(h, g.param("enc_wm", (hidden, latent))), g.param("enc_bm", (1, latent)), name="mq")
    lq = g.bias_add(g.matmul(h, g.param("enc_wv", (hidden, latent))), g.param("enc_bv", (1, latent)), name="lq")
    z = g.reparam(mq, lq, eps, name="z")
    dw1 = g.param("dec_w1", (latent + cond_dim, hidden))
    hd = g.relu(g.bias_add(g.matmul(g.concat(z, c), dw1), g.param("dec_b1", (1, hidden))), name="dec_h")
    r = g.bias_add(g.matmul(hd, g.param("dec_w2", (hidden, chunk_size))), g.param("dec_b2", (1, chunk_size)),
                   name="recon")
    kl = g.kl_diag(mq, lq, pm, plv, name="kl")
    rec = g.mse(x, r, name="rec")
    g.add(kl, rec, name="neg_elbo")
    return g
