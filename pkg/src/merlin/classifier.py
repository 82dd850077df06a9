"""MLP base classifier: flat weight vectors, masked loss, online training, evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .kernels import mask_logits, mlp_forward, mlp_loss_grad
from .optim import Adam

log = logging.getLogger(__name__)


class ContractError(ValueError):
    """A caller broke a documented precondition."""


@dataclass(frozen=True)
class MlpArchitecture:
    input_dim: int = 784
    hidden: tuple[int, ...] = (100, 100)
    output_dim: int = 10

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if min((self.input_dim, self.output_dim) + self.hidden) < 1:
            raise ValueError(f"all layer widths must be >= 1: {self}")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        d = self.dims
        return [(d[i], d[i + 1]) for i in range(len(d) - 1)]

    @property
    def n_params(self) -> int:
        return sum((i + 1) * o for i, o in self.layer_shapes)


@dataclass
class WeightVector:
    values: np.ndarray
    arch: MlpArchitecture

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).ravel()
        if self.values.size != self.arch.n_params:
            raise ContractError(f"weight vector length {self.values.size} != {self.arch.n_params} for {self.arch}")

    def copy(self) -> "WeightVector":
        return WeightVector(self.values.copy(), self.arch)

    @property
    def layers(self):
        return unflatten(self.values, self.arch)


@dataclass
class BaseModelSet:
    task_index: int
    models: list[WeightVector]
    visits: int = 0                 # stream elements offered (equals stream length)
    accepted: list[int] = field(default_factory=list)


def unflatten(values: np.ndarray, arch: MlpArchitecture):
    """``[(W, b), ...]`` views into ``values``; layout is layer-major, W (in, out) row-major, then b."""
    values = np.asarray(values)
    if values.size != arch.n_params:
        raise ContractError(f"cannot unflatten {values.size} values into {arch} ({arch.n_params} params)")
    out, pos = [], 0
    for i, o in arch.layer_shapes:
        w = values[pos:pos + i * o].reshape(i, o)
        pos += i * o
        out.append((w, values[pos:pos + o]))
        pos += o
    return out


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.concatenate([np.ravel(w), np.ravel(b)]) for w, b in layers])


def init_mlp(arch: MlpArchitecture, rng: np.random.Generator | int) -> WeightVector:
    """U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(rng) if isinstance(rng, (int, np.integer)) else rng
    parts = []
    for i, o in arch.layer_shapes:
        bound = 1.0 / np.sqrt(i)
        parts += [rng.uniform(-bound, bound, size=i * o), np.zeros(o)]
    return WeightVector(np.concatenate(parts), arch)


def seen_mask(classes, n_classes: int) -> np.ndarray:
    m = np.zeros(n_classes, dtype=bool)
    m[list(classes)] = True
    return m


def masked_cross_entropy(logits: np.ndarray, labels, seen=None) -> float:
    """Mean NLL after unseen-class logits are set to -1e10."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if seen is not None:
        seen = np.asarray(seen, dtype=bool)
        if not seen[labels].all():
            raise ContractError(f"labels {sorted(set(labels[~seen[labels]].tolist()))} are outside the seen-class mask")
    z = mask_logits(logits, seen)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def predict(w: WeightVector, x: np.ndarray, seen=None, batch: int = 4096) -> np.ndarray:
    layers = w.layers
    out = np.empty(len(x), dtype=np.int64)
    for s in range(0, len(x), batch):
        logits, _ = mlp_forward(layers, x[s:s + batch])
        out[s:s + batch] = mask_logits(logits, seen).argmax(axis=1)
    return out


def evaluate(w: WeightVector, x: np.ndarray, y: np.ndarray, seen=None) -> float:
    """Percentage of correct masked-argmax predictions."""
    if len(y) == 0:
        raise ContractError("cannot evaluate on an empty test set")
    return 100.0 * float(np.mean(predict(w, x, seen) == y))


class OnlineStream:
    """Single-use iterator over (x, y) that counts every element it yields."""

    def __init__(self, x: np.ndarray, y: np.ndarray):
        if len(x) != len(y):
            raise ContractError(f"stream has {len(x)} inputs but {len(y)} labels")
        self.x, self.y = x, y
        self.visits = 0
        self._used = False

    def __len__(self):
        return len(self.y)

    def __iter__(self):
        if self._used:
            raise ContractError("online stream may only be traversed once")
        self._used = True
        for i in range(len(self.y)):
            self.visits += 1
            yield self.x[i], int(self.y[i])


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-3
    batch_size: int = 10
    inclusion_p: float = 0.5


class _Learner:
    """One model plus its optimizer and pending batch."""

    def __init__(self, w: WeightVector, cfg: TrainConfig, seen):
        self.w, self.cfg, self.seen = w, cfg, seen
        self.opt = Adam(w.values.size, lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.grad = np.zeros_like(w.values)
        self.layers = w.layers
        self.glayers = unflatten(self.grad, w.arch)
        self.bx, self.by = [], []
        self.accepted = 0

    def offer(self, x, y):
        self.bx.append(x)
        self.by.append(y)
        self.accepted += 1
        if len(self.by) == self.cfg.batch_size:
            self.flush()

    def flush(self):
        if self.by:
            self.step(np.stack(self.bx), np.asarray(self.by))
            self.bx, self.by = [], []

    def step(self, x, y) -> float:
        loss = mlp_loss_grad(self.layers, self.glayers, x, y, self.seen)
        self.opt.step(self.w.values, self.grad)
        return loss


def train_online(w: WeightVector, stream, seen, rng: np.random.Generator,
                 cfg: TrainConfig | None = None, inclusion_p: float | None = None) -> WeightVector:
    """Single pass over ``stream``; each point joins this model's batches with probability p."""
    cfg = cfg or TrainConfig()
    p = cfg.inclusion_p if inclusion_p is None else inclusion_p
    learner = _Learner(w.copy(), cfg, seen)
    for x, y in stream:
        if rng.random() < p:
            learner.offer(x, y)
    learner.flush()
    if learner.accepted == 0:
        log.warning("train_online: no stream points were accepted; weights unchanged")
    return learner.w


def train_base_models(x: np.ndarray, y: np.ndarray, seen, n_models: int, rngs, init_rngs,
                      arch: MlpArchitecture, cfg: TrainConfig | None = None, task_index: int = 0,
                      observers=(), init_models=None) -> BaseModelSet:
    """B models trained over one shared pass of the stream.

    Each point is offered to every model; an independent Bernoulli gate per
    model decides inclusion. ``observers`` are called with ``(x, y)`` for every
    point (e.g. the exemplar reservoir), so the stream is still read once.
    """
    if n_models < 1:
        raise ContractError("need at least one base model")
    cfg = cfg or TrainConfig()
    inits = init_models or [init_mlp(arch, r) for r in init_rngs]
    learners = [_Learner(w.copy(), cfg, seen) for w in inits]
    stream = OnlineStream(x, y)
    for xi, yi in stream:
        for obs in observers:
            obs(xi, yi)
        for lrn, r in zip(learners, rngs):
            if r.random() < cfg.inclusion_p:
                lrn.offer(xi, yi)
    for lrn in learners:
        lrn.flush()
    return BaseModelSet(task_index, [l.w for l in learners], stream.visits, [l.accepted for l in learners])


def train_epochs(w: WeightVector, x: np.ndarray, y: np.ndarray, seen, epochs: int, rng: np.random.Generator,
                 cfg: TrainConfig | None = None, inplace: bool = False) -> WeightVector:
    """Multi-epoch minibatch Adam on a small stored set (used for exemplar finetuning).

    ``inplace=True`` updates ``w`` itself instead of a copy.
    """
    cfg = cfg or TrainConfig()
    if epochs <= 0 or len(y) == 0:
        if len(y) == 0 and epochs > 0:
            log.warning("train_epochs: empty training set; weights unchanged")
        return w
    learner = _Learner(w if inplace else w.copy(), cfg, seen)
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            learner.step(x[idx], y[idx])
    return learner.w
