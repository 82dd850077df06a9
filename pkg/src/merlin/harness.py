"""End-to-end runs: base models -> weight VAE -> consolidation -> ensemble evaluation."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import platform
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .classifier import (MlpArchitecture, OnlineStream, TrainConfig, evaluate, init_mlp, seen_mask,
                         train_base_models)
from .consolidation import ConsolidationConfig, Consolidator, prior_digest
from .data import (ExemplarStore, Reservoir, TaskSequence, build_permuted_mnist, build_split_mnist,
                   build_synthetic_tasks, load_mnist, update_exemplars)
from .inference import InferenceConfig, task_agnostic_infer, task_aware_infer
from .rng import stream
from .vae import VaeConfig, WeightVae, export_latents, write_latents

log = logging.getLogger(__name__)

DATASETS = ("split_mnist", "permuted_mnist", "synthetic")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = "split_mnist"
    seeds: tuple[int, ...] = (0,)
    method: str = "merlin"            # "merlin" | "single"
    n_tasks: int | None = None        # default: 5 split, 10 permuted, 3 synthetic
    n_per_task: int = 1000
    B: int = 10
    inclusion_p: float = 0.5
    init_mode: str = "shared"         # "independent" | "shared"
    residual: bool = True             # VAE models weights minus the shared init (needs init_mode="shared")
    clf_lr: float = 1e-3
    clf_weight_decay: float = 1e-3
    clf_batch: int = 10
    hidden: tuple[int, ...] = (100, 100)
    chunk_size: int = 300
    latent_dim: int = 2
    vae_hidden: int = 50
    n_freq: int = 1
    task_conditioned: bool = True
    weight_scaling: str = "fan_in"
    vae_epochs: int = 25
    vae_lr: float = 1e-3
    P: int = 5
    consolidation_epochs: int = 2
    E: int = 30
    mode: str = "agnostic"
    finetune_epochs: int = 3
    buffer: int = 200
    skip_vae: bool = False
    skip_vae_source: str = "decoder"  # "decoder" (untrained decoder samples) | "random_init"
    sn_prior: bool = False
    aux_clf_loss: bool = False
    export_latents: int = 0           # draws per task written to latents.csv (0: none)
    synthetic_dim: int = 20
    synthetic_separation: float = 6.0
    out: str | None = None

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in (self.seeds if isinstance(self.seeds, (list, tuple)) else [self.seeds]))
        self.hidden = tuple(int(h) for h in (self.hidden if isinstance(self.hidden, (list, tuple)) else [self.hidden]))
        self.validate()

    def validate(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
        if self.mode not in ("agnostic", "aware"):
            raise ConfigError(f"mode must be 'agnostic' or 'aware', got {self.mode!r}")
        if self.method not in ("merlin", "single"):
            raise ConfigError(f"method must be 'merlin' or 'single', got {self.method!r}")
        if self.init_mode not in ("independent", "shared"):
            raise ConfigError(f"init_mode must be 'independent' or 'shared', got {self.init_mode!r}")
        if self.skip_vae_source not in ("decoder", "random_init"):
            raise ConfigError(f"skip_vae_source must be 'decoder' or 'random_init'")
        counts = dict(B=self.B, n_per_task=self.n_per_task, chunk_size=self.chunk_size, latent_dim=self.latent_dim,
                      vae_hidden=self.vae_hidden, vae_epochs=self.vae_epochs, P=self.P,
                      consolidation_epochs=self.consolidation_epochs, E=self.E, buffer=self.buffer,
                      clf_batch=self.clf_batch)
        bad = [k for k, v in counts.items() if int(v) < 1]
        if bad:
            raise ConfigError(f"counts must be positive: {bad}")
        if self.n_tasks is not None and self.n_tasks < 1:
            raise ConfigError("n_tasks must be positive")
        if self.residual and self.init_mode != "shared":
            raise ConfigError("residual modelling needs init_mode='shared'")
        if self.skip_vae and self.sn_prior:
            raise ConfigError("skip_vae and sn_prior are separate ablations; enable one")
        if not 0.0 <= self.inclusion_p <= 1.0:
            raise ConfigError("inclusion_p must lie in [0, 1]")

    @property
    def tasks(self) -> int:
        if self.n_tasks is not None:
            return self.n_tasks
        return {"split_mnist": 5, "permuted_mnist": 10, "synthetic": 3}[self.dataset]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"], d["hidden"] = list(self.seeds), list(self.hidden)
        return d

    def identity(self) -> dict:
        """Fields that define an experimental configuration (seeds and output excluded)."""
        d = self.to_dict()
        for k in ("seeds", "out", "export_latents"):
            d.pop(k)
        return d


class AccuracyMatrix:
    """Lower-triangular a[k][j]: accuracy on task j after training through task k (0-based)."""

    def __init__(self, rows=None):
        self.rows: list[list[float]] = []
        for r in rows or []:
            self.append(r)

    def append(self, row) -> None:
        row = [float(v) for v in row]
        if len(row) != len(self.rows) + 1:
            raise ValueError(f"row {len(self.rows) + 1} must have {len(self.rows) + 1} entries, got {len(row)}")
        if any(not 0.0 <= v <= 100.0 for v in row):
            raise ValueError(f"accuracies must lie in [0, 100]: {row}")
        self.rows.append(row)

    def __len__(self):
        return len(self.rows)

    def __getitem__(self, k):
        return tuple(self.rows[k])

    def __eq__(self, other):
        return isinstance(other, AccuracyMatrix) and self.rows == other.rows


def avg_accuracy(M: AccuracyMatrix, k: int) -> float:
    """A_k for 1-based k: mean of row k."""
    if not 1 <= k <= len(M):
        raise IndexError(f"k={k} outside 1..{len(M)}")
    row = M.rows[k - 1]
    return sum(row) / len(row)


def forgetting(M: AccuracyMatrix, k: int) -> float:
    """F_k for 1-based k >= 2: mean over earlier tasks of (best earlier accuracy - current)."""
    if k < 2:
        raise ValueError("forgetting is undefined for k < 2")
    if k > len(M):
        raise IndexError(f"k={k} outside 1..{len(M)}")
    cur = M.rows[k - 1]
    drops = [max(M.rows[l][j] for l in range(j, k - 1)) - cur[j] for j in range(k - 1)]
    return sum(drops) / (k - 1)


@dataclass
class SeedResult:
    seed: int
    matrix: AccuracyMatrix
    meta: dict = field(default_factory=dict)
    latents: list | None = None


@dataclass
class RunResult:
    config: RunConfig
    seeds: list[SeedResult]


def load_tasks(cfg: RunConfig, seed: int) -> TaskSequence:
    rng = stream(seed, "data", cfg.dataset)
    if cfg.dataset == "synthetic":
        return build_synthetic_tasks(rng, k=cfg.tasks, dim=cfg.synthetic_dim, n=cfg.n_per_task,
                                     separation=cfg.synthetic_separation)
    train, test = load_mnist()
    if cfg.dataset == "split_mnist":
        return build_split_mnist(train, test, rng, cfg.n_per_task, cfg.tasks)
    return build_permuted_mnist(train, test, rng, cfg.n_per_task, cfg.tasks)


def _check_mode(cfg: RunConfig, seq: TaskSequence):
    expected = cfg.dataset in ("split_mnist", "synthetic")
    if seq.class_incremental != expected:
        raise ConfigError(f"{cfg.dataset}: wrong incremental setting")
    if not seq.class_incremental:
        classes = {t.classes for t in seq.tasks}
        if len(classes) != 1:
            raise ConfigError("domain-incremental tasks must share one label space")
    else:
        allc = [c for t in seq.tasks for c in t.classes]
        if len(allc) != len(set(allc)):
            raise ConfigError("class-incremental tasks must have disjoint label sets")


def run_seed(cfg: RunConfig, seed: int) -> SeedResult:
    seq = load_tasks(cfg, seed)
    _check_mode(cfg, seq)
    if cfg.method == "single":
        return _run_single(cfg, seed, seq)
    arch = MlpArchitecture(seq.tasks[0].x_train.shape[1], cfg.hidden, seq.n_classes)
    tcfg = TrainConfig(cfg.clf_lr, cfg.clf_weight_decay, cfg.clf_batch, cfg.inclusion_p)
    vcfg = VaeConfig(chunk_size=cfg.chunk_size, hidden=cfg.vae_hidden, latent_dim=cfg.latent_dim,
                     max_tasks=cfg.tasks, n_freq=cfg.n_freq, task_conditioned=cfg.task_conditioned,
                     weight_scaling=cfg.weight_scaling, epochs=cfg.vae_epochs, lr=cfg.vae_lr,
                     sn_prior=cfg.sn_prior, aux_clf_loss=cfg.aux_clf_loss)
    shared = init_mlp(arch, stream(seed, "init", "shared")) if cfg.init_mode == "shared" else None
    vae = WeightVae(vcfg, arch, stream(seed, "vae_init"), offset=shared.values if cfg.residual else None)
    consolidator = Consolidator(vae, ConsolidationConfig(cfg.P, cfg.consolidation_epochs, cfg.vae_lr))
    icfg = InferenceConfig(E=cfg.E, mode=cfg.mode, finetune_epochs=cfg.finetune_epochs, lr=cfg.clf_lr,
                           weight_decay=cfg.clf_weight_decay, batch_size=cfg.clf_batch)
    exemplars = ExemplarStore(cfg.buffer)
    M = AccuracyMatrix()
    meta = {"visits": [], "vae_epoch_loss": [], "consolidation": [], "timings": [], "peak_live_models": 0,
            "finetuned": True, "base_acc": []}
    seen_classes: list[int] = []
    for k, task in enumerate(seq.tasks):
        t0 = time.perf_counter()
        seen_classes = sorted(set(seen_classes) | set(task.classes))
        task_seen = seen_mask(task.classes, seq.n_classes)
        reservoir = Reservoir(exemplars.quota(k + 1), stream(seed, "reservoir", k))
        models = train_base_models(
            task.x_train, task.y_train, task_seen, cfg.B,
            rngs=[stream(seed, "gate", k, b) for b in range(cfg.B)],
            init_rngs=[stream(seed, "init", k, b) for b in range(cfg.B)],
            arch=arch, cfg=tcfg, task_index=k, observers=[reservoir],
            init_models=[shared] * cfg.B if shared is not None else None)
        if models.visits != len(task.y_train) or reservoir.seen != len(task.y_train):
            raise RuntimeError("online contract violated: stream not visited exactly once")
        meta["visits"].append(models.visits)
        meta["base_acc"].append([evaluate(w, task.x_test, task.y_test, task_seen) for w in models.models[:2]])
        update_exemplars(exemplars, k, reservoir, stream(seed, "exemplars", k))
        t1 = time.perf_counter()
        if cfg.skip_vae:
            vae.store.freeze(vae.prior(k))
        else:
            clf = None
            if cfg.aux_clf_loss:
                ex_x, ex_y = exemplars.arrays([k])
                clf = (ex_x, ex_y, task_seen)
            losses = vae.train_task(models.models, k, stream(seed, "vae", k), clf_data=clf)
            meta["vae_epoch_loss"].append(losses)
            before = prior_digest(vae)
            rep = consolidator(seed, k)
            if prior_digest(vae) != before:
                raise RuntimeError("consolidation modified the task priors")
            meta["consolidation"].append({"coverage": rep.coverage, "loss": rep.losses})
        t2 = time.perf_counter()
        res = _evaluate(cfg, vae, exemplars, seq.tasks[: k + 1], icfg, seed, k, seq.n_classes, arch)
        M.append(res.accuracies)
        meta["peak_live_models"] = max(meta["peak_live_models"], res.peak_live_models)
        meta["finetuned"] &= res.finetuned
        t3 = time.perf_counter()
        meta["timings"].append({"base": t1 - t0, "vae": t2 - t1, "eval": t3 - t2})
        log.info("seed %d task %d: row %s (%.1fs)", seed, k, M.rows[-1] if M.rows else None, t3 - t0)
    meta["priors"] = [[g.mean.tolist(), g.log_var.tolist()] for g in vae.store]
    latents = export_latents(vae.store, cfg.export_latents, stream(seed, "latents")) if cfg.export_latents else None
    return SeedResult(seed, M, meta, latents)


def _evaluate(cfg, vae, exemplars, tasks, icfg, seed, stage, n_classes, arch):
    sampler = None
    if cfg.skip_vae and cfg.skip_vae_source == "random_init":
        sampler = lambda rng, j=None: init_mlp(arch, rng)
    if cfg.mode == "aware":
        return task_aware_infer(vae, exemplars, tasks, icfg, seed, stage, n_classes, sampler)
    return task_agnostic_infer(vae, exemplars, tasks, icfg, seed, stage, n_classes, sampler)


def _run_single(cfg: RunConfig, seed: int, seq: TaskSequence) -> SeedResult:
    """One classifier trained online through all tasks in order; no generative model."""
    arch = MlpArchitecture(seq.tasks[0].x_train.shape[1], cfg.hidden, seq.n_classes)
    tcfg = TrainConfig(cfg.clf_lr, cfg.clf_weight_decay, cfg.clf_batch, 1.0)
    from .classifier import _Learner
    learner = _Learner(init_mlp(arch, stream(seed, "init", "single")), tcfg, None)
    M = AccuracyMatrix()
    visits, seen_classes = [], []
    for k, task in enumerate(seq.tasks):
        seen_classes = sorted(set(seen_classes) | set(task.classes))
        learner.seen = seen_mask(seen_classes, seq.n_classes)
        s = OnlineStream(task.x_train, task.y_train)
        for x, y in s:
            learner.offer(x, y)
        learner.flush()
        visits.append(s.visits)
        row = []
        for t in seq.tasks[: k + 1]:
            mask = seen_mask(t.classes if cfg.mode == "aware" else seen_classes, seq.n_classes)
            row.append(evaluate(learner.w, t.x_test, t.y_test, mask))
        M.append(row)
    return SeedResult(seed, M, {"visits": visits})


def run(cfg: RunConfig) -> RunResult:
    return RunResult(cfg, [run_seed(cfg, s) for s in cfg.seeds])


# --------------------------------------------------------------------------
# persistence and reporting


def _git_stamp() -> str:
    try:
        return subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                              cwd=Path(__file__).parent, timeout=5).stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def _fmt(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.6f}"


def persist(result: RunResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["seed", "k", "A", "F"])
        for sr in result.seeds:
            for k in range(1, len(sr.matrix) + 1):
                F = forgetting(sr.matrix, k) if k >= 2 else None
                wr.writerow([sr.seed, k, _fmt(avg_accuracy(sr.matrix, k)), _fmt(F)])
    with open(out / "matrix.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["seed", "k", "j", "a"])
        for sr in result.seeds:
            for k, row in enumerate(sr.matrix.rows, 1):
                for j, a in enumerate(row, 1):
                    wr.writerow([sr.seed, k, j, repr(a)])
    meta = {"config": result.config.to_dict(), "version": __version__, "git": _git_stamp(),
            "python": platform.python_version(), "numpy": np.__version__,
            "seeds": {str(sr.seed): sr.meta for sr in result.seeds}}
    (out / "run.json").write_text(json.dumps(meta, indent=1, default=_json_default))
    latents = [(sr.seed, r) for sr in result.seeds for r in (sr.latents or [])]
    if latents:
        write_latents([r for _, r in latents], out / "latents.csv", result.config.latent_dim)
    return out


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def load(run_dir) -> RunResult:
    d = Path(run_dir)
    meta = json.loads((d / "run.json").read_text())
    cfg = RunConfig(**meta["config"])
    rows: dict[int, dict[int, dict[int, float]]] = {}
    with open(d / "matrix.csv") as fh:
        for r in csv.DictReader(fh):
            rows.setdefault(int(r["seed"]), {}).setdefault(int(r["k"]), {})[int(r["j"])] = float(r["a"])
    seeds = []
    for s in cfg.seeds:
        m = rows.get(s, {})
        M = AccuracyMatrix([[m[k][j] for j in sorted(m[k])] for k in sorted(m)])
        seeds.append(SeedResult(s, M, meta["seeds"].get(str(s), {})))
    return RunResult(cfg, seeds)


@dataclass
class Summary:
    n: int
    A_mean: float
    A_std: float
    F_mean: float | None
    F_std: float | None

    def render(self) -> str:
        a = f"{self.A_mean:.1f} ± {self.A_std:.1f}"
        f = "n/a" if self.F_mean is None else f"{self.F_mean:.1f} ± {self.F_std:.1f}"
        return f"A = {a}, F = {f} (n = {self.n}{', std set to 0' if self.n == 1 else ''})"


def mean_std(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=np.float64)
    return float(v.mean()), (float(v.std(ddof=1)) if len(v) > 1 else 0.0)


def summarize(results: list[RunResult]) -> Summary:
    ident = results[0].config.identity()
    for r in results[1:]:
        if r.config.identity() != ident:
            diff = sorted(k for k in ident if ident[k] != r.config.identity().get(k))
            raise ConfigError(f"cannot aggregate runs with different configs (differ in {diff})")
    finals = [sr.matrix for r in results for sr in r.seeds]
    A = [avg_accuracy(M, len(M)) for M in finals]
    F = [forgetting(M, len(M)) for M in finals if len(M) >= 2]
    am, asd = mean_std(A)
    fm, fsd = mean_std(F) if F else (None, None)
    return Summary(len(A), am, asd, fm, fsd)


def report(run_dirs, out_csv=None) -> Summary:
    s = summarize([load(d) for d in run_dirs])
    if out_csv:
        with open(out_csv, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["n", "A_mean", "A_std", "F_mean", "F_std"])
            wr.writerow([s.n, _fmt(s.A_mean), _fmt(s.A_std), _fmt(s.F_mean), _fmt(s.F_std)])
    return s
