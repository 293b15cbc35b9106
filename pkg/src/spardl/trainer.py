"""Synchronous data-parallel SGD on a synthetic linear-regression task.

Every worker owns a disjoint shard, computes the exact mean-squared-error
gradient of the shared linear model, and the chosen synchronizer turns the
``P`` local gradients into one global gradient per worker. Workers apply
``w -= lr * global / P``; their weights are compared bit-for-bit after every
step.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .collectives import dense_all_reduce_reference, local_top_k, topka_baseline
from .errors import ConfigError, ConsistencyError
from .fabric import CostLedger, Fabric
from .pipeline import ClusterConfig, SparDLCluster

SYNCHRONIZERS = ("dense", "topka", "gres", "pres", "lres")

# Gradients are snapped to this grid before synchronization so that sums of a
# few of them are exact in float64 whatever the reduction order.
GRID = 2.0 ** -32


@dataclass
class SyntheticTask:
    """Linear regression with low-rank features, so the least-squares optimum is non-trivial.

    Features are ``z @ B`` with ``z`` drawn from ``rank`` latent factors and
    ``B`` a fixed loading matrix whose column scales decay, which gives the
    gradient a heavy-tailed coordinate profile.
    """

    seed: int
    N: int
    P: int
    samples_per_worker: int
    noise: float
    rank: int
    X: list[np.ndarray] = field(repr=False)
    y: list[np.ndarray] = field(repr=False)
    w_star: np.ndarray = field(repr=False)

    @classmethod
    def generate(cls, seed: int = 0, N: int = 2000, P: int = 4, samples_per_worker: int = 256,
                 noise: float = 0.1, rank: int = 64) -> SyntheticTask:
        rng = np.random.default_rng(seed)
        scales = 1.0 / np.sqrt(np.arange(1, N + 1))
        scales = rng.permutation(scales / np.linalg.norm(scales))
        B = rng.standard_normal((rank, N)) * scales
        w_star = rng.standard_normal(N)
        X, y = [], []
        for _ in range(P):
            Xw = rng.standard_normal((samples_per_worker, rank)) @ B
            X.append(Xw)
        signal_std = np.std(np.concatenate([Xw @ w_star for Xw in X]))
        w_star = w_star / signal_std
        for Xw in X:
            y.append(Xw @ w_star + noise * rng.standard_normal(samples_per_worker))
        return cls(seed, N, P, samples_per_worker, noise, rank, X, y, w_star)

    def shard(self, w: int) -> tuple[np.ndarray, np.ndarray]:
        return self.X[w], self.y[w]

    def loss(self, weights) -> float:
        """Mean squared error over the union of all shards."""
        sq = sum(float(np.sum((Xw @ weights - yw) ** 2)) for Xw, yw in zip(self.X, self.y))
        return sq / (self.P * self.samples_per_worker)

    def optimum_loss(self) -> float:
        X, y = np.vstack(self.X), np.concatenate(self.y)
        w, *_ = np.linalg.lstsq(X, y, rcond=None)
        return self.loss(w)


def local_gradient(weights, shard) -> np.ndarray:
    """Exact gradient of ``mean((X w - y)^2)`` on one shard."""
    X, y = shard
    return 2.0 * X.T @ (X @ weights - y) / X.shape[0]


@dataclass
class TrainConfig:
    iterations: int = 500
    lr: float = 0.05
    decay: float = 0.1
    decay_at: int = 400
    density: float = 0.01
    synchronizer: str = "gres"
    d: int = 1
    sag: str = "none"
    timing: str = "optimized"

    def __post_init__(self):
        if not 0 < self.density <= 1:
            raise ConfigError("density must lie in (0, 1]")
        if self.synchronizer not in SYNCHRONIZERS:
            raise ConfigError(f"synchronizer must be one of {SYNCHRONIZERS}")

    def rate(self, it: int) -> float:
        return self.lr * (self.decay if it >= self.decay_at else 1.0)

    def k_for(self, N: int, P: int) -> int:
        """``density * N`` rounded down to a multiple of ``P`` (at least ``P``)."""
        k = int(round(self.density * N))
        return max(P, k - k % P)


@dataclass
class TrainResult:
    synchronizer: str
    seed: int
    losses: list[float]
    weights: np.ndarray
    ledger: CostLedger

    @property
    def final_loss(self) -> float:
        return self.losses[-1]


class _Dense:
    def __init__(self, P):
        self.ledger = CostLedger.zeros(P)

    def __call__(self, grads):
        return dense_all_reduce_reference(grads)


class _TopkA:
    """All-gather baseline with worker-local error feedback."""

    def __init__(self, P, N, k):
        self.k, self.fabric = k, Fabric(P)
        self.res = [np.zeros(N) for _ in range(P)]

    @property
    def ledger(self):
        return self.fabric.ledger

    def __call__(self, grads):
        acc = [g + r for g, r in zip(grads, self.res)]
        self.res = [a - local_top_k(a, self.k)[0].to_dense(a.size) for a in acc]
        return [blk.to_dense() for blk in topka_baseline(self.fabric, acc, self.k)]


class _SparDL:
    def __init__(self, cfg: ClusterConfig):
        self.cluster = SparDLCluster(cfg)

    @property
    def ledger(self):
        return self.cluster.fabric.ledger

    def __call__(self, grads):
        return [r.to_dense() for r in self.cluster.all_reduce(grads).results]


def make_synchronizer(task: SyntheticTask, config: TrainConfig):
    P, N = task.P, task.N
    k = config.k_for(N, P)
    if config.synchronizer == "dense":
        return _Dense(P)
    if config.synchronizer == "topka":
        return _TopkA(P, N, k)
    return _SparDL(ClusterConfig(P, N, k, config.d, config.sag, config.synchronizer,
                                 config.timing, task.seed))


def train(task: SyntheticTask, config: TrainConfig) -> TrainResult:
    """Run synchronous SGD from zero weights; returns the loss after every step.

    ``losses[0]`` is the initial loss. Raises :class:`ConsistencyError` if
    workers' weights ever diverge.
    """
    sync = make_synchronizer(task, config)
    weights = [np.zeros(task.N) for _ in range(task.P)]
    losses = [task.loss(weights[0])]
    for it in range(config.iterations):
        grads = [np.round(local_gradient(weights[w], task.shard(w)) / GRID) * GRID
                 for w in range(task.P)]
        summed = sync(grads)
        lr = config.rate(it)
        for w in range(task.P):
            weights[w] = weights[w] - lr * (summed[w] / task.P)
        for w in range(1, task.P):
            if not np.array_equal(weights[0], weights[w]):
                raise ConsistencyError(f"worker {w} diverged at iteration {it}")
        losses.append(task.loss(weights[0]))
    return TrainResult(config.synchronizer, task.seed, losses, weights[0], sync.ledger)


def loss_curves_csv(results: list[TrainResult], fh=None) -> str | None:
    """Rows ``iteration,loss,synchronizer,seed``; a ledger footer row per run."""
    out = io.StringIO() if fh is None else fh
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(["iteration", "loss", "synchronizer", "seed"])
    for res in results:
        for it, loss in enumerate(res.losses):
            writer.writerow([it, repr(loss), res.synchronizer, res.seed])
    for res in results:
        writer.writerow(["ledger", f"rounds={res.ledger.max_rounds};scalars={res.ledger.max_scalars}",
                         res.synchronizer, res.seed])
    return out.getvalue() if fh is None else None
