"""Composite loss, optimizers, the training loop, and the lambda grid search.

The objective is data_loss + lambda * process_loss: mean squared error on
observed biomass plus the mean squared process residual over the batch's
collocation points. lambda = 0 recovers plain empirical risk minimization
and skips the residual graph entirely, so an ERM run never touches the
process term's code path.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from math import cos, pi

import numpy as np

from . import autodiff as ad
from .backbone import forward, residual_graph
from .errors import ArgumentError, ConfigError, NumericError, TrainingDiverged

TRAIN_LOG_COLUMNS = ("iter", "data_loss", "phys_loss", "total_loss", "lr", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    lambda_: float = 0.25
    optimizer: str = "adam"          # "adam" | "sgd"
    lr: float = 0.001
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    schedule: str = "cosine"         # "constant" | "cosine"
    t_max: int = 0                   # 0 -> max_iters
    batch_size: int = 128
    max_iters: int = 1000
    seed: int = 42
    grad_clip: float = 0.0           # 0 -> off
    val_every: int = 10
    patience: int = 50
    collocation: str = "batch"       # "batch" | "full"

    def __post_init__(self):
        if self.lambda_ < 0:
            raise ConfigError("train.lambda", f"must be >= 0, got {self.lambda_}")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        if self.max_iters < 1:
            raise ConfigError("train.max_iters", "must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("train.optimizer", f"unknown optimizer {self.optimizer!r}")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError("train.schedule", f"unknown schedule {self.schedule!r}")
        if self.collocation not in ("batch", "full"):
            raise ConfigError("train.collocation", f"unknown mode {self.collocation!r}")
        if self.val_every < 1 or self.patience < 1:
            raise ConfigError("train.val_every", "val_every and patience must be >= 1")


@dataclass(frozen=True)
class TrainRecord:
    iteration: int
    data_loss: float
    phys_loss: float
    total_loss: float
    lr: float
    wall_ms: float


@dataclass
class TrainLog:
    lambda_: float
    records: list = field(default_factory=list)
    best_iteration: int = 0
    best_val_rmse: float = float("inf")
    early_stopped: bool = False

    def append(self, record):
        self.records.append(record)

    def wall_ms_to_iteration(self, iteration):
        return sum(r.wall_ms for r in self.records if r.iteration <= iteration)

    def to_csv(self, path, timing=False):
        """One row per iteration. wall_ms is 0 unless timing is requested,
        keeping default artifacts byte-identical across runs."""
        lines = [",".join(TRAIN_LOG_COLUMNS)]
        for r in self.records:
            wall = repr(float(r.wall_ms)) if timing else "0.0"
            lines.append(",".join([
                str(r.iteration), repr(r.data_loss), repr(r.phys_loss),
                repr(r.total_loss), repr(r.lr), wall,
            ]))
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")

    def summary(self):
        last = self.records[-1] if self.records else None
        return {
            "lambda": self.lambda_,
            "iterations": len(self.records),
            "best_iteration": self.best_iteration,
            "best_val_rmse": self.best_val_rmse,
            "final_data_loss": last.data_loss if last else None,
            "final_phys_loss": last.phys_loss if last else None,
            "final_total_loss": last.total_loss if last else None,
            "early_stopped": self.early_stopped,
        }


def data_loss(pred, obs):
    """Mean squared error between predicted and observed biomass."""
    obs = np.asarray(obs, dtype=np.float64)
    pred_shape = pred.shape if isinstance(pred, ad.Tensor) else np.shape(pred)
    if tuple(pred_shape) != obs.shape:
        raise ArgumentError(
            f"prediction shape {tuple(pred_shape)} != observation shape {obs.shape}")
    if obs.size == 0:
        raise ArgumentError("data_loss over an empty series")
    if isinstance(pred, ad.Tensor):
        return ad.mean(ad.square(pred - ad.constant(obs)))
    return float(np.mean((np.asarray(pred, dtype=np.float64) - obs) ** 2))


def process_loss(bundle, k):
    """Mean squared process residual over the bundle's collocation points."""
    return ad.mean(ad.square(residual_graph(bundle, k)))


def total_loss(data, phys, lambda_):
    """Weighted objective; lambda = 0 reduces to the data term alone."""
    if isinstance(data, ad.Tensor) or isinstance(phys, ad.Tensor):
        if lambda_ == 0.0:
            return data
        return data + lambda_ * phys
    if not (np.isfinite(data) and np.isfinite(phys)):
        raise NumericError(f"non-finite loss terms: data={data}, phys={phys}")
    return data + lambda_ * phys


def sgd_momentum_step(store, grads, lr, momentum):
    """v <- momentum*v + g; theta <- theta - lr*v, per parameter."""
    for name in store.names():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        v = store.slot(name, "velocity")
        v *= momentum
        v += g
        store[name].value -= lr * v
    store.step += 1


def adam_step(store, grads, lr, betas, eps=1e-8):
    b1, b2 = betas
    store.step += 1
    t = store.step
    for name in store.names():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
        m = store.slot(name, "adam_m")
        v = store.slot(name, "adam_v")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        store[name].value -= lr * m_hat / (np.sqrt(v_hat) + eps)


def _schedule_lr(cfg, iteration):
    if cfg.schedule == "constant":
        return cfg.lr
    t_max = cfg.t_max if cfg.t_max > 0 else cfg.max_iters
    frac = min(iteration, t_max) / t_max
    return cfg.lr * 0.5 * (1.0 + cos(pi * frac))


def _clip_gradients(grads, cap):
    norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > cap:
        scale = cap / norm
        for g in grads.values():
            g *= scale
    return grads


def val_rmse(store, sample_set, net_cfg):
    """Root mean squared error of biomass predictions in infer mode."""
    bundle = forward(store, sample_set.X, net_cfg, mode="infer")
    err = bundle.agb.value - sample_set.y
    return float(np.sqrt(np.mean(err * err)))


def _sample_batch(rng, n, batch_size):
    if batch_size >= n:
        return np.arange(n)
    return rng.choice(n, size=batch_size, replace=False)


def fit(store, train_set, val_set, net_cfg, proc_params, cfg):
    """Run the minibatch training loop and return (best-val params, log).

    Each iteration samples a batch, runs the trunk in train mode, assembles
    the objective, backpropagates, and applies the configured optimizer
    step. Validation RMSE is checked every val_every iterations; the best
    snapshot is restored at the end. Deterministic for a fixed seed.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ArgumentError("fit requires nonempty train and val sets")
    rng = np.random.default_rng(cfg.seed)
    log = TrainLog(lambda_=cfg.lambda_)
    n = len(train_set)
    best = store.snapshot()
    best_rmse = float("inf")
    best_iteration = 0
    bad_checks = 0

    full_x = train_set.X if cfg.collocation == "full" else None

    for iteration in range(1, cfg.max_iters + 1):
        t0 = time.perf_counter()
        lr = _schedule_lr(cfg, iteration)
        idx = _sample_batch(rng, n, cfg.batch_size)
        xb = train_set.X[idx]
        yb = train_set.y[idx]
        store.zero_adjoints()
        bundle = forward(store, xb, net_cfg, mode="train", rng=rng)
        d = data_loss(bundle.agb, yb)
        if cfg.lambda_ > 0.0:
            if cfg.collocation == "full":
                colloc = forward(store, full_x, net_cfg, mode="infer")
                p = process_loss(colloc, proc_params.k)
            else:
                p = process_loss(bundle, proc_params.k)
            total = d + cfg.lambda_ * p
            phys_value = float(p.value)
        else:
            total = d
            phys_value = 0.0
        total_value = float(total.value)
        if not np.isfinite(total_value):
            log.best_iteration = best_iteration
            log.best_val_rmse = best_rmse
            raise TrainingDiverged(iteration, best_iteration)
        grads = ad.backward(total, store)
        if cfg.grad_clip > 0.0:
            grads = _clip_gradients(grads, cfg.grad_clip)
        if cfg.optimizer == "sgd":
            sgd_momentum_step(store, grads, lr, cfg.momentum)
        else:
            adam_step(store, grads, lr, cfg.betas)
        wall_ms = (time.perf_counter() - t0) * 1000.0
        log.append(TrainRecord(iteration, float(d.value), phys_value,
                               total_value, lr, wall_ms))
        if iteration % cfg.val_every == 0:
            rmse = val_rmse(store, val_set, net_cfg)
            if rmse < best_rmse:
                best_rmse = rmse
                best_iteration = iteration
                best = store.snapshot()
                bad_checks = 0
            else:
                bad_checks += 1
                if bad_checks > cfg.patience:
                    log.early_stopped = True
                    break

    store.restore(best)
    log.best_iteration = best_iteration
    log.best_val_rmse = best_rmse
    return store, log


def default_lambda_grid():
    """The default process-weight grid: 0.05 to 1.00 in steps of 0.05."""
    return [round(0.05 * i, 2) for i in range(1, 21)]


@dataclass
class GridEntry:
    lambda_: float
    val_rmse: float = float("nan")
    error: str = ""


@dataclass
class GridSearchResult:
    best_lambda: float
    entries: list
    best_store: object = None
    best_log: object = None


def grid_search_lambda(candidates, init_store, train_set, val_set, net_cfg,
                       proc_params, base_cfg):
    """Train one model per candidate weight and pick the best-validation one.

    All candidates share the same seed (identical initialization) so only
    lambda varies. Ties break toward the larger lambda: the stronger process
    prior is preferred when the data cannot distinguish the candidates.
    Per-candidate failures are recorded and the search continues.
    """
    candidates = list(candidates)
    if not candidates:
        raise ArgumentError("grid search needs at least one candidate")
    if any(c < 0 for c in candidates):
        raise ArgumentError("lambda candidates must be >= 0")
    entries = []
    best = None
    for lam in sorted(candidates):
        cfg = replace(base_cfg, lambda_=lam)
        store = init_store.copy()
        try:
            fitted, log = fit(store, train_set, val_set, net_cfg, proc_params, cfg)
        except (TrainingDiverged, NumericError) as err:
            entries.append(GridEntry(lambda_=lam, error=str(err)))
            continue
        entry = GridEntry(lambda_=lam, val_rmse=log.best_val_rmse)
        entries.append(entry)
        # ascending scan with <= keeps the largest lambda among exact ties
        if best is None or entry.val_rmse <= best[0].val_rmse:
            best = (entry, fitted, log)
    if best is None:
        detail = "; ".join(f"lambda={e.lambda_}: {e.error}" for e in entries)
        raise TrainingDiverged(0, 0, f"all grid candidates failed ({detail})")
    entry, fitted, log = best
    return GridSearchResult(best_lambda=entry.lambda_, entries=entries,
                            best_store=fitted, best_log=log)
