"""Supervised training of the synthesis network on (G,R,NIR)->SWIR patches.

The recipe: mean-absolute-error objective, Nadam updates with the
momentum schedule mu_t = beta1 * (1 - 0.5 * 0.96**(t*psi)), gradient
norm normalization followed by per-entry value clipping, plateau-halved
learning rate, and early stopping on validation RMSE.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import SwirNet, forward
from .tensor import backward, mae_loss, no_grad

__all__ = [
    "TrainConfig",
    "NadamState",
    "PatchDataset",
    "TrainReport",
    "sample_patch_dataset",
    "clip_gradients",
    "nadam_step",
    "train",
    "evaluate",
    "constant_baseline",
    "DivergenceError",
]


class DivergenceError(RuntimeError):
    """Raised when a non-finite loss or gradient aborts training."""


@dataclass
class TrainConfig:
    lr0: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    schedule_decay: float = 0.004
    clip_norm: float = 1.0
    clip_value: float = 0.5
    patience: int = 5
    max_epochs: int = 10000
    patch_size: int = 32
    val_fraction: float = 0.2
    batch_size: int = 128
    seed: int = 0
    # learning-rate decrease policy: halve after lr_plateau_epochs without
    # validation improvement, and immediately when val RMSE overshoots the
    # best seen by lr_spike_factor (an oscillation symptom); floor 1e-6
    lr_plateau_epochs: int = 2
    lr_factor: float = 0.5
    lr_floor: float = 1e-6
    lr_spike_factor: float = 1.25

    def validate(self) -> None:
        positives = {
            "lr0": self.lr0,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "schedule_decay": self.schedule_decay,
            "clip_norm": self.clip_norm,
            "clip_value": self.clip_value,
            "patch_size": self.patch_size,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
        }
        for name, value in positives.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")


@dataclass
class NadamState:
    """Per-parameter moment estimates plus the momentum-schedule product."""

    m: list
    v: list
    mu_product: float = 1.0
    t: int = 0

    @classmethod
    def init(cls, params) -> "NadamState":
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
        )


@dataclass
class PatchDataset:
    """Train/validation split of (input, target) patch pairs.

    ``train_x`` is (N, d, d, 3) float32 DN, ``train_y`` is (N, d, d, 1);
    validation arrays likewise.
    """

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray


@dataclass
class EpochStats:
    epoch: int
    train_mae: float
    train_rmse: float
    val_mae: float
    val_rmse: float
    lr: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    stopped_epoch: int = 0
    best_epoch: int = 0
    best_val_rmse: float = math.inf
    diverged: bool = False

    def log_lines(self):
        yield "# epoch train_mae train_rmse val_mae val_rmse lr"
        for e in self.epochs:
            yield (
                f"{e.epoch} {e.train_mae:.6f} {e.train_rmse:.6f} "
                f"{e.val_mae:.6f} {e.val_rmse:.6f} {e.lr:.3e}"
            )


def sample_patch_dataset(tiles, count: int, d: int, seed: int,
                         val_fraction: float = 0.2) -> PatchDataset:
    """Crop ``count`` random d x d patches from 4-band (G,R,NIR,SWIR) tiles.

    Anchors are uniform over each tile's valid range and the source tile
    is drawn uniformly; everything is deterministic under ``seed``. The
    crops are then split at random into train/validation by
    ``val_fraction`` (rounded to the nearest count).
    """
    if count < 2:
        raise ValueError("need at least two crops to split train/val")
    for t in tiles:
        if t.meta.bands < 4:
            raise ValueError("tiles must carry 4 bands ordered (G, R, NIR, SWIR)")
        if t.meta.height < d or t.meta.width < d:
            raise ValueError(f"tile {t.meta.height}x{t.meta.width} smaller than patch size {d}")

    rng = np.random.default_rng(seed)
    xs = np.empty((count, d, d, 3), dtype=np.float32)
    ys = np.empty((count, d, d, 1), dtype=np.float32)
    for i in range(count):
        t = tiles[int(rng.integers(len(tiles)))]
        y0 = int(rng.integers(t.meta.height - d + 1))
        x0 = int(rng.integers(t.meta.width - d + 1))
        crop = t.data[:4, y0 : y0 + d, x0 : x0 + d].astype(np.float32)
        xs[i] = crop[:3].transpose(1, 2, 0)
        ys[i] = crop[3][..., None]

    n_val = int(round(count * val_fraction))
    n_val = min(max(n_val, 1), count - 1)
    order = rng.permutation(count)
    val_idx, train_idx = order[:n_val], order[n_val:]
    return PatchDataset(xs[train_idx], ys[train_idx], xs[val_idx], ys[val_idx])


def clip_gradients(grads, clip_norm: float = 1.0, clip_value: float = 0.5):
    """Normalize the global L2 norm to ``clip_norm`` (only when above it),
    then clamp each entry to [-clip_value, clip_value]. In place."""
    sq = 0.0
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise DivergenceError("non-finite gradient")
        sq += float(np.dot(g.reshape(-1), g.reshape(-1)))
    norm = math.sqrt(sq)
    if norm > clip_norm:
        factor = clip_norm / norm
        for g in grads:
            g *= factor
    for g in grads:
        np.clip(g, -clip_value, clip_value, out=g)
    return grads


def nadam_step(params, grads, state: NadamState, cfg: TrainConfig,
               lr: float | None = None) -> None:
    """One Nadam update over all parameters, in place.

    m_t = b1*m + (1-b1)*g;  v_t = b2*v + (1-b2)*g^2
    mu_t = b1*(1 - 0.5*0.96**(t*psi)), likewise mu_{t+1}
    m_bar = (1-mu_t)*g/(1-Pi_t) + mu_{t+1}*m_t/(1-Pi_t*mu_{t+1})
    theta -= lr * m_bar / (sqrt(v_t/(1-b2**t)) + eps)
    """
    if lr is None:
        lr = cfg.lr0
    b1, b2, psi = cfg.beta1, cfg.beta2, cfg.schedule_decay
    state.t += 1
    t = state.t
    mu_t = b1 * (1.0 - 0.5 * math.pow(0.96, t * psi))
    mu_next = b1 * (1.0 - 0.5 * math.pow(0.96, (t + 1) * psi))
    state.mu_product *= mu_t
    pi_t = state.mu_product
    bias2 = 1.0 - math.pow(b2, t)

    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        g_hat = g / (1.0 - pi_t)
        m_hat = m / (1.0 - pi_t * mu_next)
        m_bar = (1.0 - mu_t) * g_hat + mu_next * m_hat
        v_hat = v / bias2
        update = lr * m_bar / (np.sqrt(v_hat) + cfg.eps)
        if not np.all(np.isfinite(update)):
            raise DivergenceError("non-finite optimizer update")
        p.data -= update.astype(p.data.dtype, copy=False)


def _pooled_errors(abs_sum: float, sq_sum: float, n: int):
    mae = abs_sum / n
    rmse = math.sqrt(sq_sum / n)
    return mae, rmse


def evaluate(model: SwirNet, x: np.ndarray, y: np.ndarray,
             batch_size: int = 256):
    """Pooled MAE and RMSE over every pixel of every patch, in DN units."""
    if len(x) == 0:
        raise ValueError("evaluate needs a non-empty dataset")
    abs_sum = sq_sum = 0.0
    n = 0
    with no_grad():
        for i in range(0, len(x), batch_size):
            pred = forward(model, x[i : i + batch_size]).data
            diff = (pred - y[i : i + batch_size]).astype(np.float64)
            abs_sum += float(np.abs(diff).sum())
            sq_sum += float(np.square(diff).sum())
            n += diff.size
    mae, rmse = _pooled_errors(abs_sum, sq_sum, n)
    # Jensen: quadratic mean dominates absolute mean
    assert rmse >= mae - 1e-9, f"RMSE {rmse} fell below MAE {mae}"
    return mae, rmse


def constant_baseline(dataset: PatchDataset):
    """MAE/RMSE on validation of the constant predictor equal to the mean
    training target - the reference any trained model must beat."""
    const = float(dataset.train_y.mean(dtype=np.float64))
    diff = dataset.val_y.astype(np.float64) - const
    return float(np.abs(diff).mean()), float(np.sqrt(np.square(diff).mean()))


def train(model: SwirNet, dataset: PatchDataset, cfg: TrainConfig,
          log_stream=None):
    """Run the full training loop; returns (TrainReport, best parameter
    arrays in serialization order).

    Each epoch shuffles the training patches and applies, per mini-batch:
    forward -> MAE loss -> backward -> clip_gradients -> nadam_step.
    Validation RMSE drives both the plateau-halving of the learning rate
    and early stopping after ``cfg.patience`` epochs without improvement.
    On a non-finite loss the loop aborts and the best snapshot so far is
    returned with ``report.diverged`` set.
    """
    cfg.validate()
    if len(dataset.train_x) == 0 or len(dataset.val_x) == 0:
        raise ValueError("train requires non-empty train and validation sets")

    params = model.parameters()
    state = NadamState.init(params)
    rng = np.random.default_rng(cfg.seed)
    report = TrainReport()
    best = [p.data.copy() for p in params]
    lr = cfg.lr0
    bad_epochs = 0
    plateau = 0

    def emit(line):
        if log_stream is not None:
            log_stream.write(line + "\n")

    emit("# epoch train_mae train_rmse val_mae val_rmse lr")
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(dataset.train_x))
        abs_sum = sq_sum = 0.0
        n_seen = 0
        try:
            for i in range(0, len(order), cfg.batch_size):
                idx = order[i : i + cfg.batch_size]
                xb = dataset.train_x[idx]
                yb = dataset.train_y[idx]
                for p in params:
                    p.zero_grad()
                pred = forward(model, xb)
                loss = mae_loss(pred, yb)
                if not np.isfinite(loss.item()):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}")
                diff = (pred.data - yb).astype(np.float64)
                abs_sum += float(np.abs(diff).sum())
                sq_sum += float(np.square(diff).sum())
                n_seen += diff.size
                backward(loss)
                grads = [p.grad for p in params]
                clip_gradients(grads, cfg.clip_norm, cfg.clip_value)
                nadam_step(params, grads, state, cfg, lr=lr)
        except DivergenceError:
            report.diverged = True
            report.stopped_epoch = epoch
            emit(f"# diverged at epoch {epoch}; keeping best snapshot")
            break

        train_mae, train_rmse = _pooled_errors(abs_sum, sq_sum, n_seen)
        val_mae, val_rmse = evaluate(model, dataset.val_x, dataset.val_y)
        stats = EpochStats(epoch, train_mae, train_rmse, val_mae, val_rmse, lr)
        report.epochs.append(stats)
        emit(
            f"{epoch} {train_mae:.6f} {train_rmse:.6f} "
            f"{val_mae:.6f} {val_rmse:.6f} {lr:.3e}"
        )

        spiked = val_rmse > report.best_val_rmse * cfg.lr_spike_factor
        if val_rmse < report.best_val_rmse:
            report.best_val_rmse = val_rmse
            report.best_epoch = epoch
            best = [p.data.copy() for p in params]
            bad_epochs = 0
            plateau = 0
        else:
            bad_epochs += 1
            plateau += 1
        if spiked or plateau >= cfg.lr_plateau_epochs:
            lr = max(lr * cfg.lr_factor, cfg.lr_floor)
            plateau = 0

        report.stopped_epoch = epoch
        if bad_epochs >= cfg.patience:
            break

    return report, best
