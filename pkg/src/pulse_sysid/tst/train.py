"""Windowing, AdamW, cosine schedule, early stopping and the training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from ..dataio import NormStats
from .model import TstConfig, TstModel, forward, loss_and_grad, mse

log = logging.getLogger(__name__)


# -- windows -----------------------------------------------------------------


@dataclass(frozen=True)
class WindowBatch:
    context: np.ndarray         # (B, L, 2) normalized (vdyn, current)
    future_current: np.ndarray  # (B, H)
    target: np.ndarray          # (B, H) normalized vdyn

    def __post_init__(self):
        B = self.context.shape[0]
        if self.context.ndim != 3 or self.context.shape[2] != 2:
            raise ValueError("context must be (B, L, 2)")
        if self.future_current.shape != self.target.shape or self.target.shape[0] != B:
            raise ValueError("future_current and target must both be (B, H)")

    def __len__(self):
        return self.context.shape[0]


class WindowSet:
    """Every stride-1 window of one or more normalized sequences.

    Windows are gathered lazily by global index, so memory stays linear in
    the sequence length.
    """

    def __init__(self, seqs: Sequence[tuple], stats: NormStats, cfg: TstConfig):
        self.cfg = cfg
        span = cfg.context_len + cfg.horizon
        self._v, self._i, offsets = [], [], []
        for k, (vdyn, cur) in enumerate(seqs):
            vdyn, cur = np.asarray(vdyn, dtype=float), np.asarray(cur, dtype=float)
            if len(vdyn) != len(cur):
                raise ValueError("vdyn and current lengths differ")
            n = len(vdyn) - span + 1
            if n < 1:
                log.warning("sequence of length %d shorter than L+H=%d; no windows", len(vdyn), span)
                continue
            self._v.append(stats.norm_v(vdyn))
            self._i.append(stats.norm_i(cur))
            offsets.append(np.stack([np.full(n, len(self._v) - 1), np.arange(n)], axis=1))
        self.index = np.concatenate(offsets) if offsets else np.zeros((0, 2), dtype=int)

    def __len__(self):
        return len(self.index)

    def batch(self, which) -> WindowBatch:
        L, H = self.cfg.context_len, self.cfg.horizon
        rows = self.index[np.asarray(which, dtype=int)]
        ctx = np.empty((len(rows), L, 2))
        fut = np.empty((len(rows), H))
        tgt = np.empty((len(rows), H))
        for r, (f, s) in enumerate(rows):
            v, i = self._v[f], self._i[f]
            ctx[r, :, 0] = v[s:s + L]
            ctx[r, :, 1] = i[s:s + L]
            fut[r] = i[s + L:s + L + H]
            tgt[r] = v[s + L:s + L + H]
        return WindowBatch(ctx, fut, tgt)


def make_windows(vdyn, i, stats: NormStats, cfg: TstConfig) -> Iterator[WindowBatch]:
    """Yield one single-window batch per start offset 0 .. N - L - H."""
    ws = WindowSet([(vdyn, i)], stats, cfg)
    for k in range(len(ws)):
        yield ws.batch([k])


# -- optimizer and schedule ---------------------------------------------------


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 3.0e-4
    min_lr: float = 3.0e-6
    weight_decay: float = 1.0e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 15
    seed: int = 0
    max_windows_per_epoch: int = 0  # 0 uses every training window
    max_val_windows: int = 0        # 0 uses every validation window

    def to_dict(self) -> dict:
        return asdict(self)


def cosine_lr(epoch: int, opt: OptimConfig) -> float:
    """Single cosine cycle from ``lr`` at epoch 0 to ``min_lr`` at ``max_epochs - 1``."""
    if opt.max_epochs <= 1:
        return opt.lr
    e = min(max(epoch, 0), opt.max_epochs - 1)
    return opt.min_lr + 0.5 * (opt.lr - opt.min_lr) * (1.0 + math.cos(math.pi * e / (opt.max_epochs - 1)))


def clip_grads(grads: dict, max_norm: float) -> float:
    """Scale gradients in place to global norm <= ``max_norm``; returns the pre-clip norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / (norm + 1e-6)
        for g in grads.values():
            g *= s
    return norm


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    best_val: float = math.inf
    since_best: int = 0
    lr: float = 0.0


def adamw_step(params: dict, grads: dict, state: TrainState, lr: float, opt: OptimConfig) -> None:
    """Decoupled weight decay Adam update, in place."""
    state.step += 1
    t = state.step
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for k, p in params.items():
        g = grads[k]
        m = state.m.setdefault(k, np.zeros_like(p))
        v = state.v.setdefault(k, np.zeros_like(p))
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        p *= 1.0 - lr * opt.weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


class EarlyStopping:
    """Stops once ``patience`` epochs pass without a strictly lower value."""

    def __init__(self, patience: int = 15):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.since_best = 0
        self.epoch = -1

    def update(self, value: float) -> bool:
        self.epoch += 1
        if value < self.best:
            self.best, self.best_epoch, self.since_best = value, self.epoch, 0
        else:
            self.since_best += 1
        return self.since_best >= self.patience


# -- loop ----------------------------------------------------------------------


@dataclass
class TrainResult:
    model: TstModel
    history: list  # (epoch, train_loss, val_loss, lr)
    best_epoch: int
    stopped_reason: str  # "patience", "max_epochs" or "diverged"

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in self.history:
            w.writerow([row[0], repr(row[1]), repr(row[2]), repr(row[3])])
        return buf.getvalue()

    def save_history(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.history_csv(), encoding="utf-8")
        return path


def evaluate_loss(model: TstModel, windows: WindowSet, batch_size: int = 256, limit: int = 0) -> float:
    """Mean MSE over windows (evenly strided subset when ``limit`` is set)."""
    n = len(windows)
    if n == 0:
        raise ValueError("no windows to evaluate")
    idx = np.arange(n)
    if limit and n > limit:
        idx = np.linspace(0, n - 1, limit).round().astype(int)
    total = 0.0
    for a in range(0, len(idx), batch_size):
        b = windows.batch(idx[a:a + batch_size])
        total += mse(forward(model, b.context, b.future_current), b.target) * b.target.size
    return total / (len(idx) * model.cfg.horizon)


def train(model: TstModel, train_windows: WindowSet, val_windows: WindowSet,
          opt: OptimConfig = OptimConfig(), epoch_callback=None) -> TrainResult:
    """Train a copy of ``model``; the returned model holds the best-validation weights.

    Each history row reports the mean training loss seen during the epoch
    and the validation loss after it.
    """
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise ValueError("training and validation sets need at least one window each")
    model = model.copy()
    rng = np.random.default_rng(opt.seed)
    state = TrainState()
    stopper = EarlyStopping(opt.patience)
    best = model.copy()
    history = []
    reason = "max_epochs"
    for epoch in range(opt.max_epochs):
        lr = cosine_lr(epoch, opt)
        state.epoch, state.lr = epoch, lr
        order = rng.permutation(len(train_windows))
        if opt.max_windows_per_epoch and len(order) > opt.max_windows_per_epoch:
            order = order[:opt.max_windows_per_epoch]
        run, count = 0.0, 0
        diverged = False
        for a in range(0, len(order), opt.batch_size):
            b = train_windows.batch(order[a:a + opt.batch_size])
            seed = int(rng.integers(2**63))
            loss_val, grads = loss_and_grad(model, b.context, b.future_current, b.target,
                                            training=True, seed=seed)
            if not math.isfinite(loss_val):
                diverged = True
                break
            clip_grads(grads, opt.clip_norm)
            adamw_step(model.params, grads, state, lr, opt)
            run += loss_val * len(b)
            count += len(b)
        val = evaluate_loss(model, val_windows, limit=opt.max_val_windows) if not diverged else math.nan
        if diverged or not math.isfinite(val):
            log.error("training diverged at epoch %d; keeping best checkpoint", epoch)
            reason = "diverged"
            break
        history.append((epoch, run / count, val, lr))
        stop = stopper.update(val)
        state.best_val, state.since_best = stopper.best, stopper.since_best
        if stopper.since_best == 0:
            best = model.copy()
        if epoch_callback is not None:
            epoch_callback(epoch, history[-1])
        log.info("epoch %d train %.6g val %.6g lr %.3g", epoch, run / count, val, lr)
        if stop:
            reason = "patience"
            break
    return TrainResult(best, history, stopper.best_epoch, reason)
