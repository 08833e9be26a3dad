"""Adam, the epoch loop with early stopping, and evaluation metrics."""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DataError, ShapeError, TrainingError
from .model import forward, l2_loss


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place on ``params`` (dtype preserved).

    Parameters without an entry in ``grads`` are left untouched. Returns
    ``(params, state)``.
    """
    unknown = set(grads) - set(params)
    if unknown:
        raise KeyError(f"gradients for unknown parameters: {sorted(unknown)}")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if np.shape(g) != np.shape(p):
            raise ShapeError(f"gradient for {name} has shape {np.shape(g)}, parameter has {np.shape(p)}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros(np.shape(p))
            state.v[name] = np.zeros(np.shape(p))
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * np.square(g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        dtype = np.asarray(p).dtype
        params[name] = (np.asarray(p, dtype=np.float64) - step).astype(dtype)
    return params, state


def clip_grad_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, total


def predict(params, config, windows, batch_size=512):
    """Normalised-scale predictions ``[n, S]`` for a window set (no dropout)."""
    out = np.empty((len(windows), config.horizon))
    for start in range(0, len(windows), batch_size):
        sl = slice(start, start + batch_size)
        out[sl] = forward(windows.endo[sl], windows.exo[sl], params, config).prediction.data
    return out


def metrics(pred, target):
    err = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return {"mse": float(np.mean(err * err)), "mae": float(np.mean(np.abs(err)))}


def evaluate(params, config, windows, endo_stats=None, denormalize=False, batch_size=512):
    """MSE and MAE over every sample and horizon step.

    Computed on the standardised scale by default; with ``denormalize`` and
    ``endo_stats=(mean, std)`` predictions and targets are mapped back to the
    original units first.
    """
    if len(windows) == 0:
        raise DataError("cannot evaluate on an empty window set")
    pred = predict(params, config, windows, batch_size)
    target = windows.target
    if denormalize:
        if endo_stats is None:
            raise DataError("denormalized metrics need the endogenous (mean, std)")
        mean, std = endo_stats
        pred, target = pred * std + mean, target * std + mean
    return metrics(pred, target)


@dataclass
class EpochRecord:
    epoch: int
    train_mse: float
    val_mse: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_mse: float = math.inf
    stop_reason: str = "max_epochs"
    steps: int = 0

    def summary(self):
        return {
            "summary": True,
            "best_epoch": self.best_epoch,
            "best_val_mse": self.best_val_mse,
            "stop_reason": self.stop_reason,
            "epochs_run": len(self.epochs),
            "steps": self.steps,
        }


def train_step(params, config, batch, state, rng=None):
    """Forward, backward and one Adam update on a batch. Returns the loss."""
    with ad.Tape() as tape:
        pred = forward(batch.endo, batch.exo, params, config, rng=rng).prediction
        loss = l2_loss(pred, batch.target)
    value = float(loss.data)
    if not math.isfinite(value):
        return value
    grads = ad.backward(loss, tape)
    if config.clip_norm > 0:
        grads, _ = clip_grad_norm(grads, config.clip_norm)
    adam_step(params, grads, state)
    return value


def train(params, config, train_windows, val_windows, val_fn=None, on_epoch=None):
    """Train with Adam and early stopping on validation MSE.

    Runs at most ``config.max_epochs`` epochs with seeded shuffling and
    dropout; stops once validation MSE has not improved for
    ``config.patience`` consecutive epochs. Returns a copy of the parameters
    from the best validation epoch, and a :class:`TrainReport`.

    ``val_fn(params) -> float`` replaces the default validation MSE;
    ``on_epoch(record)`` is called after every epoch.
    """
    if len(train_windows) == 0 or len(val_windows) == 0:
        raise DataError("train and validation window sets must be nonempty")
    if val_fn is None:
        def val_fn(p):
            return evaluate(p, config, val_windows)["mse"]

    params = {k: np.array(v) for k, v in params.items()}
    state = AdamState(lr=config.lr)
    order_rng = np.random.default_rng(config.seed)
    dropout_rng = np.random.default_rng(config.seed + 1) if config.dropout > 0 else None
    report = TrainReport()
    best = {k: v.copy() for k, v in params.items()}
    wait = 0
    n, bs = len(train_windows), config.batch_size

    for epoch in range(1, config.max_epochs + 1):
        tic = time.perf_counter()
        order = order_rng.permutation(n)
        sq_sum = 0.0
        for b, start in enumerate(range(0, n, bs)):
            batch = train_windows[order[start:start + bs]]
            loss = train_step(params, config, batch, state, dropout_rng)
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch {b}")
            sq_sum += loss * len(batch)
            report.steps += 1
        train_mse = sq_sum / (n * config.horizon)
        val_mse = float(val_fn(params))
        record = EpochRecord(epoch, train_mse, val_mse, time.perf_counter() - tic)
        report.epochs.append(record)
        if on_epoch is not None:
            on_epoch(record)
        if val_mse < report.best_val_mse:
            report.best_val_mse, report.best_epoch = val_mse, epoch
            best = {k: v.copy() for k, v in params.items()}
            wait = 0
        else:
            wait += 1
            if wait >= config.patience:
                report.stop_reason = "patience"
                break
    return best, report
