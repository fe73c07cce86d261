"""Loss, Adam, early stopping and the mini-batch training loop."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from csihar import autodiff as ad
from csihar.autodiff import cross_entropy
from csihar.data import Dataset
from csihar.errors import ConfigError, NumericalError
from csihar.models.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from csihar.models.core import Model

logger = logging.getLogger(__name__)

__all__ = ["AdamState", "EarlyStopping", "TrainConfig", "TrainHistory", "TrainingDiverged",
           "adam_step", "cross_entropy", "evaluate_loss", "train"]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 50
    early_stop_patience: int = 10
    min_delta: float = 1e-6
    seed: int = 0
    clip_norm: Optional[float] = None

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ConfigError("must be non-negative", "training.learning_rate")
        for key in ("beta1", "beta2"):
            if not 0 <= getattr(self, key) < 1:
                raise ConfigError("must lie in [0, 1)", f"training.{key}")
        if self.epsilon <= 0:
            raise ConfigError("must be positive", "training.epsilon")
        if self.batch_size < 1:
            raise ConfigError("must be >= 1", "training.batch_size")
        if self.max_epochs < 1:
            raise ConfigError("must be >= 1", "training.max_epochs")
        if self.early_stop_patience < 1:
            raise ConfigError("must be >= 1", "training.early_stop_patience")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigError("must be positive when set", "training.clip_norm")


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update.

    ``params`` and ``grads`` map names to arrays.  Returns the new parameter
    arrays; ``state`` is updated in place.  A non-finite gradient aborts
    before anything is modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    out = {}
    for name, theta in params.items():
        g = grads[name]
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        out[name] = theta - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.epsilon)
    return out


class Adam:
    """Adam bound to a model's parameter tensors."""

    def __init__(self, params: dict, config: TrainConfig):
        self.params = params
        self.config = config
        self.state = AdamState()

    def step(self) -> None:
        grads = {n: (p.grad if p.grad is not None else np.zeros_like(p.data))
                 for n, p in self.params.items()}
        if self.config.clip_norm is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > self.config.clip_norm:
                scale = self.config.clip_norm / norm
                grads = {n: g * scale for n, g in grads.items()}
        new = adam_step({n: p.data for n, p in self.params.items()}, grads, self.state,
                        self.config)
        for n, p in self.params.items():
            p.data = new[n]

    def export(self) -> tuple:
        tensors = {}
        for n in self.params:
            if n in self.state.m:
                tensors[f"adam.m/{n}"] = self.state.m[n]
                tensors[f"adam.v/{n}"] = self.state.v[n]
        return tensors, self.state.t

    def restore(self, tensors: dict, t: int) -> None:
        self.state = AdamState(t=t)
        for n in self.params:
            if f"adam.m/{n}" in tensors:
                self.state.m[n] = np.array(tensors[f"adam.m/{n}"])
                self.state.v[n] = np.array(tensors[f"adam.v/{n}"])


# ---------------------------------------------------------------------------
# early stopping and history
# ---------------------------------------------------------------------------

class EarlyStopping:
    """Tracks the best validation loss and signals when patience runs out.

    An epoch counts as an improvement only if its loss beats the best so far
    by more than ``min_delta``.  ``best_state`` is whatever was passed with
    the best epoch.
    """

    def __init__(self, patience: int = 10, min_delta: float = 1e-6):
        if patience < 1:
            raise ConfigError("must be >= 1", "patience")
        self.patience = patience
        self.min_delta = min_delta
        self.best_loss = math.inf
        self.best_epoch: Optional[int] = None
        self.best_state = None
        self.wait = 0

    def update(self, epoch: int, val_loss: float, state=None) -> bool:
        if val_loss < self.best_loss - self.min_delta:
            self.best_loss = val_loss
            self.best_epoch = epoch
            self.best_state = state
            self.wait = 0
        else:
            self.wait += 1
        return self.wait >= self.patience


@dataclass
class TrainHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    val_acc: list = field(default_factory=list)
    best_epoch: Optional[int] = None
    stop_reason: Optional[str] = None

    def __len__(self) -> int:
        return len(self.train_loss)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Optional[dict]) -> "TrainHistory":
        return cls(**d) if d else cls()

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
        for i, (tl, vl, va) in enumerate(zip(self.train_loss, self.val_loss, self.val_acc), 1):
            w.writerow([i, f"{tl:.4f}", f"{vl:.4f}", f"{va:.4f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv_text(), encoding="utf-8")


class TrainingDiverged(NumericalError):
    """Loss became non-finite; ``checkpoint`` holds the last good weights."""

    def __init__(self, message, checkpoint: Checkpoint, history: TrainHistory):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.history = history


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------

def evaluate_loss(model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 256):
    """Mean cross-entropy and accuracy (fraction) over a labelled array."""
    total, correct = 0.0, 0
    with ad.no_grad():
        for s in range(0, len(x), batch_size):
            logits = model.logits(x[s:s + batch_size])
            total += cross_entropy(logits, y[s:s + batch_size]).item() * len(logits.data)
            correct += int(np.sum(logits.data.argmax(axis=1) == y[s:s + batch_size]))
    return total / len(x), correct / len(x)


def _snapshot(model: Model, epoch: int, history: TrainHistory, meta: dict) -> Checkpoint:
    return Checkpoint(model=model, epoch=epoch, history=history.to_dict(), meta=meta)


def _save_resume_point(path, model, opt, stopper, epoch, history, meta):
    extra, t = opt.export()
    if stopper.best_state is not None:
        extra.update({f"best/{n}": a for n, a in stopper.best_state.items()})
    meta = {**meta, "adam_t": t, "best_loss": stopper.best_loss if stopper.best_epoch else None,
            "best_epoch": stopper.best_epoch, "wait": stopper.wait}
    save_checkpoint(model, path, epoch=epoch, history=history.to_dict(), extra=extra, meta=meta)


def train(model: Model, dataset: Dataset, config: TrainConfig, *, checkpoint_dir=None,
          resume_from=None, meta: Optional[dict] = None):
    """Fit ``model`` on the train split, early-stopping on validation loss.

    Returns ``(best_checkpoint, history)``; the model's parameters are left
    at the best epoch.  With ``checkpoint_dir`` set, ``last/`` (a full resume
    point) is rewritten after every epoch and ``best/`` at the end; ``meta``
    is stored in every checkpoint written.
    """
    meta = dict(meta or {})
    for split in ("train", "val"):
        if not dataset.splits.get(split):
            raise ConfigError(f"dataset has no samples in its {split!r} split", "dataset")
    x_tr, y_tr = dataset.arrays("train", dtype=model.dtype)
    x_va, y_va = dataset.arrays("val", dtype=model.dtype)

    opt = Adam(model.params, config)
    stopper = EarlyStopping(config.early_stop_patience, config.min_delta)
    history = TrainHistory()
    start = 1
    if resume_from is not None:
        ckpt = load_checkpoint(resume_from, model)
        opt.restore(ckpt.extra, ckpt.meta.get("adam_t", 0))
        history = TrainHistory.from_dict(ckpt.history)
        if ckpt.meta.get("best_epoch") is not None:
            stopper.best_loss = ckpt.meta["best_loss"]
            stopper.best_epoch = ckpt.meta["best_epoch"]
            stopper.best_state = {n: ckpt.extra[f"best/{n}"] for n in model.params}
        stopper.wait = ckpt.meta.get("wait", 0)
        start = ckpt.epoch + 1
    initial = model.state_dict()
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    def diverged(msg):
        model.load_state_dict(stopper.best_state or initial)
        history.best_epoch = stopper.best_epoch
        history.stop_reason = "diverged"
        ck = _snapshot(model, stopper.best_epoch or 0, history, meta)
        if ckdir is not None:
            save_checkpoint(model, ckdir / "best", epoch=ck.epoch, history=ck.history, meta=meta)
        return TrainingDiverged(msg, ck, history)

    n = len(x_tr)
    stop_reason = "max_epochs"
    for epoch in range(start, config.max_epochs + 1):
        perm = np.random.Generator(np.random.PCG64(config.seed + epoch)).permutation(n)
        running = 0.0
        for s in range(0, n, config.batch_size):
            idx = perm[s:s + config.batch_size]
            model.zero_grad()
            loss = cross_entropy(model.logits(x_tr[idx]), y_tr[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise diverged(f"training loss became {value} at epoch {epoch}")
            ad.backward(loss)
            try:
                opt.step()
            except NumericalError as exc:
                raise diverged(str(exc)) from exc
            running += value * len(idx)
        val_loss, val_acc = evaluate_loss(model, x_va, y_va)
        if not math.isfinite(val_loss):
            raise diverged(f"validation loss became {val_loss} at epoch {epoch}")
        history.train_loss.append(running / n)
        history.val_loss.append(val_loss)
        history.val_acc.append(val_acc)
        stop = stopper.update(epoch, val_loss, model.state_dict())
        logger.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.4f", epoch, running / n,
                    val_loss, val_acc)
        if ckdir is not None:
            _save_resume_point(ckdir / "last", model, opt, stopper, epoch, history, meta)
        if stop:
            stop_reason = "patience"
            break

    history.best_epoch = stopper.best_epoch
    history.stop_reason = stop_reason
    model.load_state_dict(stopper.best_state)
    best = _snapshot(model, stopper.best_epoch, history, meta)
    if ckdir is not None:
        save_checkpoint(model, ckdir / "best", epoch=best.epoch, history=best.history, meta=meta)
    return best, history
