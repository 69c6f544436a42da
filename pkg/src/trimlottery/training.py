"""Minibatch training: Adam with decoupled weight decay, plateau halving, best-model retention."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ModelGraph
from .tasks import Dataset, Split, onset_error
from .tensor import ContractError


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 2e-4
    plateau_patience: int = 10
    epochs: int = 60
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.plateau_patience < 1 or self.epochs < 0:
            raise ValueError("batch_size and plateau_patience must be positive, epochs non-negative")
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive and weight_decay non-negative")


class Adam:
    """Adam with decoupled weight decay (W <- W - lr*wd*W before each update)."""

    def __init__(self, params, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise ContractError(f"parameters {missing} have no gradient")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1 - b1 ** t
        c2 = 1 - b2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay:
                p.data -= p.data.dtype.type(self.lr * self.weight_decay) * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype, copy=False)


class PlateauScheduler:
    """Halve the learning rate after ``patience`` epochs without strict improvement.

    The first observed value is the reference; the counter resets on improvement
    and after each halving.
    """

    def __init__(self, lr, patience=10, factor=0.5):
        self.lr = lr
        self.patience = patience
        self.factor = factor
        self.best = None
        self.bad_epochs = 0
        self.halvings = []

    def step(self, value):
        if self.best is None or value < self.best:
            self.best = value
            self.bad_epochs = 0
            return self.lr
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.lr *= self.factor
            self.bad_epochs = 0
            self.halvings.append(value)
        return self.lr


def lr_on_plateau(history, lr=1e-3, patience=10):
    """Learning rate after replaying ``history`` (reference value first)."""
    if len(history) == 0:
        raise ContractError("validation history is empty")
    sched = PlateauScheduler(lr, patience)
    for v in history:
        sched.step(v)
    return sched.lr


@dataclass
class TrainHistory:
    initial_val_error: float
    train_loss: list = field(default_factory=list)
    val_error: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_error: float = float("inf")
    snapshot: ModelGraph | None = None
    snapshot_epoch: int | None = None
    final_lr: float = 0.0


def loss_for(model_out: T.Tensor, targets, loss_kind):
    if loss_kind == "ce":
        return T.cross_entropy(model_out, targets)
    if loss_kind == "bce":
        prob = T.sigmoid(model_out)
        return T.binary_cross_entropy(prob, np.asarray(targets).reshape(prob.shape))
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def predict_scores(model: ModelGraph, split: Split):
    out = model.predict(split.inputs)
    if split.metric == "onset":
        return 1.0 / (1.0 + np.exp(-out.reshape(-1).astype(np.float64)))
    return out


def error_from_scores(scores, split: Split):
    if split.metric == "onset":
        return onset_error(scores, split.targets)
    return float(np.mean(scores.argmax(axis=1) != split.targets))


def evaluate(model: ModelGraph, split: Split) -> float:
    """Error in [0, 1]: 1 - accuracy, or 1 - F-measure for onset splits."""
    if len(split) == 0:
        raise ContractError("cannot evaluate on an empty split")
    return error_from_scores(predict_scores(model, split), split)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    batches = [order[i : i + batch_size] for i in range(0, n, batch_size)]
    # a single leftover sample cannot be batch-normalized
    if len(batches) > 1 and len(batches[-1]) < 2:
        batches.pop()
    return batches


def train(model: ModelGraph, dataset: Dataset, config: TrainConfig, epochs=None, record_at=None,
          callback=None, lr=None):
    """Train ``model`` in place; on return it holds its best-validation weights.

    ``record_at=k`` stores a deep copy of the model at the end of epoch ``k``
    (``k=0`` is the untrained input). ``lr`` overrides the initial learning rate.
    """
    epochs = config.epochs if epochs is None else epochs
    seeds = np.random.SeedSequence(config.seed).spawn(2)
    order_rng = np.random.default_rng(seeds[0])
    model.rng = np.random.default_rng(seeds[1])
    lr0 = config.learning_rate if lr is None else lr
    opt = Adam(model.parameters(), lr0, config.weight_decay, (config.beta1, config.beta2), config.eps)
    sched = PlateauScheduler(lr0, config.plateau_patience)

    val0 = evaluate(model, dataset.val)
    sched.step(val0)
    hist = TrainHistory(initial_val_error=val0, best_val_error=val0, final_lr=lr0)
    best_state = model.state()
    if record_at == 0:
        hist.snapshot, hist.snapshot_epoch = copy.deepcopy(model), 0

    x_all, y_all = dataset.train.inputs, dataset.train.targets
    for epoch in range(1, epochs + 1):
        total, seen = 0.0, 0
        for b, idx in enumerate(_batches(len(x_all), config.batch_size, order_rng)):
            try:
                out = model.forward(x_all[idx], "train")
                loss = loss_for(out, y_all[idx], dataset.loss)
            except T.NumericError as exc:
                T.get_tape().clear()
                raise TrainingError(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from None
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            model.apply_masks()
            total += loss.item() * len(idx)
            seen += len(idx)
        val = evaluate(model, dataset.val)
        opt.lr = sched.step(val)
        hist.train_loss.append(total / max(seen, 1))
        hist.val_error.append(val)
        hist.lr.append(opt.lr)
        if val < hist.best_val_error:
            hist.best_val_error, hist.best_epoch = val, epoch
            best_state = model.state()
        if record_at == epoch:
            hist.snapshot, hist.snapshot_epoch = copy.deepcopy(model), epoch
        if callback is not None:
            callback(epoch, model, hist)
    hist.final_lr = opt.lr
    model.load_state(best_state)
    return model, hist
