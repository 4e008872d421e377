"""Logloss objective with L2 regularization, Adam, and the training loop.

Regularization is the squared L2 norm over every registry parameter
(biases and embedding tables included), applied in coupled form: the
2 * lambda * theta term is added to the gradient before the Adam moment
updates.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from .errors import DataError, NumericError

PRED_CLAMP = 1e-7  # predictions are clamped to [eps, 1-eps] inside the loss only


def logloss(preds, labels) -> float:
    """Mean binary cross-entropy with clamped predictions; never NaN/Inf."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.ndim != 1 or preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} vs labels {labels.shape}")
    if preds.shape[0] == 0:
        raise DataError("logloss of an empty prediction vector")
    p = np.clip(preds, PRED_CLAMP, 1.0 - PRED_CLAMP)
    terms = labels * np.log(p) + (1.0 - labels) * np.log1p(-p)
    return float(-np.mean(terms))


def _instance_logloss(pred: float, label: float) -> float:
    p = min(max(pred, PRED_CLAMP), 1.0 - PRED_CLAMP)
    return -(label * math.log(p) + (1.0 - label) * math.log1p(-p))


def objective(loss: float, registry, lam: float) -> float:
    """loss + lam * ||theta||^2, summed over all registry parameters."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    penalty = 0.0
    for entry in registry:
        penalty += float(np.sum(entry.values * entry.values))
    return loss + lam * penalty


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, registry) -> "AdamState":
        return cls(m=[np.zeros_like(e.values) for e in registry],
                   v=[np.zeros_like(e.values) for e in registry])


def adam_step(registry, state: AdamState, lr: float, lam: float = 0.0) -> None:
    """One Adam update from the gradients currently in the registry.

    g   <- grad + 2 * lam * theta
    m   <- beta1 * m + (1 - beta1) * g
    v   <- beta2 * v + (1 - beta2) * g^2
    theta <- theta - lr * (m / (1 - beta1^t)) / (sqrt(v / (1 - beta2^t)) + eps)
    """
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for k, entry in enumerate(registry):
        g = entry.grad + 2.0 * lam * entry.values if lam else entry.grad
        state.m[k] *= state.beta1
        state.m[k] += (1.0 - state.beta1) * g
        state.v[k] *= state.beta2
        state.v[k] += (1.0 - state.beta2) * (g * g)
        m_hat = state.m[k] / c1
        v_hat = state.v[k] / c2
        entry.values -= lr * m_hat / (np.sqrt(v_hat) + state.eps)


def batch_loss_and_grad(model, batch) -> float:
    """Mean logloss over the batch; mean gradient left in the registry.

    Instances are processed and their gradients reduced in ascending index
    order, so the result is a pure function of the batch content.
    """
    model.zero_grad()
    n = len(batch)
    total = 0.0
    for i in range(n):
        inst = batch.instance(i)
        prob, cache = model.forward(inst)
        model.backward(cache, inst.label)
        total += _instance_logloss(prob, inst.label)
    model.registry.scale_grads(1.0 / n)
    return total / n


@dataclass
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 4096
    l2: float = 1e-4
    epochs: int = 1
    seed: int = 0
    eval_every: int = 1  # epochs between validation passes; 0 disables
    shuffle: bool = True

    def validate(self) -> list[str]:
        problems = []
        if self.lr < 0 or not math.isfinite(self.lr):
            problems.append("lr: must be a finite number >= 0")
        if self.batch_size < 1:
            problems.append("batch_size: must be >= 1")
        if self.l2 < 0:
            problems.append("l2: must be >= 0")
        if self.epochs < 0:
            problems.append("epochs: must be >= 0")
        if self.eval_every < 0:
            problems.append("eval_every: must be >= 0")
        return problems


def fit(model, train: "data_mod.Dataset", config: TrainConfig,
        valid: "data_mod.Dataset | None" = None, callbacks=()) -> list[dict]:
    """Epochs of shuffled mini-batches with per-batch Adam updates.

    Returns (and streams to callbacks) one record per batch:
    {step, epoch, train_logloss, wall_ms}; on the validation cadence an
    extra record additionally carries val_auc / val_logloss. Epoch e is
    shuffled by default_rng((config.seed, e)).
    """
    from .metrics import evaluate  # metrics depends on optim.logloss

    if len(train) == 0:
        raise DataError("cannot fit on an empty dataset")
    if train.n_dense != model.config.dense_fields or \
            train.n_sparse != model.config.sparse_fields:
        raise DataError(
            f"dataset has {train.n_dense} dense / {train.n_sparse} sparse fields, "
            f"model expects {model.config.dense_fields} / {model.config.sparse_fields}")
    state = AdamState.init(model.registry)
    records: list[dict] = []
    started = time.perf_counter()

    def emit(record: dict) -> None:
        records.append(record)
        for cb in callbacks:
            cb(record)

    step = 0
    for epoch in range(config.epochs):
        for batch in data_mod.batch_iter(train, config.batch_size,
                                         seed=(config.seed, epoch),
                                         shuffle=config.shuffle):
            loss = batch_loss_and_grad(model, batch)
            if not math.isfinite(loss):
                raise NumericError(
                    f"training loss became non-finite at step {step}")
            adam_step(model.registry, state, config.lr, config.l2)
            step += 1
            emit({"step": step, "epoch": epoch, "train_logloss": loss,
                  "wall_ms": (time.perf_counter() - started) * 1e3})
        if valid is not None and config.eval_every and \
                (epoch + 1) % config.eval_every == 0:
            report = evaluate(model, valid)
            emit({"step": step, "epoch": epoch,
                  "train_logloss": records[-1]["train_logloss"],
                  "val_auc": report.auc, "val_logloss": report.logloss,
                  "wall_ms": (time.perf_counter() - started) * 1e3})
    return records
