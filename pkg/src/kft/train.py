"""SGD with momentum, learning-rate schedules, evaluation metrics, the
training loop, and checkpointing.
"""

from __future__ import annotations

import json
import os
import time
import numpy as np
from dataclasses import dataclass, field, asdict

from . import container
from .tensor import Tensor
from .layers import cross_entropy, sigmoid_bce
from .data import Dataset, AugmentConfig, batch_iterator
from .model import KftModel, ModelConfig


class TrainingDiverged(RuntimeError):
    pass


# -- optimizer -----------------------------------------------------------------


class SgdMomentum:
    """Heavy-ball SGD: v <- mu*v + g; p <- p - lr*v."""

    def __init__(self, params: dict, momentum: float = 0.9):
        self.params = params
        self.momentum = float(momentum)
        self.velocity = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self, lr: float):
        for name, p in self.params.items():
            if p.grad is None:
                raise ValueError(f"no gradient for parameter '{name}'")
            v = self.velocity[name]
            v *= self.momentum
            v += p.grad
            p.data -= lr * v

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# -- learning-rate schedules -----------------------------------------------------


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """base_lr * (1 + cos(pi * t/T)) / 2, clamped at the final value past T."""
    t = min(step, total_steps)
    return base_lr * (1.0 + np.cos(np.pi * t / total_steps)) / 2.0


class PlateauSchedule:
    """Multiply the rate by ``factor`` when validation loss fails to improve
    by ``min_delta`` for ``patience`` consecutive evaluations."""

    def __init__(self, base_lr: float, factor: float = 0.1, patience: int = 3,
                 min_delta: float = 1e-4):
        self.lr = float(base_lr)
        self.factor = float(factor)
        self.patience = int(patience)
        self.min_delta = float(min_delta)
        self.best = float("inf")
        self.bad_count = 0

    def update(self, val_loss: float) -> float:
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.bad_count = 0
        else:
            self.bad_count += 1
            if self.bad_count >= self.patience:
                self.lr *= self.factor
                self.bad_count = 0
        return self.lr

    def state(self) -> dict:
        return {"lr": self.lr, "best": self.best, "bad_count": self.bad_count}

    def load_state(self, s: dict):
        self.lr = s["lr"]
        self.best = s["best"]
        self.bad_count = s["bad_count"]


# -- metrics ---------------------------------------------------------------------


def top_k_accuracy(scores: np.ndarray, labels: np.ndarray, k: int) -> float:
    """Fraction of rows whose true class is among the k largest scores,
    score ties broken toward the lower class index."""
    order = np.argsort(-scores, axis=1, kind="stable")
    hits = (order[:, :k] == labels[:, None]).any(axis=1)
    return float(hits.mean())


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Precision averaged at each positive's rank in the score-sorted list."""
    order = np.argsort(-scores, kind="stable")
    pos = positives[order].astype(bool)
    if not pos.any():
        return 0.0
    cum = np.cumsum(pos)
    ranks = np.arange(1, len(pos) + 1)
    return float((cum[pos] / ranks[pos]).mean())


def mean_average_precision(scores: np.ndarray, targets: np.ndarray) -> float:
    """Mean AP over classes; classes with no positives are skipped."""
    aps = [average_precision(scores[:, c], targets[:, c])
           for c in range(scores.shape[1]) if targets[:, c].any()]
    if not aps:
        return 0.0
    return float(np.mean(aps))


@dataclass
class MetricReport:
    loss: float
    top1: float = 0.0
    top5: float = 0.0
    map: float = 0.0
    wall_ms: float = 0.0
    step: int = 0


def evaluate(model: KftModel, dataset: Dataset, augment: AugmentConfig,
             batch_size: int = 8) -> MetricReport:
    """Deterministic evaluation with the centre-crop pipeline."""
    if len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    t0 = time.perf_counter()
    all_scores = []
    all_labels = []
    losses = []
    counts = []
    for batch, labels in batch_iterator(dataset, batch_size, augment,
                                        training=False):
        logits = model.forward(Tensor(batch), training=False)
        if dataset.multi_label:
            loss = sigmoid_bce(logits, labels.astype(np.float32))
        else:
            loss = cross_entropy(logits, labels)
        losses.append(loss.item())
        counts.append(len(labels))
        all_scores.append(logits.data)
        all_labels.append(labels)
    scores = np.concatenate(all_scores)
    labels = np.concatenate(all_labels)
    loss = float(np.average(losses, weights=counts))
    rep = MetricReport(loss=loss, wall_ms=(time.perf_counter() - t0) * 1e3)
    if dataset.multi_label:
        rep.map = mean_average_precision(scores, labels)
    else:
        rep.top1 = top_k_accuracy(scores, labels, 1)
        rep.top5 = top_k_accuracy(scores, labels, min(5, scores.shape[1]))
    return rep


# -- checkpointing ---------------------------------------------------------------


def save_checkpoint(path, model: KftModel, optimizer: SgdMomentum,
                    meta: dict) -> None:
    entries = {}
    for name, p in model.named_parameters().items():
        entries[f"params.{name}"] = p.data
    for name, v in optimizer.velocity.items():
        entries[f"velocity.{name}"] = v
    for name, b in model.named_buffers().items():
        entries[f"buffers.{name}"] = b
    container.save_tensors(path, entries)
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=2)


def load_checkpoint(path, model: KftModel, optimizer: SgdMomentum | None = None) -> dict:
    entries = container.load_tensors(path)
    params = model.named_parameters()
    for name, p in params.items():
        p.data = entries[f"params.{name}"].astype(p.data.dtype)
    if optimizer is not None:
        for name in params:
            optimizer.velocity[name] = entries[f"velocity.{name}"].copy()
    buffers = {name[len("buffers."):]: arr for name, arr in entries.items()
               if name.startswith("buffers.")}
    if buffers:
        model.set_buffers(buffers)
    with open(str(path) + ".json") as fh:
        return json.load(fh)


# -- training loop ----------------------------------------------------------------


@dataclass
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    schedule: str = "cosine"            # 'cosine' | 'plateau'
    epochs: int = 35
    batch_size: int = 8
    effective_batch: int = 32
    max_steps: int | None = None
    shuffle_seed: int = 0
    eval_batch_size: int = 8
    early_stop_train_accuracy: float | None = None
    plateau_patience: int = 3
    plateau_min_delta: float = 1e-4
    augment: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(**self.augment) if self.augment else AugmentConfig()


def _grad_norms(params: dict) -> dict:
    out = {}
    for name, p in params.items():
        if p.grad is not None:
            out[name] = float(np.abs(p.grad).max())
    return out


def train_loop(model: KftModel, train_set: Dataset, val_set: Dataset | None,
               cfg: TrainConfig, out_dir: str | None = None,
               resume: str | None = None, log_fn=None) -> dict:
    """Run the training loop; returns the final state summary.

    Checkpoints the best (by validation loss) and last state under
    ``out_dir``; appends newline-delimited JSON metric records to
    ``out_dir/metrics.ndjson``. Resuming restores parameters, velocities,
    running statistics, step/epoch counters, and schedule state, giving a
    bitwise-identical continuation.
    """
    augment = cfg.augment_config()
    params = model.named_parameters()
    optimizer = SgdMomentum(params, cfg.momentum)
    accum = max(1, cfg.effective_batch // cfg.batch_size)
    steps_per_epoch = max(1, int(np.ceil(len(train_set) / cfg.batch_size)) // accum)
    total_steps = cfg.max_steps if cfg.max_steps is not None \
        else cfg.epochs * steps_per_epoch
    plateau = PlateauSchedule(cfg.lr, patience=cfg.plateau_patience,
                              min_delta=cfg.plateau_min_delta)
    step = 0
    start_epoch = 0
    best_val = float("inf")
    history = []

    if resume is not None:
        meta = load_checkpoint(resume, model, optimizer)
        step = meta["step"]
        start_epoch = meta["epoch"]
        best_val = meta.get("best_val", float("inf"))
        history = meta.get("history", [])
        if "plateau" in meta:
            plateau.load_state(meta["plateau"])

    log_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "metrics.ndjson")

    def emit(record: dict):
        history.append(record)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
        if log_fn is not None:
            log_fn(record)

    def current_lr() -> float:
        if cfg.schedule == "cosine":
            return cosine_lr(step, total_steps, cfg.lr)
        return plateau.lr

    def meta_dict(epoch):
        return {"step": step, "epoch": epoch, "best_val": best_val,
                "history": history, "plateau": plateau.state(),
                "train_config": cfg.to_dict(),
                "model_config": model.config.to_dict()}

    stop = False
    epoch = start_epoch
    for epoch in range(start_epoch, cfg.epochs):
        if stop:
            break
        micro = 0
        t_epoch = time.perf_counter()
        optimizer.zero_grad()
        loss_window = []
        acc_window = []
        for batch, labels in batch_iterator(train_set, cfg.batch_size, augment,
                                            cfg.shuffle_seed, epoch, training=True):
            logits = model.forward(Tensor(batch), training=True)
            if train_set.multi_label:
                loss = sigmoid_bce(logits, labels.astype(np.float32))
            else:
                loss = cross_entropy(logits, labels)
                acc_window.append(top_k_accuracy(logits.data, labels, 1))
                acc_window = acc_window[-10:]
            lval = loss.item()
            if not np.isfinite(lval):
                raise TrainingDiverged(
                    f"non-finite loss at step {step} (lr={current_lr():.6g}); "
                    f"largest gradient magnitudes: "
                    f"{sorted(_grad_norms(params).values())[-3:] if _grad_norms(params) else 'n/a'}")
            # scale so accumulated micro-batches average to the effective batch
            (loss * (1.0 / accum)).backward()
            loss_window.append(lval)
            micro += 1
            if micro % accum == 0:
                lr = current_lr()
                optimizer.step(lr)
                optimizer.zero_grad()
                step += 1
                emit({"step": step, "epoch": epoch, "split": "train",
                      "loss": float(np.mean(loss_window[-accum:])),
                      "top1": float(np.mean(acc_window)) if acc_window else None,
                      "top5": None, "map": None, "lr": lr,
                      "wall_ms": (time.perf_counter() - t_epoch) * 1e3})
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    stop = True
                # early stop on a moving window of training-batch accuracy
                if (cfg.early_stop_train_accuracy is not None
                        and len(acc_window) == 10
                        and np.mean(acc_window) >= cfg.early_stop_train_accuracy):
                    stop = True
                if stop:
                    break
        if val_set is not None and len(val_set) > 0:
            rep = evaluate(model, val_set, augment, cfg.eval_batch_size)
            emit({"step": step, "epoch": epoch, "split": "val", "loss": rep.loss,
                  "top1": rep.top1, "top5": rep.top5, "map": rep.map,
                  "lr": current_lr(), "wall_ms": rep.wall_ms})
            if cfg.schedule == "plateau":
                plateau.update(rep.loss)
            if out_dir is not None and rep.loss < best_val:
                best_val = rep.loss
                save_checkpoint(os.path.join(out_dir, "best.kft"), model,
                                optimizer, meta_dict(epoch + 1))
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, "last.kft"), model, optimizer,
                            meta_dict(epoch + 1))

    return {"step": step, "epoch": epoch, "best_val": best_val, "history": history}
