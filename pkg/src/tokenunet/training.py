"""Dice + BCE objective, Nesterov SGD with cosine annealing, and the CV driver."""
import json
import logging
import math
import os
import time
from dataclasses import dataclass, fields

import numpy as np

from .autodiff import Tensor, bce_with_logits, memory, sigmoid, tape
from .data import sample_patch, sliding_window_infer
from .models import ConfigError, ModelConfig, build_model, model_forward

logger = logging.getLogger(__name__)

METRIC_KEYS = ("fold", "epoch", "step", "loss", "dice_wt", "dice_tc", "dice_at", "dice_mean", "lr",
               "time_s", "peak_bytes")
# epoch value marking a held-out evaluation record in the metrics log
EVAL_EPOCH = -1


@dataclass
class TrainConfig:
    epochs: int = 60
    folds: int = 5
    base_lr: float = 1e-2
    momentum: float = 0.9
    accumulation_steps: int = 16
    batch_size: int = 1
    patch_size: int = 32
    window: int = None
    overlap: float = 0.5
    loss_eps: float = 1e-5
    grad_clip: float = None
    seed: int = 0
    fold_seed: int = 0

    def validate(self, divisor=1):
        if self.accumulation_steps < 1:
            raise ConfigError("accumulation_steps must be >= 1")
        if self.batch_size != 1:
            raise ConfigError("only batch_size 1 is supported (use accumulation_steps)")
        if self.epochs < 0 or self.folds < 2 or self.base_lr <= 0:
            raise ConfigError("epochs must be >= 0, folds >= 2 and base_lr > 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive or unset")
        if self.patch_size % divisor or self.eval_window % divisor:
            raise ConfigError(f"patch/window size must be divisible by {divisor}")

    @property
    def eval_window(self):
        return self.window or self.patch_size

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def dice_ce_loss(logits, target, eps=1e-5):
    """Half soft-Dice loss (mean over labels) plus half mean binary cross-entropy."""
    g = np.asarray(getattr(target, "data", target), dtype=logits.dtype)
    if g.shape != logits.shape:
        raise ValueError(f"loss shape mismatch: logits {logits.shape} vs target {g.shape}")
    axes = tuple(range(1, logits.ndim))
    p = sigmoid(logits)
    inter = (p * Tensor(g, dtype=logits.dtype)).sum(axis=axes)
    denom = p.sum(axis=axes) + float(eps) + Tensor(g.sum(axis=axes), dtype=logits.dtype)
    dice = (inter * 2.0 + float(eps)) / denom
    dice_loss = (1.0 - dice).mean()
    return (dice_loss + bce_with_logits(logits, g)) * 0.5


def dice_score(pred, target):
    """Per-label Dice of binary volumes (L, ...); both-empty counts as 1.0."""
    pred = np.asarray(pred).astype(bool)
    target = np.asarray(target).astype(bool)
    scores = []
    for p, g in zip(pred, target):
        ps, gs = p.sum(), g.sum()
        scores.append(1.0 if ps + gs == 0 else 2.0 * np.logical_and(p, g).sum() / (ps + gs))
    return np.array(scores)


def binarize(logits):
    # sigmoid(z) > 0.5  <=>  z > 0
    return np.asarray(logits) > 0


def cosine_lr(step, total, base_lr):
    if total <= 0:
        raise ValueError("cosine schedule needs a positive horizon")
    step = min(max(step, 0), total)
    return max(0.0, base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total)))


def sgd_nesterov_step(params, grads, velocity, lr, mu=0.9):
    """In place: v <- mu*v + g; p <- p - lr*(g + mu*v)."""
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            continue
        v *= mu
        v += g
        p -= lr * (g + mu * v)


def clip_grad_norm(grads, max_norm):
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the norm before."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads if g is not None))
    if norm > max_norm:
        for g in grads:
            if g is not None:
                g *= max_norm / norm
    return norm


class SGDNesterov:
    def __init__(self, params, momentum=0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        sgd_nesterov_step([p.data for p in self.params], [p.grad for p in self.params],
                          self.velocity, lr, self.momentum)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


@dataclass
class MetricsRecord:
    fold: int
    epoch: int
    step: int
    loss: float
    dice_wt: float
    dice_tc: float
    dice_at: float
    dice_mean: float
    lr: float
    time_s: float
    peak_bytes: int

    def to_json(self):
        return json.dumps({k: getattr(self, k) for k in METRIC_KEYS})


class MetricsWriter:
    """Appends MetricsRecord lines to a JSON-lines file (or just collects them)."""

    def __init__(self, path=None, timing=True):
        self.path = path
        self.timing = timing
        self.records = []
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
            open(path, "w").close()

    def write(self, rec):
        if not self.timing:
            rec.time_s = 0.0
        self.records.append(rec)
        if self.path:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(rec.to_json() + "\n")


class Trainer:
    """Holds model, optimizer and schedule state across epochs of one fold."""

    def __init__(self, model, cfg, total_steps, fold=0, writer=None, rng=None):
        self.model = model
        self.cfg = cfg
        self.total_steps = max(1, total_steps)
        self.fold = fold
        self.writer = writer or MetricsWriter()
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.optimizer = SGDNesterov(model.parameters(), cfg.momentum)
        self.step = 0
        self.epoch = 0
        self.param_bytes = sum(p.data.nbytes for p in self.optimizer.params)
        self.t0 = time.perf_counter()

    def _apply(self):
        lr = cosine_lr(self.step, self.total_steps, self.cfg.base_lr)
        if self.cfg.grad_clip is not None:
            clip_grad_norm([p.grad for p in self.optimizer.params], self.cfg.grad_clip)
        self.optimizer.step(lr)
        self.optimizer.zero_grad()
        self.step += 1
        return lr

    def train_epoch(self, samples):
        """One pass over ``samples``: a random patch per subject, accumulated updates."""
        if not samples:
            raise ValueError("cannot train on an empty dataset")
        cfg = self.cfg
        order = self.rng.permutation(len(samples))
        losses, dices, lr, pending = [], [], 0.0, 0
        base = memory.current
        memory.reset_peak()
        for i in order:
            img, lab, _ = sample_patch(samples[i], cfg.patch_size, self.rng)
            tape.reset()
            logits, _ = model_forward(self.model, Tensor(img))
            loss = dice_ce_loss(logits, lab, cfg.loss_eps)
            (loss * (1.0 / cfg.accumulation_steps)).backward()
            losses.append(loss.item())
            dices.append(dice_score(binarize(logits.data), lab))
            del logits, loss
            pending += 1
            if pending == cfg.accumulation_steps:
                lr = self._apply()
                pending = 0
        if pending:
            lr = self._apply()
        self.epoch += 1
        d = np.mean(dices, axis=0)
        rec = MetricsRecord(self.fold, self.epoch, self.step, float(np.mean(losses)), float(d[0]), float(d[1]),
                            float(d[2]), float(d.mean()), float(lr), round(time.perf_counter() - self.t0, 3),
                            int(memory.peak - base + self.param_bytes))
        self.writer.write(rec)
        return rec


def steps_per_epoch(n_subjects, accumulation_steps):
    return math.ceil(n_subjects / accumulation_steps)


def train_epoch(model, samples, cfg, trainer=None):
    """Convenience wrapper: run one epoch with a fresh or given :class:`Trainer`."""
    trainer = trainer or Trainer(model, cfg, cfg.epochs * steps_per_epoch(len(samples), cfg.accumulation_steps))
    return trainer.train_epoch(samples)


def evaluate(model, samples, window=None, overlap=0.5, eps=1e-5):
    """Sliding-window Dice per subject. Returns dict with ``per_subject``, ``per_label``,
    ``mean`` and ``loss`` (mean Dice+BCE on the assembled logits)."""
    window = window or samples[0].image.shape[1]
    per_subject, losses = {}, []
    for s in samples:
        logits = sliding_window_infer(model, s.image, window, overlap, model.cfg.downsampling_factor)
        per_subject[s.subject_id] = dice_score(binarize(logits), s.label)
        losses.append(dice_ce_loss(Tensor(logits), s.label, eps).item())
    scores = np.array(list(per_subject.values()))
    per_label = scores.mean(axis=0)
    return {"per_subject": {k: v.tolist() for k, v in per_subject.items()}, "per_label": per_label.tolist(),
            "mean": float(per_label.mean()), "loss": float(np.mean(losses))}


def fold_assignment(subject_ids, folds, fold_seed):
    """Deterministic partition of subject ids into ``folds`` validation sets.

    Depends only on the sorted id list and ``fold_seed``, so every variant sees
    the same split.
    """
    ids = sorted(subject_ids)
    if len(ids) < folds:
        raise ValueError(f"need at least {folds} subjects for {folds}-fold CV, got {len(ids)}")
    perm = np.random.default_rng(fold_seed).permutation(len(ids))
    return [sorted(ids[j] for j in part) for part in np.array_split(perm, folds)]


def train_fold(model_cfg, train_cfg, train_set, val_set=None, fold=0, writer=None, ckpt_path=None):
    """Train a fresh model on ``train_set``; optionally evaluate on ``val_set``."""
    from .models.checkpoint import save_checkpoint

    train_cfg.validate(model_cfg.downsampling_factor)
    mcfg = ModelConfig.from_dict({**model_cfg.to_dict(), "seed": model_cfg.seed + fold})
    model = build_model(mcfg)
    writer = writer or MetricsWriter()
    total = train_cfg.epochs * steps_per_epoch(len(train_set), train_cfg.accumulation_steps)
    trainer = Trainer(model, train_cfg, total, fold, writer, np.random.default_rng([train_cfg.seed, fold]))
    for epoch in range(train_cfg.epochs):
        rec = trainer.train_epoch(train_set)
        logger.info("fold %d epoch %d loss %.4f dice %.4f", fold, rec.epoch, rec.loss, rec.dice_mean)
    report = None
    if val_set:
        base = memory.current
        memory.reset_peak()
        report = evaluate(model, val_set, train_cfg.eval_window, train_cfg.overlap, train_cfg.loss_eps)
        d = report["per_label"]
        last_lr = trainer.writer.records[-1].lr if train_cfg.epochs else train_cfg.base_lr
        writer.write(MetricsRecord(fold, EVAL_EPOCH, trainer.step, report["loss"], d[0], d[1], d[2],
                                   report["mean"], last_lr, round(time.perf_counter() - trainer.t0, 3),
                                   int(memory.peak - base + trainer.param_bytes)))
    if ckpt_path:
        save_checkpoint(model, ckpt_path)
    return model, report


def run_cross_validation(model_cfg, train_cfg, samples, out_dir=None, timing=True):
    """k-fold CV: per fold a fresh model, trained then evaluated on the held-out fold."""
    folds = fold_assignment([s.subject_id for s in samples], train_cfg.folds, train_cfg.fold_seed)
    by_id = {s.subject_id: s for s in samples}
    writer = MetricsWriter(os.path.join(out_dir, "metrics.jsonl") if out_dir else None, timing=timing)
    reports = []
    for k, val_ids in enumerate(folds):
        val = [by_id[i] for i in val_ids]
        train = [by_id[i] for i in sorted(by_id) if i not in set(val_ids)]
        ckpt = os.path.join(out_dir, f"fold{k}.tunc") if out_dir else None
        _, rep = train_fold(model_cfg, train_cfg, train, val, k, writer, ckpt)
        rep["fold"] = k
        rep["validation_ids"] = val_ids
        reports.append(rep)
    fold_means = [r["mean"] for r in reports]
    summary = {"variant": model_cfg.variant, "folds": reports, "fold_dice": fold_means,
               "median_dice": float(np.median(fold_means)), "mean_dice": float(np.mean(fold_means))}
    if out_dir:
        with open(os.path.join(out_dir, "cv_summary.json"), "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


__all__ = ["TrainConfig", "MetricsRecord", "MetricsWriter", "Trainer", "SGDNesterov", "METRIC_KEYS",
           "dice_ce_loss", "dice_score", "binarize", "cosine_lr", "sgd_nesterov_step", "clip_grad_norm", "train_epoch",
           "evaluate", "fold_assignment", "train_fold", "run_cross_validation", "steps_per_epoch"]
