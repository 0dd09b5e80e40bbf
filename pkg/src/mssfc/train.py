"""Training loop, augmentation, evaluation.

Everything here is deterministic under a fixed config seed: the shuffle
and augmentation stream for epoch e is a fresh counter-based generator
keyed on (seed, e), so resuming from a checkpoint at epoch boundary
reproduces the uninterrupted run bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import AdamState, OptimError, adam_step
from .metrics import ConfusionCounts, accumulate, metrics_from
from .model import Model
from .tensor import Rng, Tensor, bce_with_logits

TASKS = ("bx_t1", "bx_t2", "cd")


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    counts: dict  # task -> ConfusionCounts over the epoch's training batches


def effective_flags(flags, task_filter: str):
    a1, a2, acd = flags
    if task_filter == "bx":
        acd = 0
    elif task_filter == "cd":
        a1 = a2 = 0
    elif task_filter != "both":
        raise ValueError(f"unknown task filter {task_filter!r}")
    return a1, a2, acd


def augment_sample(sample_arrays, rng: Rng, crop: int):
    """Same geometric transform for both images and every mask."""
    arrs = list(sample_arrays)
    h, w = arrs[0].shape[2:]
    flip_h = rng.random() < 0.5
    flip_v = rng.random() < 0.5
    y0 = rng.integers(0, h - crop + 1) if h > crop else 0
    x0 = rng.integers(0, w - crop + 1) if w > crop else 0
    out = []
    for a in arrs:
        if a is None:
            out.append(None)
            continue
        if flip_h:
            a = a[:, :, :, ::-1]
        if flip_v:
            a = a[:, :, ::-1, :]
        out.append(np.ascontiguousarray(a[:, :, y0:y0 + crop, x0:x0 + crop]))
    return out


def _zeros_like_mask(img):
    return np.zeros((1, 1) + img.shape[2:], dtype=np.float32)


def collate(samples, task_filter: str = "both", rng: Rng | None = None, crop: int | None = None):
    """Stack samples into batch arrays; absent masks become zero planes with flag 0."""
    imgs1, imgs2, l1, l2, lcd, flags = [], [], [], [], [], []
    for s in samples:
        arrays = [s.img_t1, s.img_t2, s.m1, s.m2, s.m_cd]
        if rng is not None and crop is not None:
            arrays = augment_sample(arrays, rng, crop)
        a1, a2, acd = effective_flags(s.flags, task_filter)
        imgs1.append(arrays[0])
        imgs2.append(arrays[1])
        l1.append(arrays[2] if arrays[2] is not None else _zeros_like_mask(arrays[0]))
        l2.append(arrays[3] if arrays[3] is not None else _zeros_like_mask(arrays[0]))
        lcd.append(arrays[4] if arrays[4] is not None else _zeros_like_mask(arrays[0]))
        flags.append((a1, a2, acd))
    cat = lambda xs: np.concatenate(xs, axis=0)
    return cat(imgs1), cat(imgs2), (cat(l1), cat(l2), cat(lcd)), np.array(flags, dtype=np.float64)


def batch_loss(model: Model, x1, x2, labels, flags):
    """Forward pass and the availability-weighted three-task loss."""
    cfg = model.cfg
    dtype = model.store.dtype
    masks, logits, pyr = model.forward(Tensor(x1.astype(dtype)), Tensor(x2.astype(dtype)))
    lams = (cfg.lambda_t1, cfg.lambda_t2, cfg.lambda_cd)
    total = None
    for z, y, lam, a in zip(logits, labels, lams, flags.T):
        term = bce_with_logits(z, y.astype(dtype)) if a.all() else \
            bce_with_logits(z, y.astype(dtype), sample_weights=a)
        term = lam * term
        total = term if total is None else total + term
    return total, masks


def epoch_rng(seed: int, epoch: int) -> Rng:
    return Rng(seed * 1_000_003 + epoch + 1)


def train_epoch(model: Model, opt: AdamState, samples, epoch: int,
                task_filter: str = "both") -> EpochStats:
    cfg = model.cfg
    if not samples:
        raise ValueError("train_epoch: empty dataset")
    rng = epoch_rng(cfg.seed, epoch)
    order = rng.permutation(len(samples))
    losses = []
    counts = {t: ConfusionCounts() for t in TASKS}
    for start in range(0, len(samples), cfg.batch):
        batch = [samples[i] for i in order[start:start + cfg.batch]]
        x1, x2, labels, flags = collate(batch, task_filter, rng, cfg.image_size)
        model.store.zero_grad()
        loss, masks = batch_loss(model, x1, x2, labels, flags)
        value = loss.item()
        if not np.isfinite(value):
            ids = ",".join(s.id for s in batch)
            raise OptimError(f"non-finite loss at epoch {epoch} batch [{ids}]")
        loss.backward()
        adam_step(opt, model.store)
        losses.append(value)
        for task, pred, y, a in zip(TASKS, (masks.m1, masks.m2, masks.m_cd),
                                    labels, flags.T):
            keep = a > 0
            if keep.any():
                counts[task] = accumulate(counts[task], pred.data[keep], y[keep])
    return EpochStats(epoch, float(np.mean(losses)), counts)


def evaluate(model: Model, samples, task_filter: str = "both", batch: int | None = None):
    """Confusion counts + metrics per task over a split; absent labels skip a task."""
    cfg = model.cfg
    batch = batch or cfg.batch
    counts = {t: ConfusionCounts() for t in TASKS}
    seen = {t: False for t in TASKS}
    for start in range(0, len(samples), batch):
        chunk = samples[start:start + batch]
        x1, x2, labels, flags = collate(chunk, task_filter)
        masks, _, _ = model.forward(Tensor(x1.astype(model.store.dtype)),
                                    Tensor(x2.astype(model.store.dtype)))
        for task, pred, y, a in zip(TASKS, (masks.m1, masks.m2, masks.m_cd),
                                    labels, flags.T):
            keep = a > 0
            if keep.any():
                seen[task] = True
                counts[task] = accumulate(counts[task], pred.data[keep], y[keep])
    report = {}
    for task in TASKS:
        if not seen[task]:
            continue
        p, r, iou, f1 = metrics_from(counts[task])
        report[task] = {"counts": counts[task], "precision": p, "recall": r,
                        "iou": iou, "f1": f1}
    return report


def scheduled_lr(cfg, epoch: int) -> float:
    """Cosine decay from cfg.lr down to 10% across the configured epoch budget."""
    frac = 0.5 * (1.0 + np.cos(np.pi * min(epoch, cfg.epochs) / cfg.epochs))
    return cfg.lr * (0.1 + 0.9 * frac)


def fit(model: Model, opt: AdamState, samples, epochs: int | None = None,
        task_filter: str = "both", start_epoch: int = 0, log=None):
    """Run the scheduled training loop; resumable at any epoch boundary."""
    history = []
    for epoch in range(start_epoch, epochs if epochs is not None else model.cfg.epochs):
        opt.lr = scheduled_lr(model.cfg, epoch)
        stats = train_epoch(model, opt, samples, epoch, task_filter)
        history.append(stats)
        if log is not None:
            log(stats)
    return history


def make_optimizer(model: Model) -> AdamState:
    cfg = model.cfg
    return AdamState(model.store, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2,
                     weight_decay=cfg.weight_decay)
