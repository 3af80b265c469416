"""Dataset splitting and the training loop.

Per-device splits use a device-derived sub-seed (seed XOR device_id) so one
corpus-level seed reproduces every device's shuffle. The loop is one-cycle
LR with global-norm clipping, decoupled weight decay and early stopping on
validation accuracy, restoring the best epoch's parameters on exit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import IO, Mapping

import numpy as np

from .errors import NumericError, ValidationError
from .imaging import AugmentConfig, ChannelStats, SpectroImage, augment, standardize_pixels
from .vit import (VitModel, backward, clone_parameters, forward_batch,
                  loss_smoothed_ce, named_parameters, restore_parameters)

HISTORY_HEADER = ("epoch", "train_loss", "train_acc", "val_loss", "val_acc", "lr")


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 5.0 / 7.0
    val_frac: float = 1.0 / 7.0
    test_frac: float = 1.0 / 7.0
    seed: int = 0
    per_device: bool = True

    def __post_init__(self):
        if min(self.train_frac, self.val_frac, self.test_frac) <= 0:
            raise ValidationError("split fractions must be positive")
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-12:
            raise ValidationError(f"split fractions sum to {total}, expected 1")


@dataclass(frozen=True)
class SplitIndices:
    train: tuple[int, ...]
    val: tuple[int, ...]
    test: tuple[int, ...]


def split_dataset(
    images_per_device: Mapping[int, int], spec: SplitSpec
) -> dict[int, SplitIndices]:
    """Shuffled per-device partition; val/test counts round half-up from the
    fractions, the remainder goes to train."""
    splits = {}
    for device_id in sorted(images_per_device):
        n = images_per_device[device_id]
        if n < 7:
            raise ValidationError(
                f"device {device_id} has {n} images, need >= 7 to split"
            )
        n_val = _half_up(spec.val_frac * n)
        n_test = _half_up(spec.test_frac * n)
        n_train = n - n_val - n_test
        if min(n_train, n_val, n_test) < 1:
            raise ValidationError(
                f"device {device_id}: degenerate split {n_train}/{n_val}/{n_test}"
            )
        rng = np.random.Generator(np.random.PCG64(spec.seed ^ device_id))
        perm = rng.permutation(n)
        splits[device_id] = SplitIndices(
            train=tuple(sorted(int(i) for i in perm[:n_train])),
            val=tuple(sorted(int(i) for i in perm[n_train : n_train + n_val])),
            test=tuple(sorted(int(i) for i in perm[n_train + n_val :])),
        )
    return splits


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    max_epochs: int = 50
    patience: int = 15
    peak_lr: float = 1e-4
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    label_smoothing: float = 0.1
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    warmup_frac: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if min(self.batch_size, self.max_epochs, self.patience) < 1:
            raise ValidationError("batch_size, max_epochs, patience must be >= 1")
        if self.patience > self.max_epochs:
            raise ValidationError("patience exceeds max_epochs")
        if min(self.peak_lr, self.clip_norm) <= 0 or self.weight_decay < 0:
            raise ValidationError("peak_lr/clip_norm must be > 0, weight_decay >= 0")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValidationError("label_smoothing outside [0, 1)")


def lr_at(
    step: int,
    total_steps: int,
    peak_lr: float,
    warmup_frac: float = 0.3,
    start_div: float = 25.0,
    final_div: float = 1e4,
) -> float:
    """One-cycle: linear warmup from peak/start_div to peak over the first
    warmup_frac of steps, cosine anneal down to peak/final_div after."""
    if total_steps < 1:
        raise ValidationError("total_steps must be >= 1")
    if not 0 <= step < total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps})")
    warmup = _half_up(warmup_frac * total_steps)
    start = peak_lr / start_div
    floor = peak_lr / final_div
    if step <= warmup:
        if warmup == 0:
            return peak_lr
        return start + (peak_lr - start) * (step / warmup)
    progress = (step - warmup) / max(total_steps - 1 - warmup, 1)
    return floor + (peak_lr - floor) * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adaptive moments with decoupled weight decay: the decay term is
    lr*wd*theta regardless of the gradient, so zero-gradient parameters
    still shrink."""

    def __init__(self, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, model: VitModel, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        bias1 = 1.0 - self.beta1 ** self.t
        bias2 = 1.0 - self.beta2 ** self.t
        for name, param in named_parameters(model):
            g = grads[name]
            m = self._m.setdefault(name, np.zeros_like(param))
            v = self._v.setdefault(name, np.zeros_like(param))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            param -= lr * (update + self.weight_decay * param)


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale the whole gradient set so its global L2 norm is <= max_norm.
    Returns the pre-clip norm."""
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if total > max_norm and total > 0:
        scale = max_norm / total
        for g in grads.values():
            g *= scale
    return total


@dataclass(eq=False)
class EvalSet:
    """Standardized images ready for the model, plus integer labels."""

    images: np.ndarray
    labels: np.ndarray


@dataclass(eq=False)
class ClassificationData:
    """Training inputs: rendered [0,1] pixels (augmentation operates on
    these), the train-fit channel stats, and the pre-standardized val set."""

    train_pixels: np.ndarray
    train_labels: np.ndarray
    val_pixels: np.ndarray
    val_labels: np.ndarray
    stats: ChannelStats
    augment_cfg: AugmentConfig | None = None


@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float
    lr: float


@dataclass(frozen=True)
class TrainHistory:
    rows: tuple[HistoryRow, ...]
    best_epoch: int
    stopped_early: bool


def epoch_metrics(model: VitModel, dataset: EvalSet, alpha_for_loss: float):
    """Mean loss and fraction correct, no updates and no augmentation."""
    n = dataset.images.shape[0]
    if n == 0:
        raise ValidationError("empty dataset")
    loss_sum = 0.0
    correct = 0
    for start in range(0, n, 256):
        imgs = dataset.images[start : start + 256]
        labels = dataset.labels[start : start + 256]
        logits = forward_batch(imgs, model)
        loss_sum += loss_smoothed_ce(logits, labels, alpha_for_loss) * imgs.shape[0]
        correct += int((np.argmax(logits, axis=1) == labels).sum())
    return loss_sum / n, correct / n


def _sample_seed(seed: int, epoch: int, index: int) -> int:
    mask = (1 << 64) - 1
    ss = np.random.SeedSequence([seed & mask, epoch, index])
    return int(ss.generate_state(1, np.uint64)[0])


def train(model: VitModel, data: ClassificationData, cfg: TrainConfig):
    """Epoch loop per the training recipe; returns (model, history) with the
    model restored to its best-validation epoch."""
    n_train = data.train_pixels.shape[0]
    n_val = data.val_pixels.shape[0]
    if n_train == 0 or n_val == 0:
        raise ValidationError("empty train or val split")
    train_labels = np.asarray(data.train_labels, dtype=int)
    val_labels = np.asarray(data.val_labels, dtype=int)

    steps_per_epoch = math.ceil(n_train / cfg.batch_size)
    total_steps = cfg.max_epochs * steps_per_epoch
    optimizer = AdamW(cfg.adam_betas, cfg.adam_eps, cfg.weight_decay)

    train_eval = EvalSet(standardize_pixels(data.train_pixels, data.stats), train_labels)
    val_eval = EvalSet(standardize_pixels(data.val_pixels, data.stats), val_labels)

    rows: list[HistoryRow] = []
    best_acc = -1.0
    best_epoch = 0
    best_params = clone_parameters(model)
    epochs_since_best = 0
    stopped_early = False
    step = 0
    for epoch in range(1, cfg.max_epochs + 1):
        order_rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence([cfg.seed & ((1 << 64) - 1), epoch]))
        )
        order = order_rng.permutation(n_train)
        lr = cfg.peak_lr
        for start in range(0, n_train, cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            pixels = data.train_pixels[chunk]
            if data.augment_cfg is not None:
                pixels = np.stack([
                    augment(SpectroImage(pixels=pixels[i]), data.augment_cfg,
                            _sample_seed(cfg.seed, epoch, int(chunk[i]))).pixels
                    for i in range(len(chunk))
                ])
            batch = standardize_pixels(pixels, data.stats)
            loss, grads = backward(model, batch, train_labels[chunk], cfg.label_smoothing)
            if not math.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, step {step}")
            clip_gradients(grads, cfg.clip_norm)
            lr = lr_at(step, total_steps, cfg.peak_lr, cfg.warmup_frac)
            optimizer.step(model, grads, lr)
            step += 1
        train_loss, train_acc = epoch_metrics(model, train_eval, cfg.label_smoothing)
        val_loss, val_acc = epoch_metrics(model, val_eval, 0.0)
        rows.append(HistoryRow(epoch, train_loss, train_acc, val_loss, val_acc, lr))
        if val_acc > best_acc:
            best_acc = val_acc
            best_epoch = epoch
            best_params = clone_parameters(model)
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= cfg.patience:
                stopped_early = True
                break
    restore_parameters(model, best_params)
    return model, TrainHistory(tuple(rows), best_epoch, stopped_early)


def write_history_csv(history: TrainHistory, stream: IO[str]) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(HISTORY_HEADER)
    for row in history.rows:
        writer.writerow([row.epoch, repr(row.train_loss), repr(row.train_acc),
                         repr(row.val_loss), repr(row.val_acc), repr(row.lr)])
