"""Minibatch training, self-supervised pretraining on waterfall strips, and evaluation."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DatasetError, ImageTooSmallError
from .imagecore import GrayImage, IntensityCurve
from .net import AdamState, LossConfig, SiameseModel, forward_backward, optimizer_step
from .patches import AugmentConfig, Patch, SamplePair, augment_array, stack_pairs

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    seed: int = 42
    lr: float = 1e-3
    lr_schedule: str = "constant"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig | None = None
    validation_fraction: float = 0.2

    def __post_init__(self):
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie strictly between 0 and 1")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    def lr_at(self, epoch: int) -> float:
        if self.lr_schedule == "cosine" and self.epochs > 1:
            return 0.5 * self.lr * (1 + math.cos(math.pi * epoch / self.epochs))
        return self.lr


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class EvalReport:
    accuracy: float
    precision: float
    recall: float
    auc: float
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float = 0.5

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return asdict(self)


def rank_auc(scores, labels) -> float:
    """ROC-AUC as the Mann-Whitney statistic (ties count one half); 0.5 if a class is absent."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return 0.5
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def evaluate_scores(scores, labels, threshold: float = 0.5) -> EvalReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(int)
    if scores.size == 0:
        raise DatasetError("cannot evaluate an empty dataset")
    pred = scores >= threshold
    pos = labels == 1
    tp, fp = int(np.sum(pred & pos)), int(np.sum(pred & ~pos))
    tn, fn = int(np.sum(~pred & ~pos)), int(np.sum(~pred & pos))
    return EvalReport(
        accuracy=(tp + tn) / scores.size,
        precision=tp / (tp + fp) if tp + fp else 0.0,
        recall=tp / (tp + fn) if tp + fn else 0.0,
        auc=rank_auc(scores, labels),
        tp=tp, fp=fp, tn=tn, fn=fn, threshold=threshold,
    )


def evaluate_model(model: SiameseModel, dataset: Sequence[SamplePair], threshold: float = 0.5) -> EvalReport:
    if not dataset:
        raise DatasetError("cannot evaluate an empty dataset")
    xa, xb, y = stack_pairs(dataset)
    return evaluate_scores(model.predict(xa, xb), y, threshold)


def split_by_correspondence(dataset: Sequence[SamplePair], fraction: float, rng: np.random.Generator):
    """Train/validation index split that keeps all pairs sharing an A patch together.

    A positive ``(A_i, B_i)`` and its negative ``(A_i, B_j)`` share ``A_i``, so grouping
    by the A patch's content never lets a correspondence straddle the split.
    """
    groups: dict[bytes, list[int]] = {}
    for i, s in enumerate(dataset):
        key = hashlib.blake2b(np.ascontiguousarray(s.patch_a.data, dtype=np.float32).tobytes(),
                              digest_size=16).digest()
        groups.setdefault(key, []).append(i)
    keys = list(groups)
    order = rng.permutation(len(keys))
    n_val = int(round(fraction * len(keys)))
    n_val = min(max(n_val, 1), len(keys) - 1) if len(keys) > 1 else 0
    val = sorted(i for k in order[:n_val] for i in groups[keys[k]])
    train = sorted(i for k in order[n_val:] for i in groups[keys[k]])
    return np.array(train, dtype=int), np.array(val, dtype=int)


def _augmented(x: np.ndarray, cfg: AugmentConfig | None, rng: np.random.Generator) -> np.ndarray:
    if cfg is None or cfg.is_noop():
        return x
    return np.stack([augment_array(p, cfg, rng) for p in x])


def train_model(model: SiameseModel, dataset: Sequence[SamplePair], cfg: TrainConfig = TrainConfig()
                ) -> tuple[SiameseModel, list[EpochStats]]:
    """Adam on shuffled minibatches; returns the best-validation snapshot and the history.

    The input model is not modified. Snapshot selection: highest validation accuracy,
    then lowest validation loss; later epochs win exact ties.
    """
    if len(dataset) < 2:
        raise DatasetError("training needs at least 2 samples")
    xa, xb, y = stack_pairs(dataset)
    if len(np.unique(y)) < 2:
        raise DatasetError("training data contains a single class")
    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = split_by_correspondence(dataset, cfg.validation_fraction, rng)
    work = model.copy()
    state = AdamState()
    best, best_key = work.copy(), None
    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        order = train_idx[rng.permutation(len(train_idx))]
        lr = cfg.lr_at(epoch)
        total_loss, correct = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            ba = _augmented(xa[idx], cfg.augment, rng)
            bb = _augmented(xb[idx], cfg.augment, rng)
            loss, p, grads = forward_backward(work, ba, bb, y[idx], cfg.loss)
            optimizer_step(work, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            total_loss += loss * len(idx)
            correct += int(np.sum((p >= 0.5) == (y[idx] == 1)))
        stats = EpochStats(epoch + 1, total_loss / len(order), correct / len(order), float("nan"), float("nan"))
        if len(val_idx):
            val_loss, vp, _ = forward_backward(work, xa[val_idx], xb[val_idx], y[val_idx], cfg.loss,
                                               need_grad=False)
            stats.val_loss = val_loss
            stats.val_acc = float(np.mean((vp >= 0.5) == (y[val_idx] == 1)))
            key = (stats.val_acc, -stats.val_loss)
            if best_key is None or key >= best_key:
                best, best_key = work.copy(), key
        else:
            best = work.copy()
        history.append(stats)
        log.debug("epoch %d loss %.4f acc %.3f val_acc %.3f", stats.epoch, stats.loss, stats.train_acc,
                  stats.val_acc)
    return best, history


def _speckle(patch: np.ndarray, rng: np.random.Generator, strength: float = 0.3) -> np.ndarray:
    return np.clip(patch * ((1 - strength) + strength * rng.standard_exponential(patch.shape)), 0, 1)


def _random_curve(rng: np.random.Generator) -> IntensityCurve:
    return IntensityCurve.gamma(float(np.exp(rng.uniform(np.log(0.6), np.log(1.7)))))


def pretrain_pairs(waterfalls: Sequence[GrayImage], m: int, n: int, pairs_per_image: int, seed: int,
                   augment: AugmentConfig) -> list[SamplePair]:
    """Self-labelled crops: two independent renderings of one location form a positive,
    crops at least two patch widths apart form a negative."""
    if not waterfalls:
        raise DatasetError("pretraining needs at least one waterfall image")
    rng = np.random.default_rng(seed)
    w2, h2 = 2 * m, 2 * n
    min_sep = 2 * max(w2, h2)
    pairs = []
    for img in waterfalls:
        # two windows must fit side by side with the separation between their origins
        if img.width < w2 + min_sep and img.height < h2 + min_sep:
            raise ImageTooSmallError(f"{img.width}x{img.height} waterfall cannot hold two separated {w2}x{h2} patches")
        data = img.data

        def crop(x, y):
            return data[y:y + h2, x:x + w2]

        def render(p):
            return augment_array(_speckle(_random_curve(rng)(p), rng), augment, rng)

        for _ in range(pairs_per_image):
            x, y = int(rng.integers(0, img.width - w2 + 1)), int(rng.integers(0, img.height - h2 + 1))
            base = crop(x, y)
            pairs.append(SamplePair(Patch(render(base)), Patch(render(base)), 1))
            for _ in range(100):
                x2, y2 = int(rng.integers(0, img.width - w2 + 1)), int(rng.integers(0, img.height - h2 + 1))
                if math.hypot(x2 - x, y2 - y) >= min_sep:
                    break
            else:
                continue
            pairs.append(SamplePair(Patch(render(base)), Patch(render(crop(x2, y2))), 0))
    order = rng.permutation(len(pairs))
    return [pairs[k] for k in order]


def pretrain(model: SiameseModel, waterfalls: Sequence[GrayImage], cfg: TrainConfig = TrainConfig(),
             m: int = 16, n: int = 16, pairs_per_image: int = 256) -> SiameseModel:
    augment = cfg.augment or AugmentConfig(noise_sigma=0.03, max_rotation=10.0, max_translation=1.0,
                                           scale_range=(0.95, 1.05))
    pairs = pretrain_pairs(waterfalls, m, n, pairs_per_image, cfg.seed, augment)
    trained, _ = train_model(model, pairs, cfg)
    return trained
