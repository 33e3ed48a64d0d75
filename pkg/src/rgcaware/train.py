"""Joint training of the segmentation and classification heads."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .augment import AugmentConfig, augment_copy
from .engine.network import Network, NetworkSpec
from .losses import LossConfig, dice_entropy_loss, one_hot, pixels_as_samples, samples_as_pixels
from .optim import Adadelta

log = logging.getLogger(__name__)


@dataclass
class Sample:
    """One training/evaluation example: preprocessed pixels plus optional targets."""

    pixels: np.ndarray
    labels: Optional[np.ndarray] = None   # per-pixel {0,1,2}
    cls: Optional[int] = None             # 0 healthy, 1 glaucoma
    id: str = ""


@dataclass
class TrainConfig:
    epochs: int = 40
    iters_per_epoch: int = 512
    batch_size: int = 4
    split: float = 0.7
    stratified: bool = False
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    seg_weight: float = 1.0
    cls_weight: float = 1.0
    augment: Optional[AugmentConfig] = field(default_factory=AugmentConfig)
    rho: float = 0.95
    adadelta_eps: float = 1e-6
    lr: float = 1.0

    def validate(self) -> None:
        if self.epochs < 0 or self.iters_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs >= 0, iters_per_epoch >= 1 and batch_size >= 1 required")
        if not 0.0 < self.split < 1.0:
            raise ValueError("split must lie strictly between 0 and 1")
        self.loss.validate()
        if self.augment is not None:
            self.augment.validate()


@dataclass
class EpochRecord:
    epoch: int
    seg_loss: float
    cls_loss: float
    total: float


@dataclass
class TrainResult:
    net: Network
    history: list
    train_idx: np.ndarray
    test_idx: np.ndarray


def split_indices(n: int, frac: float = 0.7, seed: int = 0, strata: Optional[Sequence] = None):
    """Deterministic train/test partition of ``range(n)``.

    Unstratified: one seeded permutation, the first ``round(frac * n)`` go to
    training. Stratified: the same rule within each stratum.
    """
    if n < 2:
        raise ValueError("need at least two samples to split")
    rng = np.random.default_rng(seed)
    if strata is None:
        perm = rng.permutation(n)
        k = int(round(frac * n))
        train, test = np.sort(perm[:k]), np.sort(perm[k:])
    else:
        strata = np.asarray(strata)
        train_parts, test_parts = [], []
        for s in sorted(set(strata.tolist()), key=str):
            idx = np.flatnonzero(strata == s)
            idx = idx[rng.permutation(idx.size)]
            k = int(round(frac * idx.size))
            train_parts.append(idx[:k])
            test_parts.append(idx[k:])
        train, test = np.sort(np.concatenate(train_parts)), np.sort(np.concatenate(test_parts))
    if train.size == 0 or test.size == 0:
        raise ValueError(f"split {frac} of {n} samples leaves an empty partition")
    return train, test


def _batch_loss_and_grads(net: Network, xb, lab_b, cls_b, cfg: TrainConfig):
    seg, cls = net.forward(xb, train=True)
    grads, seg_l, cls_l = {}, 0.0, 0.0
    if seg is not None and lab_b is not None:
        t = one_hot(lab_b.reshape(-1), seg.shape[1])
        seg_l, g = dice_entropy_loss(t, pixels_as_samples(seg), cfg.loss, with_grad=True)
        grads[net.spec.seg_output] = cfg.seg_weight * samples_as_pixels(g, seg.shape)
    if cls is not None and cls_b is not None:
        t = one_hot(cls_b, cls.shape[1])
        cls_l, g = dice_entropy_loss(t, cls, cfg.loss, with_grad=True)
        grads[net.spec.cls_output] = cfg.cls_weight * g
    net.zero_grad()
    net.backward(grads)
    return seg_l, cls_l


def fit(net: Network, samples: Sequence[Sample], cfg: TrainConfig, callback=None) -> list:
    """Optimize ``net`` in place on all of ``samples``; returns per-epoch history."""
    cfg.validate()
    if not samples:
        raise ValueError("no training samples")
    if any(s.labels is None for s in samples) and net.spec.seg_output is not None:
        raise ValueError("training the segmentation head needs a mask for every sample")
    copies = cfg.augment.copies_per_scan if cfg.augment is not None else 1
    pool = [(i, k) for i in range(len(samples)) for k in range(copies)]
    rng = np.random.default_rng([cfg.seed, 1])
    opt = Adadelta(cfg.rho, cfg.adadelta_eps, cfg.lr)
    order, cursor = rng.permutation(len(pool)), 0
    history = []
    for epoch in range(cfg.epochs):
        seg_sum = cls_sum = 0.0
        for _ in range(cfg.iters_per_epoch):
            picks = []
            for _ in range(cfg.batch_size):
                if cursor == len(order):
                    order, cursor = rng.permutation(len(pool)), 0
                picks.append(pool[order[cursor]])
                cursor += 1
            xs, labs, clss = [], [], []
            for i, k in picks:
                s = samples[i]
                if cfg.augment is not None:
                    img, lab = augment_copy(s.pixels, s.labels, cfg.augment, i, k)
                else:
                    img, lab = s.pixels, s.labels
                xs.append(img)
                labs.append(lab)
                clss.append(s.cls)
            xb = np.stack(xs)[:, None]
            lab_b = np.stack(labs) if labs[0] is not None else None
            cls_b = np.array(clss) if all(c is not None for c in clss) else None
            seg_l, cls_l = _batch_loss_and_grads(net, xb, lab_b, cls_b, cfg)
            params = dict(net.parameters())
            opt.step(params, dict(net.gradients()))
            seg_sum += seg_l
            cls_sum += cls_l
        n = cfg.iters_per_epoch
        rec = EpochRecord(epoch + 1, seg_sum / n, cls_sum / n,
                          (cfg.seg_weight * seg_sum + cfg.cls_weight * cls_sum) / n)
        history.append(rec)
        log.info("epoch %d: seg %.4f cls %.4f total %.4f", rec.epoch, rec.seg_loss, rec.cls_loss, rec.total)
        if callback is not None:
            callback(rec)
    return history


def train(spec: NetworkSpec, dataset: Sequence[Sample], cfg: TrainConfig = TrainConfig(),
          init_seed: Optional[int] = None, callback=None) -> TrainResult:
    """Split ``dataset``, initialize from ``spec`` and fit on the training part."""
    cfg.validate()
    if not dataset:
        raise ValueError("dataset is empty")
    strata = [s.cls for s in dataset] if cfg.stratified else None
    tr, te = split_indices(len(dataset), cfg.split, cfg.seed, strata)
    net = Network(spec, seed=cfg.seed if init_seed is None else init_seed)
    history = fit(net, [dataset[i] for i in tr], cfg, callback)
    return TrainResult(net, history, tr, te)


def predict(net: Network, pixels: Sequence[np.ndarray], batch_size: int = 4):
    """Inference-mode (label maps, glaucoma probabilities) for a list of images."""
    labels, probs = [], []
    for a in range(0, len(pixels), batch_size):
        xb = np.stack([np.asarray(p, dtype=np.float64) for p in pixels[a:a + batch_size]])[:, None]
        seg, cls = net.forward(xb, train=False)
        if seg is not None:
            labels.extend(np.argmax(seg, axis=1).astype(np.uint8))
        if cls is not None:
            probs.extend(cls[:, 1])
    return labels, np.array(probs)


HISTORY_HEADER = ["epoch", "seg_loss", "cls_loss", "total"]


def write_history(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_HEADER)
        for r in history:
            w.writerow([r.epoch, repr(r.seg_loss), repr(r.cls_loss), repr(r.total)])
