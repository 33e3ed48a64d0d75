"""Dice, cross-entropy and dice-entropy losses over (N samples, C classes) batches."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EPS = 1e-7


@dataclass(frozen=True)
class LossConfig:
    alpha1: float = 1.0  # dice weight
    alpha2: float = 1.0  # cross-entropy weight
    epsilon: float = EPS

    def validate(self) -> None:
        if self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("loss weights must be nonnegative")
        if not self.alpha1 + self.alpha2 > 0:
            raise ValueError("at least one of alpha1, alpha2 must be positive")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


def _check(t, p):
    t = np.asarray(t, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if t.ndim == 1:
        t, p = t[None], p[None]
    if t.shape != p.shape or t.ndim != 2:
        raise ValueError(f"targets {t.shape} and probabilities {p.shape} must both be (N, C)")
    return t, p


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels).ravel()
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def dice_loss(t, p, epsilon: float = EPS) -> float:
    """Mean over samples of ``1 - 2 sum_j t p / (sum_j t^2 + sum_j p^2 + eps)``."""
    t, p = _check(t, p)
    num = 2.0 * (t * p).sum(axis=1)
    den = (t * t).sum(axis=1) + (p * p).sum(axis=1) + epsilon
    return float(np.mean(1.0 - num / den))


def cross_entropy_loss(t, p, epsilon: float = EPS) -> float:
    t, p = _check(t, p)
    return float(-(t * np.log(p + epsilon)).sum() / t.shape[0])


def dice_loss_grad(t, p, epsilon: float = EPS) -> np.ndarray:
    t, p = _check(t, p)
    a = (t * p).sum(axis=1, keepdims=True)
    den = (t * t).sum(axis=1, keepdims=True) + (p * p).sum(axis=1, keepdims=True) + epsilon
    return (-2.0 * t / den + 4.0 * a * p / den**2) / t.shape[0]


def cross_entropy_grad(t, p, epsilon: float = EPS) -> np.ndarray:
    t, p = _check(t, p)
    return -t / (p + epsilon) / t.shape[0]


def dice_entropy_loss(t, p, cfg: LossConfig = LossConfig(), with_grad: bool = False):
    """``alpha1 * dice + alpha2 * cross_entropy``; with ``with_grad`` also dL/dp."""
    cfg.validate()
    t2, p2 = _check(t, p)
    loss = 0.0
    grad = np.zeros_like(p2) if with_grad else None
    if cfg.alpha1:
        loss += cfg.alpha1 * dice_loss(t2, p2, cfg.epsilon)
        if with_grad:
            grad += cfg.alpha1 * dice_loss_grad(t2, p2, cfg.epsilon)
    if cfg.alpha2:
        loss += cfg.alpha2 * cross_entropy_loss(t2, p2, cfg.epsilon)
        if with_grad:
            grad += cfg.alpha2 * cross_entropy_grad(t2, p2, cfg.epsilon)
    if with_grad:
        return loss, grad.reshape(np.shape(p))
    return loss


def pixels_as_samples(probs: np.ndarray) -> np.ndarray:
    """(B, C, H, W) per-pixel probabilities -> (B*H*W, C) samples."""
    B, C, H, W = probs.shape
    return probs.transpose(0, 2, 3, 1).reshape(-1, C)


def samples_as_pixels(samples: np.ndarray, shape: tuple) -> np.ndarray:
    B, C, H, W = shape
    return samples.reshape(B, H, W, C).transpose(0, 3, 1, 2)
