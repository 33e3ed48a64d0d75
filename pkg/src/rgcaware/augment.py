"""Training-set augmentation: horizontal flip, small rotation, additive noise."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .scan import GCIPL, RNFL, LayerMask, Scan


@dataclass(frozen=True)
class AugmentConfig:
    horizontal_flip: bool = True
    rotation_deg: float = 5.0          # angles drawn from [-rotation_deg, +rotation_deg]
    noise_variance: float = 0.01
    copies_per_scan: int = 44
    seed: int = 0

    def validate(self) -> None:
        if self.noise_variance < 0:
            raise ValueError("noise_variance must be nonnegative")
        if self.rotation_deg < 0:
            raise ValueError("rotation_deg is a symmetric half-range and must be nonnegative")
        if self.copies_per_scan < 1:
            raise ValueError("copies_per_scan must be >= 1")


def enforce_layer_order(labels: np.ndarray) -> np.ndarray:
    """Relabel RNFL pixels lying below a column's first GC-IPL pixel as GC-IPL.

    Nearest-neighbour rotation can interleave the two labels by one pixel where a
    tilted boundary crosses a column; this restores the mask ordering.
    """
    labels = np.array(labels, copy=True)
    H = labels.shape[0]
    rows = np.arange(H)[:, None]
    first_gcip = np.where(labels == GCIPL, rows, H).min(axis=0)
    labels[(labels == RNFL) & (rows > first_gcip)] = GCIPL
    return labels


def flip(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, ::-1]


def augment_one(pixels, labels, *, flip_it: bool, angle: float, noise_std: float,
                rng: np.random.Generator):
    img = np.asarray(pixels, dtype=np.float64)
    lab = np.asarray(labels)
    if flip_it:
        img, lab = flip(img), flip(lab)
    if angle != 0.0:
        img = ndimage.rotate(img, angle, reshape=False, order=1, mode="constant", cval=0.0)
        lab = enforce_layer_order(ndimage.rotate(lab, angle, reshape=False, order=0, mode="constant", cval=0))
    if noise_std > 0:
        img = img + rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0), np.ascontiguousarray(lab, dtype=np.uint8)


def copy_params(cfg: AugmentConfig, index: int, rng: np.random.Generator) -> tuple[bool, float]:
    """Flip flag and rotation angle of the ``index``-th copy; odd copies are mirrored."""
    flip_it = cfg.horizontal_flip and index % 2 == 1
    angle = float(rng.uniform(-cfg.rotation_deg, cfg.rotation_deg)) if cfg.rotation_deg > 0 else 0.0
    return flip_it, angle


def augment_copy(pixels, labels, cfg: AugmentConfig, scan_index: int, copy_index: int):
    """The ``copy_index``-th augmented copy of scan ``scan_index``; a pure function of its arguments."""
    rng = np.random.default_rng([cfg.seed, scan_index, copy_index])
    flip_it, angle = copy_params(cfg, copy_index, rng)
    return augment_one(pixels, labels, flip_it=flip_it, angle=angle,
                       noise_std=float(np.sqrt(cfg.noise_variance)), rng=rng)


def augment(scan: Scan, mask: LayerMask, cfg: AugmentConfig = AugmentConfig(),
            scan_index: int = 0) -> list[tuple[Scan, LayerMask]]:
    """``cfg.copies_per_scan`` augmented (scan, mask) pairs."""
    cfg.validate()
    if scan.shape != mask.shape:
        raise ValueError(f"scan {scan.shape} and mask {mask.shape} differ in shape")
    out = []
    for k in range(cfg.copies_per_scan):
        img, lab = augment_copy(scan.pixels, mask.labels, cfg, scan_index, k)
        out.append((scan.with_pixels(img), LayerMask(lab)))
    return out


def augmented_count(n_scans: int, cfg: Optional[AugmentConfig] = None) -> int:
    cfg = cfg or AugmentConfig()
    return n_scans * cfg.copies_per_scan
