"""Structure-tensor retina extraction.

Pipeline per scan: gradients -> smoothed outer products -> single most coherent
tensor component -> 8-bit grayscale -> per-column ILM/choroid transitions with
distance gating -> gap interpolation and median smoothing -> retina mask ->
mask * scan.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy import ndimage

from .scan import BoundarySet, Scan


class TracingError(RuntimeError):
    """Too few columns produced an accepted boundary candidate."""


@dataclass(frozen=True)
class PreprocessConfig:
    smoothing_sigma: float = 1.5
    tau_px: int = 20
    binarize_method: str = "otsu"
    fixed_threshold: float = 0.5
    median_window: int = 5
    refine_to_ridge: bool = True

    def validate(self) -> None:
        if not self.smoothing_sigma > 0:
            raise ValueError("smoothing_sigma must be positive")
        if int(self.tau_px) != self.tau_px or self.tau_px < 1:
            raise ValueError("tau_px must be an integer >= 1")
        if self.median_window < 1 or self.median_window % 2 == 0:
            raise ValueError("median_window must be an odd positive integer")
        if self.binarize_method not in ("otsu", "fixed"):
            raise ValueError("binarize_method must be 'otsu' or 'fixed'")


@dataclass(frozen=True)
class GradientField:
    gx: np.ndarray  # along columns (0 degrees)
    gy: np.ndarray  # along rows (90 degrees)


@dataclass(frozen=True)
class StructureTensorField:
    sxx: np.ndarray
    sxy: np.ndarray
    syy: np.ndarray

    def components(self) -> dict:
        return {"sxx": self.sxx, "sxy": self.sxy, "syy": self.syy}


@dataclass(frozen=True)
class Trace:
    """Per-column boundary rows with validity flags."""

    rows: np.ndarray
    valid: np.ndarray

    def __len__(self) -> int:
        return self.rows.shape[0]


def _pixels(img: Union[Scan, np.ndarray]) -> np.ndarray:
    return img.pixels if isinstance(img, Scan) else np.asarray(img, dtype=np.float64)


def gradients(img: Union[Scan, np.ndarray]) -> GradientField:
    """Central differences with replicated borders."""
    f = np.pad(_pixels(img), 1, mode="edge")
    gx = 0.5 * (f[1:-1, 2:] - f[1:-1, :-2])
    gy = 0.5 * (f[2:, 1:-1] - f[:-2, 1:-1])
    return GradientField(gx, gy)


def structure_tensor(scan: Union[Scan, np.ndarray], cfg: PreprocessConfig = PreprocessConfig()) -> StructureTensorField:
    g = gradients(scan)

    def smooth(a):
        return ndimage.gaussian_filter(a, cfg.smoothing_sigma, mode="nearest", truncate=3.0)

    return StructureTensorField(smooth(g.gx * g.gx), smooth(g.gx * g.gy), smooth(g.gy * g.gy))


def select_coherent_component(st: StructureTensorField) -> str:
    """Name of the component with the largest Frobenius norm over the image."""
    norms = {k: float(np.linalg.norm(v)) for k, v in st.components().items()}
    return max(norms, key=norms.get)


def coherent_tensor_image(st: StructureTensorField, id: str = "tensor") -> Scan:
    """The most coherent component, quantized to 8 bits and mapped back to [0, 1]."""
    comp = st.components()[select_coherent_component(st)]
    lo, hi = comp.min(), comp.max()
    if hi - lo <= 0:
        return Scan(np.zeros_like(comp), id=id)
    gray8 = np.round(255.0 * (comp - lo) / (hi - lo))
    return Scan(gray8 / 255.0, id=id)


def otsu_threshold(values: np.ndarray, nbins: int = 256) -> float:
    """Otsu's threshold on an array of intensities in [0, 1]."""
    hist, edges = np.histogram(values.ravel(), bins=nbins, range=(0.0, 1.0))
    hist = hist.astype(np.float64)
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mu0 = np.divide(m0, w0, out=np.zeros_like(m0), where=w0 > 0)
    mu1 = np.divide(m0[-1] - m0, w1, out=np.zeros_like(m0), where=w1 > 0)
    between = w0 * w1 * (mu0 - mu1) ** 2
    # threshold sits on the upper edge of the best split bin
    return float(edges[int(np.argmax(between)) + 1])


def binarize(img: Union[Scan, np.ndarray], cfg: PreprocessConfig) -> np.ndarray:
    px = _pixels(img)
    t = otsu_threshold(px) if cfg.binarize_method == "otsu" else cfg.fixed_threshold
    return px >= t


def column_transitions(fg: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """First row entering foreground and last row leaving it, per column (-1 if none)."""
    H = fg.shape[0]
    has = fg.any(axis=0)
    first = np.where(has, np.argmax(fg, axis=0), -1)
    last = np.where(has, H - 1 - np.argmax(fg[::-1], axis=0), -1)
    return first, last


def trace_boundaries(tensor_img: Union[Scan, np.ndarray], cfg: PreprocessConfig = PreprocessConfig()) -> tuple[Trace, Trace]:
    """Gate per-column ILM/choroid candidates by distance to the last accepted value.

    The first column is taken unconditionally. Later candidates are accepted when
    within ``tau_px`` rows of the most recently accepted one; otherwise the column
    is flagged invalid and the reference stays put.
    """
    cfg.validate()
    fg = binarize(tensor_img, cfg)
    first, last = column_transitions(fg)
    return _gate(first, cfg.tau_px), _gate(last, cfg.tau_px)


def _gate(candidates: np.ndarray, tau: int) -> Trace:
    n = candidates.shape[0]
    rows = np.full(n, np.nan)
    valid = np.zeros(n, dtype=bool)
    ref = None
    for c in range(n):
        p = candidates[c]
        if p < 0:
            continue
        # column 0 seeds unconditionally; a blank column 0 defers to the first nonblank
        if ref is None or abs(p - ref) <= tau:
            ref = p
            rows[c], valid[c] = p, True
    return Trace(rows, valid)


def refine_trace(trace: Trace, tensor_img: Union[Scan, np.ndarray], side: str) -> Trace:
    """Move each accepted transition onto the ridge of its transition band.

    Smoothing widens every edge response into a band a few pixels tall, so the
    outermost foreground row overshoots the edge. The edge sits on the response
    peak: the nearest local maximum inward from the transition, located to
    sub-pixel precision by a parabola through the peak and its neighbours. The
    boundary row is the first retinal row below (``side="top"``) or the last one
    above (``side="bottom"``) that peak.
    """
    v = _pixels(tensor_img)
    H = v.shape[0]
    step = 1 if side == "top" else -1
    rows = np.array(trace.rows, dtype=np.float64)
    for c in np.flatnonzero(trace.valid):
        r = int(rows[c])
        col = v[:, c]
        while 0 <= r + step < H and col[r + step] > col[r]:
            r += step
        offset = 0.0
        if 0 < r < H - 1:
            den = col[r - 1] - 2.0 * col[r] + col[r + 1]
            if den < 0:
                offset = 0.5 * (col[r - 1] - col[r + 1]) / den
        rows[c] = r + offset + 0.5 * step
    return Trace(rows, np.array(trace.valid))


def fill_and_smooth(trace: Trace, median_window: int = 5) -> np.ndarray:
    """Linearly interpolate invalid columns, then median filter."""
    valid = np.asarray(trace.valid, dtype=bool)
    if valid.sum() < 2:
        raise TracingError(f"only {int(valid.sum())} valid columns; need at least 2 to interpolate")
    cols = np.arange(len(trace))
    # np.interp holds the nearest valid value beyond the ends
    filled = np.interp(cols, cols[valid], np.asarray(trace.rows)[valid])
    if median_window > 1:
        filled = ndimage.median_filter(filled, size=median_window, mode="nearest")
    return filled


def retina_mask(ilm: np.ndarray, choroid: np.ndarray, height: int) -> np.ndarray:
    rows = np.arange(height)[:, None]
    top = np.floor(np.asarray(ilm) + 0.5)
    bottom = np.floor(np.asarray(choroid) + 0.5)
    return ((rows >= top) & (rows <= bottom)).astype(np.uint8)


@dataclass(frozen=True)
class RetinaExtraction:
    retina: Scan
    mask: np.ndarray
    ilm: np.ndarray
    choroid: np.ndarray
    ilm_trace: Trace
    choroid_trace: Trace
    tensor_image: Scan
    component: str

    def boundaries(self) -> BoundarySet:
        """Traces as a BoundarySet; inner boundaries are unknown and collapse onto the ILM."""
        valid = self.ilm_trace.valid & self.choroid_trace.valid & (self.ilm <= self.choroid)
        ilm = np.minimum(self.ilm, self.choroid)
        return BoundarySet(ilm, ilm, ilm, self.choroid, valid)


def extract_retina_full(scan: Scan, cfg: PreprocessConfig = PreprocessConfig()) -> RetinaExtraction:
    cfg.validate()
    st = structure_tensor(scan, cfg)
    component = select_coherent_component(st)
    timg = coherent_tensor_image(st, id=f"{scan.id}-tensor")
    ilm_t, cho_t = trace_boundaries(timg, cfg)
    if cfg.refine_to_ridge:
        ilm_t = refine_trace(ilm_t, timg, "top")
        cho_t = refine_trace(cho_t, timg, "bottom")
    ilm = fill_and_smooth(ilm_t, cfg.median_window)
    cho = fill_and_smooth(cho_t, cfg.median_window)
    mask = retina_mask(ilm, cho, scan.height_px)
    retina = scan.with_pixels(scan.pixels * mask)
    return RetinaExtraction(retina, mask, ilm, cho, ilm_t, cho_t, timg, component)


def extract_retina(scan: Scan, cfg: PreprocessConfig = PreprocessConfig()) -> tuple[Scan, np.ndarray]:
    """Isolate the retina and ONH: returns (masked scan, binary retina mask)."""
    r = extract_retina_full(scan, cfg)
    return r.retina, r.mask
