"""Scans, layer masks, boundary curves and grades, plus their file encodings.

Orientation: rows run axially (depth), columns laterally, so every column is an
A-scan. A 951x456 AFIO frame is therefore width 951, height 456.
"""
from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

#: Assumed axial pixel scale for synthetic scans. Reports label it as such.
DEFAULT_AXIAL_SCALE_UM = 2.6

BACKGROUND, RNFL, GCIPL = 0, 1, 2
LABEL_NAMES = {BACKGROUND: "background", RNFL: "rnfl", GCIPL: "gcip"}

#: Mean +- std thickness (um) of the early and advanced glaucoma cohorts.
COHORT_THICKNESS_UM = {
    "early": {"rnfl": (93.50, 9.84), "gcip": (62.23, 5.67), "gcc": (155.73, 13.10)},
    "advanced": {"rnfl": (69.46, 5.17), "gcip": (33.96, 7.53), "gcc": (103.42, 10.27)},
    # not measured in the source study; synthetic assumption for screening
    "healthy": {"rnfl": (115.0, 5.0), "gcip": (85.0, 4.0), "gcc": (200.0, 6.4)},
}

EARLY_ADVANCED_RNFL_CUT_UM = 0.5 * (93.50 + 69.46)
HEALTHY_EARLY_RNFL_CUT_UM = 0.5 * (93.50 + 115.0)

_SCAN_SUFFIXES = {".png", ".pgm"}


class FormatError(ValueError):
    """Raised when a file cannot be decoded into the expected structure."""


class GradeLabel(enum.Enum):
    HEALTHY = "Healthy"
    EARLY = "EarlyGlaucoma"
    ADVANCED = "AdvancedGlaucoma"

    @property
    def ordinal(self) -> int:
        """Ordinal coding used for correlation against clinician grades."""
        return _ORDINAL[self]

    @property
    def is_glaucoma(self) -> bool:
        return self is not GradeLabel.HEALTHY

    @classmethod
    def parse(cls, value) -> "GradeLabel":
        if isinstance(value, GradeLabel):
            return value
        if isinstance(value, (int, np.integer)):
            return _FROM_ORDINAL[int(value)]
        key = str(value).strip().lower().replace("_", "").replace(" ", "")
        try:
            return _ALIASES[key]
        except KeyError:
            raise ValueError(f"unknown grade {value!r}") from None


_ORDINAL = {GradeLabel.HEALTHY: 0, GradeLabel.EARLY: 1, GradeLabel.ADVANCED: 2}
_FROM_ORDINAL = {v: k for k, v in _ORDINAL.items()}
_ALIASES = {
    "healthy": GradeLabel.HEALTHY, "h": GradeLabel.HEALTHY, "normal": GradeLabel.HEALTHY,
    "earlyglaucoma": GradeLabel.EARLY, "early": GradeLabel.EARLY, "eg": GradeLabel.EARLY,
    "advancedglaucoma": GradeLabel.ADVANCED, "advanced": GradeLabel.ADVANCED,
    "ag": GradeLabel.ADVANCED,
}


def grade_from_rnfl(rnfl_um: float) -> GradeLabel:
    """Nearest-cohort grade for a mean RNFL thickness in micrometers."""
    if rnfl_um < EARLY_ADVANCED_RNFL_CUT_UM:
        return GradeLabel.ADVANCED
    if rnfl_um < HEALTHY_EARLY_RNFL_CUT_UM:
        return GradeLabel.EARLY
    return GradeLabel.HEALTHY


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Scan:
    """A 2-D grayscale B-scan with intensities in [0, 1]."""

    pixels: np.ndarray
    axial_scale_um_per_px: float = DEFAULT_AXIAL_SCALE_UM
    id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2 or px.size == 0:
            raise ValueError(f"scan must be a nonempty 2-D array, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError("scan intensities must lie in [0, 1]")
        if not self.axial_scale_um_per_px > 0:
            raise ValueError("axial_scale_um_per_px must be positive")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def height_px(self) -> int:
        return self.pixels.shape[0]

    @property
    def width_px(self) -> int:
        return self.pixels.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray) -> "Scan":
        return Scan(pixels, self.axial_scale_um_per_px, self.id)


@dataclass(frozen=True)
class LayerMask:
    """Per-pixel labels: 0 background, 1 RNFL, 2 GC-IPL.

    Within every column all RNFL pixels lie strictly above all GC-IPL pixels.
    The ganglion cell complex (GCC) is never stored; it is ``labels > 0``.
    """

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or lab.size == 0:
            raise ValueError(f"mask must be a nonempty 2-D array, got shape {lab.shape}")
        if not np.all(np.isin(lab, (BACKGROUND, RNFL, GCIPL))):
            bad = sorted(set(np.unique(lab).tolist()) - {0, 1, 2})
            raise ValueError(f"mask labels must be in {{0,1,2}}, found {bad}")
        lab = lab.astype(np.uint8)
        if not _ordering_ok(lab):
            raise ValueError("RNFL pixels must lie above GC-IPL pixels in every column")
        object.__setattr__(self, "labels", _frozen(lab))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def rnfl(self) -> np.ndarray:
        return self.labels == RNFL

    @property
    def gcip(self) -> np.ndarray:
        return self.labels == GCIPL

    @property
    def gcc(self) -> np.ndarray:
        return self.labels != BACKGROUND


def _ordering_ok(labels: np.ndarray) -> bool:
    rows = np.arange(labels.shape[0])[:, None]
    last_rnfl = np.where(labels == RNFL, rows, -1).max(axis=0)
    first_gcip = np.where(labels == GCIPL, rows, labels.shape[0]).min(axis=0)
    return bool(np.all(last_rnfl < first_gcip))


@dataclass(frozen=True)
class BoundarySet:
    """Per-column boundary rows.

    ``ilm`` is the first RNFL row, ``gcl`` the first GC-IPL row, ``ipl`` the first
    row below GC-IPL and ``choroid`` the last retinal row (inclusive).
    """

    ilm: np.ndarray
    gcl: np.ndarray
    ipl: np.ndarray
    choroid: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        arrays = [np.asarray(getattr(self, k), dtype=np.float64) for k in ("ilm", "gcl", "ipl", "choroid")]
        valid = np.asarray(self.valid, dtype=bool)
        n = valid.shape[0]
        if any(a.shape != (n,) for a in arrays):
            raise ValueError("boundary curves and validity flags must share one length")
        ilm, gcl, ipl, cho = arrays
        v = valid
        if np.any(ilm[v] > gcl[v]) or np.any(gcl[v] > ipl[v]) or np.any(ipl[v] > cho[v]):
            raise ValueError("boundaries must satisfy ilm <= gcl <= ipl <= choroid on valid columns")
        for k, a in zip(("ilm", "gcl", "ipl", "choroid"), arrays):
            object.__setattr__(self, k, _frozen(a))
        object.__setattr__(self, "valid", _frozen(valid))

    @property
    def width_px(self) -> int:
        return self.valid.shape[0]


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of a synthetic layered B-scan.

    The ILM follows ``offset + amplitude * sin(2*pi*col/period)``. The cup, when
    given, tapers RNFL and GC-IPL thickness linearly to zero at its center.
    """

    rnfl_thickness_px: float = 36.0
    gcip_thickness_px: float = 24.0
    ilm_amplitude_px: float = 0.0
    ilm_period_px: float = 200.0
    ilm_offset_px: float = 30.0
    height_px: int = 128
    width_px: int = 256
    cup_center: Optional[int] = None
    cup_width: Optional[int] = None
    noise_std: float = 0.0
    seed: int = 0
    axial_scale_um_per_px: float = DEFAULT_AXIAL_SCALE_UM
    grade: Optional[GradeLabel] = None
    inl_thickness_px: float = 8.0
    outer_thickness_px: float = 14.0
    rpe_thickness_px: float = 6.0
    id: str = "synthetic"

    def validate(self) -> None:
        if not (self.rnfl_thickness_px > 0 and self.gcip_thickness_px > 0):
            raise ValueError("layer thicknesses must be positive")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")
        if self.height_px < 2 or self.width_px < 2:
            raise ValueError("synthetic scans need at least 2x2 pixels")
        if self.ilm_period_px <= 0:
            raise ValueError("ilm_period_px must be positive")
        if (self.cup_center is None) != (self.cup_width is None):
            raise ValueError("cup_center and cup_width must be given together")


# Band intensities, top to bottom.
_INTENSITY = {
    "vitreous": 0.05, "rnfl": 0.85, "gcip": 0.45, "inl": 0.20,
    "outer": 0.40, "rpe": 0.95, "choroid": 0.15,
}


def ilm_waveform(cfg: SynthConfig) -> np.ndarray:
    """Analytic (unrounded) ILM row per column."""
    cols = np.arange(cfg.width_px)
    return cfg.ilm_offset_px + cfg.ilm_amplitude_px * np.sin(2 * np.pi * cols / cfg.ilm_period_px)


def generate_synthetic(cfg: SynthConfig) -> tuple[Scan, LayerMask, BoundarySet, GradeLabel]:
    """Render a layered B-scan with its ground-truth mask, boundaries and grade."""
    cfg.validate()
    H, W = cfg.height_px, cfg.width_px
    taper = np.ones(W)
    if cfg.cup_center is not None:
        half = max(cfg.cup_width / 2.0, 1e-9)
        taper = np.clip(np.abs(np.arange(W) - cfg.cup_center) / half, 0.0, 1.0)

    ilm_f = ilm_waveform(cfg)
    ilm = np.floor(ilm_f + 0.5)
    gcl = np.floor(ilm_f + cfg.rnfl_thickness_px * taper + 0.5)
    ipl = np.floor(ilm_f + (cfg.rnfl_thickness_px + cfg.gcip_thickness_px) * taper + 0.5)
    inl_end = ipl + round(cfg.inl_thickness_px)
    outer_end = inl_end + round(cfg.outer_thickness_px)
    choroid = outer_end + round(cfg.rpe_thickness_px) - 1

    if ilm.min() < 0 or choroid.max() > H - 1:
        raise ValueError(
            f"layers span rows {ilm.min():.0f}..{choroid.max():.0f} but the image has "
            f"{H} rows; reduce thickness/offset/amplitude or enlarge height_px"
        )

    rows = np.arange(H)[:, None]
    labels = np.zeros((H, W), dtype=np.uint8)
    labels[(rows >= ilm) & (rows < gcl)] = RNFL
    labels[(rows >= gcl) & (rows < ipl)] = GCIPL

    img = np.full((H, W), _INTENSITY["vitreous"])
    bands = [
        (ilm, gcl, "rnfl"), (gcl, ipl, "gcip"), (ipl, inl_end, "inl"),
        (inl_end, outer_end, "outer"), (outer_end, choroid + 1, "rpe"),
    ]
    for top, bottom, name in bands:
        img[(rows >= top) & (rows < bottom)] = _INTENSITY[name]
    img[rows > choroid] = _INTENSITY["choroid"]

    if cfg.noise_std > 0:
        rng = np.random.default_rng(cfg.seed)
        img = img + rng.normal(0.0, cfg.noise_std, size=img.shape)
    img = np.clip(img, 0.0, 1.0)

    valid = (gcl > ilm) & (ipl > gcl)
    boundaries = BoundarySet(ilm, gcl, ipl, choroid, valid)
    grade = cfg.grade
    if grade is None:
        grade = grade_from_rnfl(cfg.rnfl_thickness_px * cfg.axial_scale_um_per_px)
    scan = Scan(img, cfg.axial_scale_um_per_px, cfg.id)
    return scan, LayerMask(labels), boundaries, grade


# ---------------------------------------------------------------- file I/O

def _check_suffix(path: Path) -> None:
    if path.suffix.lower() not in _SCAN_SUFFIXES:
        raise FormatError(f"unsupported image format {path.suffix!r}; use .png or .pgm")


def _read_gray8(path) -> np.ndarray:
    path = Path(path)
    _check_suffix(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "1"):
                raise FormatError(f"{path}: expected 8-bit grayscale, got mode {im.mode}")
            if im.mode == "P":
                # palette images keep raw indices, which is how label files are written
                return np.asarray(im, dtype=np.uint8).copy()
            return np.asarray(im.convert("L"), dtype=np.uint8).copy()
    except (OSError, SyntaxError) as exc:
        raise FormatError(f"{path}: cannot decode image ({exc})") from exc


def _write_gray8(arr: np.ndarray, path) -> None:
    path = Path(path)
    _check_suffix(path)
    Image.fromarray(np.ascontiguousarray(arr, dtype=np.uint8), mode="L").save(path)


def read_scan(path, axial_scale_um_per_px: Optional[float] = None, id: Optional[str] = None) -> Scan:
    """Load an 8-bit grayscale scan; a sidecar ``<name>.json`` supplies metadata."""
    path = Path(path)
    raw = _read_gray8(path)
    meta = read_metadata(path) if sidecar_path(path).exists() else {}
    scale = axial_scale_um_per_px or meta.get("axial_scale_um_per_px", DEFAULT_AXIAL_SCALE_UM)
    return Scan(raw / 255.0, float(scale), id or meta.get("id", path.stem))


def write_scan(scan: Scan, path, grade: Optional[GradeLabel] = None) -> None:
    _write_gray8(np.round(scan.pixels * 255.0), path)
    write_metadata(path, scan.axial_scale_um_per_px, scan.id, grade)


def read_mask(path, scan: Optional[Scan] = None) -> LayerMask:
    """Load a label image; optionally check it against the scan it annotates."""
    raw = _read_gray8(path)
    bad = set(np.unique(raw).tolist()) - {0, 1, 2}
    if bad:
        raise FormatError(f"{path}: label values outside {{0,1,2}}: {sorted(bad)}")
    if scan is not None and raw.shape != scan.shape:
        raise FormatError(f"{path}: mask shape {raw.shape} does not match scan shape {scan.shape}")
    return LayerMask(raw)


def write_mask(mask: LayerMask, path) -> None:
    _write_gray8(mask.labels, path)


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


def write_metadata(path, axial_scale_um_per_px: float, id: str, grade: Optional[GradeLabel] = None) -> None:
    meta = {"axial_scale_um_per_px": axial_scale_um_per_px, "id": id}
    if grade is not None:
        meta["grade"] = GradeLabel.parse(grade).value
    sidecar_path(path).write_text(json.dumps(meta, indent=2) + "\n")


def read_metadata(path) -> dict:
    meta = json.loads(sidecar_path(path).read_text())
    if "axial_scale_um_per_px" in meta and not float(meta["axial_scale_um_per_px"]) > 0:
        raise FormatError(f"{sidecar_path(path)}: axial_scale_um_per_px must be positive")
    if meta.get("grade") is not None:
        meta["grade"] = GradeLabel.parse(meta["grade"])
    return meta


BOUNDARY_HEADER = ["col", "ilm", "gcl", "ipl", "choroid", "valid"]


def write_boundaries(b: BoundarySet, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BOUNDARY_HEADER)
        for c in range(b.width_px):
            w.writerow([c, repr(float(b.ilm[c])), repr(float(b.gcl[c])), repr(float(b.ipl[c])),
                        repr(float(b.choroid[c])), int(b.valid[c])])


def read_boundaries(path) -> BoundarySet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != BOUNDARY_HEADER:
            raise FormatError(f"{path}: expected header {','.join(BOUNDARY_HEADER)}")
        rows = [r for r in reader if r]
    data = np.array([[float(x) for x in r[1:5]] for r in rows]).reshape(-1, 4)
    valid = np.array([r[5].strip() in ("1", "true", "True") for r in rows], dtype=bool)
    return BoundarySet(data[:, 0], data[:, 1], data[:, 2], data[:, 3], valid)
