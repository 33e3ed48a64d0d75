"""Layer boundaries, per-column thickness profiles and mean thickness features."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .scan import GCIPL, RNFL, BoundarySet, LayerMask


class ProfileError(ValueError):
    pass


@dataclass(frozen=True)
class ThicknessProfile:
    rnfl_um: np.ndarray
    gcip_um: np.ndarray
    gcc_um: np.ndarray
    valid: np.ndarray
    axial_scale_um_per_px: float

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.valid))


@dataclass(frozen=True)
class GradeFeatures:
    mean_rnfl_um: float
    mean_gcip_um: float
    mean_gcc_um: float
    std_rnfl_um: float = 0.0
    std_gcip_um: float = 0.0
    std_gcc_um: float = 0.0
    axial_scale_um_per_px: float = float("nan")

    def vector(self) -> np.ndarray:
        """The three means fed to the grader."""
        return np.array([self.mean_rnfl_um, self.mean_gcip_um, self.mean_gcc_um])

    def to_json_dict(self) -> dict:
        return {
            "mean_rnfl": self.mean_rnfl_um, "mean_gcip": self.mean_gcip_um, "mean_gcc": self.mean_gcc_um,
            "std_rnfl": self.std_rnfl_um, "std_gcip": self.std_gcip_um, "std_gcc": self.std_gcc_um,
            "axial_scale": self.axial_scale_um_per_px,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "GradeFeatures":
        return cls(d["mean_rnfl"], d["mean_gcip"], d["mean_gcc"], d.get("std_rnfl", 0.0),
                   d.get("std_gcip", 0.0), d.get("std_gcc", 0.0), d.get("axial_scale", float("nan")))


def boundaries_from_mask(mask: LayerMask, choroid: Optional[np.ndarray] = None) -> BoundarySet:
    """ILM = first RNFL row, GCL = last RNFL row + 1, IPL = last GC-IPL row + 1.

    Columns missing either region are invalid. A mask carries no choroid; pass
    the preprocessing trace to fill it, otherwise it collapses onto the IPL.
    """
    lab = mask.labels
    H, W = lab.shape
    rows = np.arange(H)[:, None]
    is_r, is_g = lab == RNFL, lab == GCIPL
    has_r, has_g = is_r.any(axis=0), is_g.any(axis=0)
    valid = has_r & has_g
    ilm = np.where(has_r, np.where(is_r, rows, H).min(axis=0), 0).astype(np.float64)
    gcl = np.where(has_r, np.where(is_r, rows, -1).max(axis=0) + 1, 0).astype(np.float64)
    ipl = np.where(has_g, np.where(is_g, rows, -1).max(axis=0) + 1, 0).astype(np.float64)
    # invalid columns carry no geometry; keep them ordered for the container
    ilm = np.where(valid, ilm, 0.0)
    gcl = np.where(valid, gcl, 0.0)
    ipl = np.where(valid, ipl, 0.0)
    cho = ipl.copy() if choroid is None else np.maximum(np.asarray(choroid, dtype=np.float64), ipl)
    return BoundarySet(ilm, gcl, ipl, cho, valid)


def thickness_from_boundaries(b: BoundarySet, axial_scale_um_per_px: float) -> ThicknessProfile:
    if not axial_scale_um_per_px > 0:
        raise ValueError("axial scale must be positive")
    s = float(axial_scale_um_per_px)
    v = b.valid
    rnfl = np.where(v, np.abs(b.ilm - b.gcl) * s, 0.0)
    gcip = np.where(v, np.abs(b.gcl - b.ipl) * s, 0.0)
    gcc = np.where(v, np.abs(b.ilm - b.ipl) * s, 0.0)
    return ThicknessProfile(rnfl, gcip, gcc, np.array(v), s)


def thickness(mask: LayerMask, axial_scale_um_per_px: float) -> ThicknessProfile:
    return thickness_from_boundaries(boundaries_from_mask(mask), axial_scale_um_per_px)


def grade_features(profile: ThicknessProfile) -> GradeFeatures:
    """Means and population standard deviations over valid columns."""
    v = profile.valid
    if not v.any():
        raise ProfileError("no valid columns: both RNFL and GC-IPL are missing everywhere")
    r, g, c = profile.rnfl_um[v], profile.gcip_um[v], profile.gcc_um[v]
    return GradeFeatures(float(r.mean()), float(g.mean()), float(c.mean()),
                         float(r.std()), float(g.std()), float(c.std()),
                         profile.axial_scale_um_per_px)


PROFILE_HEADER = ["col", "rnfl_um", "gcip_um", "gcc_um", "valid"]


def write_profile(profile: ThicknessProfile, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PROFILE_HEADER)
        for c in range(profile.valid.shape[0]):
            w.writerow([c, repr(float(profile.rnfl_um[c])), repr(float(profile.gcip_um[c])),
                        repr(float(profile.gcc_um[c])), int(profile.valid[c])])


def read_profile(path, axial_scale_um_per_px: float = float("nan")) -> ThicknessProfile:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != PROFILE_HEADER:
            raise ValueError(f"{path}: expected header {','.join(PROFILE_HEADER)}")
        rows = [r for r in reader if r]
    a = np.array([[float(x) for x in r[1:4]] for r in rows]).reshape(-1, 3)
    valid = np.array([r[4].strip() == "1" for r in rows], dtype=bool)
    return ThicknessProfile(a[:, 0], a[:, 1], a[:, 2], valid, axial_scale_um_per_px)


def write_features(f: GradeFeatures, path) -> None:
    with open(path, "w") as fh:
        json.dump(f.to_json_dict(), fh, indent=2)
        fh.write("\n")


def read_features(path) -> GradeFeatures:
    with open(path) as fh:
        return GradeFeatures.from_json_dict(json.load(fh))
