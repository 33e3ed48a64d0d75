"""Dataset manifests, run configuration and the staged end-to-end pipeline.

A run directory holds one subdirectory or file per stage::

    preprocess/<id>.png, preprocess/<id>_boundaries.csv
    model.rgcn, history.csv
    masks/<id>.png
    profiles/<id>.csv, features/<id>.json
    svm.json, predictions.json
    report.json

Every stage reads only the manifest, the config and earlier artifacts, so any
stage can be rerun on its own.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .augment import AugmentConfig, enforce_layer_order
from .engine.network import load_network, save_network, spec_by_name, Network
from .grading import SvmModel, ThresholdGrader, svm_predict, svm_train, threshold_grade
from .losses import LossConfig
from .metrics import (ConfusionCounts, UndefinedCorrelation, accuracy, metric_report, pearson, roc,
                      segmentation_score)
from .preprocess import PreprocessConfig, extract_retina_full
from .profiles import grade_features, read_features, thickness, write_features, write_profile
from .scan import (COHORT_THICKNESS_UM, LABEL_NAMES, GradeLabel, LayerMask, Scan, SynthConfig,
                   generate_synthetic, read_mask, read_scan, write_boundaries, write_mask, write_scan)
from .train import Sample, TrainConfig, fit, predict, split_indices, write_history

log = logging.getLogger(__name__)

MAX_CLINICIANS = 4


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# ------------------------------------------------------------------ manifest

@dataclass(frozen=True)
class ManifestRecord:
    scan_path: Path
    mask_path: Optional[Path] = None
    grade: Optional[GradeLabel] = None
    clinician_grades: tuple = ()
    split: Optional[str] = None

    @property
    def id(self) -> str:
        return self.scan_path.stem


@dataclass(frozen=True)
class Manifest:
    records: tuple
    train_fraction: float = 0.7

    def __post_init__(self):
        if not self.records:
            raise ValueError("manifest has no records")
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValueError("manifest scan file names must be unique")
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError("train fraction must lie strictly between 0 and 1")

    def split(self, seed: int, stratified: bool = False) -> tuple[np.ndarray, np.ndarray]:
        """Explicit per-record assignments when every record has one, else a seeded 70/30 draw."""
        if all(r.split is not None for r in self.records):
            tr = np.array([i for i, r in enumerate(self.records) if r.split == "train"], dtype=int)
            te = np.array([i for i, r in enumerate(self.records) if r.split == "test"], dtype=int)
            if tr.size == 0 or te.size == 0:
                raise ValueError("explicit split leaves the train or test partition empty")
            return tr, te
        strata = None
        if stratified:
            strata = [r.grade.value if r.grade is not None else "?" for r in self.records]
        return split_indices(len(self.records), self.train_fraction, seed, strata)


def _record_from_dict(d: dict, base: Path) -> ManifestRecord:
    unknown = set(d) - {"scan_path", "mask_path", "grade", "clinician_grades", "split"}
    if unknown:
        raise ValueError(f"unknown manifest record fields: {sorted(unknown)}")
    if "scan_path" not in d:
        raise ValueError("manifest record without scan_path")

    def resolve(p):
        q = Path(p)
        q = q if q.is_absolute() else base / q
        if not q.exists():
            raise FileNotFoundError(f"manifest path does not exist: {q}")
        return q

    clin = tuple(None if g is None else GradeLabel.parse(g) for g in d.get("clinician_grades", []))
    if len(clin) > MAX_CLINICIANS:
        raise ValueError(f"at most {MAX_CLINICIANS} clinician grades per record")
    split = d.get("split")
    if split not in (None, "train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    return ManifestRecord(
        resolve(d["scan_path"]),
        resolve(d["mask_path"]) if d.get("mask_path") else None,
        GradeLabel.parse(d["grade"]) if d.get("grade") is not None else None,
        clin, split)


def load_manifest(path) -> Manifest:
    path = Path(path)
    doc = json.loads(path.read_text())
    split = doc.get("split", {"train": 0.7, "test": 0.3})
    if abs(split.get("train", 0) + split.get("test", 0) - 1.0) > 1e-9:
        raise ValueError("manifest split fractions must sum to 1")
    recs = tuple(_record_from_dict(r, path.parent) for r in doc.get("records", []))
    return Manifest(recs, float(split["train"]))


def save_manifest(m: Manifest, path) -> None:
    path = Path(path)
    base = path.parent.resolve()

    def rel(p):
        p = Path(p).resolve()
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    recs = []
    for r in m.records:
        d = {"scan_path": rel(r.scan_path)}
        if r.mask_path is not None:
            d["mask_path"] = rel(r.mask_path)
        if r.grade is not None:
            d["grade"] = r.grade.value
        if r.clinician_grades:
            d["clinician_grades"] = [None if g is None else g.value for g in r.clinician_grades]
        if r.split is not None:
            d["split"] = r.split
        recs.append(d)
    doc = {"split": {"train": m.train_fraction, "test": round(1.0 - m.train_fraction, 12)}, "records": recs}
    path.write_text(json.dumps(doc, indent=2) + "\n")


# ------------------------------------------------------------- synthetic data

def synth_cohort(n: int, seed: int = 0, axial_scale_um_per_px: float = 3.0, noise_std: float = 0.03,
                 height_px: int = 128, width_px: int = 256,
                 cohorts: Sequence[str] = ("healthy", "early", "advanced")) -> list:
    """``n`` scans cycling through ``cohorts``; thicknesses drawn from the cohort statistics.

    Returns a list of ``(Scan, LayerMask, GradeLabel)``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    grade_of = {"healthy": GradeLabel.HEALTHY, "early": GradeLabel.EARLY, "advanced": GradeLabel.ADVANCED}
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        coh = cohorts[i % len(cohorts)]
        stats = COHORT_THICKNESS_UM[coh]
        rnfl = max(rng.normal(*stats["rnfl"]), 20.0)
        gcip = max(rng.normal(*stats["gcip"]), 10.0)
        cfg = SynthConfig(
            rnfl_thickness_px=rnfl / axial_scale_um_per_px, gcip_thickness_px=gcip / axial_scale_um_per_px,
            ilm_amplitude_px=rng.uniform(0, 6), ilm_period_px=rng.uniform(150, 400),
            ilm_offset_px=rng.uniform(14, 22), height_px=height_px, width_px=width_px,
            noise_std=noise_std, seed=int(rng.integers(2**31)), axial_scale_um_per_px=axial_scale_um_per_px,
            grade=grade_of[coh], id=f"scan{i:03d}")
        scan, mask, _, grade = generate_synthetic(cfg)
        out.append((scan, mask, grade))
    return out


def simulate_clinicians(grades: Sequence[GradeLabel], n_clinicians: int = 4, disagreement: float = 0.1,
                        seed: int = 0) -> list:
    """Per record, a tuple of clinician grades that move one level off the truth with some probability."""
    rng = np.random.default_rng([seed, 7])
    out = []
    for g in grades:
        row = []
        for _ in range(n_clinicians):
            o = g.ordinal
            if rng.random() < disagreement:
                o = o + 1 if o == 0 else (o - 1 if o == 2 else o + rng.choice([-1, 1]))
            row.append(GradeLabel.parse(int(o)))
        out.append(tuple(row))
    return out


def write_synthetic_dataset(out_dir, n: int, seed: int = 0, axial_scale_um_per_px: float = 3.0,
                            noise_std: float = 0.03, n_clinicians: int = 4) -> Path:
    """Write scans, masks and a manifest; returns the manifest path."""
    out = Path(out_dir)
    (out / "scans").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(exist_ok=True)
    cohort = synth_cohort(n, seed, axial_scale_um_per_px, noise_std)
    clin = simulate_clinicians([g for _, _, g in cohort], n_clinicians, seed=seed) if n_clinicians else [()] * n
    recs = []
    for (scan, mask, grade), cg in zip(cohort, clin):
        sp, mp = out / "scans" / f"{scan.id}.png", out / "masks" / f"{scan.id}.png"
        write_scan(scan, sp, grade)
        write_mask(mask, mp)
        recs.append(ManifestRecord(sp, mp, grade, cg))
    mpath = out / "manifest.json"
    save_manifest(Manifest(tuple(recs)), mpath)
    return mpath


# -------------------------------------------------------------------- config

@dataclass(frozen=True)
class TrainSection:
    epochs: int = 10
    iters_per_epoch: int = 20
    batch_size: int = 4
    stratified: bool = False
    seg_weight: float = 1.0
    cls_weight: float = 1.0
    rho: float = 0.95
    adadelta_eps: float = 1e-6
    lr: float = 1.0


@dataclass(frozen=True)
class GradingSection:
    method: str = "svm"
    svm_lambda: float = 1e-2
    svm_epochs: int = 500
    rnfl_threshold_um: float = ThresholdGrader().rnfl_threshold_um


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    axial_scale_um_per_px: Optional[float] = None  # overrides scan metadata when set
    network: str = "ragnet-v2-toy"
    screen_threshold: float = 0.5
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(copies_per_scan=8))
    train: TrainSection = field(default_factory=TrainSection)
    grading: GradingSection = field(default_factory=GradingSection)

    def validate(self) -> None:
        self.preprocess.validate()
        self.loss.validate()
        self.augment.validate()
        self.training_config(0.7).validate()
        if self.axial_scale_um_per_px is not None and not self.axial_scale_um_per_px > 0:
            raise ValueError("axial_scale_um_per_px must be positive")
        if not 0.0 < self.screen_threshold < 1.0:
            raise ValueError("screen_threshold must lie strictly between 0 and 1")
        if self.grading.method not in ("svm", "threshold"):
            raise ValueError("grading.method must be 'svm' or 'threshold'")
        if not self.grading.svm_lambda > 0 or self.grading.svm_epochs < 1:
            raise ValueError("svm_lambda must be positive and svm_epochs >= 1")
        ThresholdGrader(self.grading.rnfl_threshold_um)
        spec_by_name(self.network)

    def training_config(self, split: float) -> TrainConfig:
        t = self.train
        return TrainConfig(
            epochs=t.epochs, iters_per_epoch=t.iters_per_epoch, batch_size=t.batch_size, split=split,
            stratified=t.stratified, seed=self.seed, loss=self.loss, seg_weight=t.seg_weight,
            cls_weight=t.cls_weight, augment=dataclasses.replace(self.augment, seed=self.seed),
            rho=t.rho, adadelta_eps=t.adadelta_eps, lr=t.lr)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _dataclass_from_dict(cls, d, "")

    def with_overrides(self, assignments: Sequence[str]) -> "RunConfig":
        """Apply ``section.key=value`` strings; values parse as JSON, else as plain strings."""
        d = self.to_dict()
        for a in assignments:
            if "=" not in a:
                raise ValueError(f"override {a!r} is not of the form key=value")
            key, raw = a.split("=", 1)
            try:
                val = json.loads(raw)
            except json.JSONDecodeError:
                val = raw
            node, parts = d, key.strip().split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ValueError(f"unknown config section in {key!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ValueError(f"unknown config field {key!r}")
            node[parts[-1]] = val
        return RunConfig.from_dict(d)


def _dataclass_from_dict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ValueError(f"config section {where or '<root>'} must be an object")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(known)
    if unknown:
        raise ValueError(f"unknown config fields in {where or '<root>'}: {sorted(unknown)}")
    kw = {}
    defaults = cls()
    for name, value in d.items():
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            kw[name] = _dataclass_from_dict(type(current), value, f"{where}{name}.")
        else:
            kw[name] = value
    return cls(**kw)


def load_config(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    cfg = RunConfig() if path is None else RunConfig.from_dict(json.loads(Path(path).read_text()))
    cfg = cfg.with_overrides(overrides)
    cfg.validate()
    return cfg


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


# -------------------------------------------------------------------- stages

def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_scan(rec: ManifestRecord, cfg: RunConfig) -> Scan:
    return read_scan(rec.scan_path, cfg.axial_scale_um_per_px)


def stage_preprocess(manifest: Manifest, cfg: RunConfig, run_dir: Path) -> None:
    d = run_dir / "preprocess"
    d.mkdir(parents=True, exist_ok=True)
    for rec in manifest.records:
        try:
            ex = extract_retina_full(_load_scan(rec, cfg), cfg.preprocess)
        except Exception as e:  # noqa: BLE001 - re-tagged with the stage and record
            raise StageError("preprocess", f"{rec.scan_path}: {e}") from e
        write_scan(ex.retina, d / f"{rec.id}.png", rec.grade)
        write_boundaries(ex.boundaries(), d / f"{rec.id}_boundaries.csv")


def _retina(rec: ManifestRecord, cfg: RunConfig, run_dir: Path) -> Scan:
    return read_scan(run_dir / "preprocess" / f"{rec.id}.png", cfg.axial_scale_um_per_px)


def stage_train(manifest: Manifest, cfg: RunConfig, run_dir: Path, train_idx) -> Network:
    recs = [manifest.records[i] for i in train_idx]
    missing = [r.id for r in recs if r.mask_path is None]
    if missing:
        raise StageError("train", f"{len(missing)} training records have no mask_path (first: {missing[0]}); "
                                  "add masks to the manifest or pass a trained model")
    samples = []
    for r in recs:
        scan = _retina(r, cfg, run_dir)
        mask = read_mask(r.mask_path, scan)
        samples.append(Sample(scan.pixels, mask.labels, None if r.grade is None else int(r.grade.is_glaucoma), r.id))
    if any(s.cls is None for s in samples):
        log.warning("some training records lack a grade; the screening head gets no supervision from them")
        if not all(s.cls is None for s in samples):
            raise StageError("train", "grades must be given for all training records or for none")
    spec = spec_by_name(cfg.network)
    net = Network(spec, seed=cfg.seed)
    tcfg = cfg.training_config(manifest.train_fraction)
    history = fit(net, samples, tcfg)
    save_network(net, run_dir / "model.rgcn", {"seed": cfg.seed, "train_ids": [r.id for r in recs]})
    write_history(history, run_dir / "history.csv")
    return net


def stage_segment(manifest: Manifest, cfg: RunConfig, run_dir: Path, net: Network, test_idx) -> dict:
    d = run_dir / "masks"
    d.mkdir(exist_ok=True)
    recs = [manifest.records[i] for i in test_idx]
    scans = [_retina(r, cfg, run_dir) for r in recs]
    labels, probs = predict(net, [s.pixels for s in scans])
    out = {}
    for r, lab, p in zip(recs, labels, probs):
        write_mask(LayerMask(enforce_layer_order(lab)), d / f"{r.id}.png")
        out[r.id] = float(p)
    return out


def stage_profile(manifest: Manifest, cfg: RunConfig, run_dir: Path, test_idx) -> None:
    (run_dir / "profiles").mkdir(exist_ok=True)
    (run_dir / "features").mkdir(exist_ok=True)
    for i in test_idx:
        r = manifest.records[i]
        scale = _load_scan(r, cfg).axial_scale_um_per_px
        prof = thickness(read_mask(run_dir / "masks" / f"{r.id}.png"), scale)
        write_profile(prof, run_dir / "profiles" / f"{r.id}.csv")
        try:
            write_features(grade_features(prof), run_dir / "features" / f"{r.id}.json")
        except ValueError as e:
            log.warning("%s: %s", r.id, e)


def fit_grader(manifest: Manifest, cfg: RunConfig, train_idx) -> SvmModel:
    """SVM on ground-truth-mask features of the glaucomatous training records."""
    feats, labels = [], []
    for i in train_idx:
        r = manifest.records[i]
        if r.mask_path is None or r.grade is None or not r.grade.is_glaucoma:
            continue
        scan = _load_scan(r, cfg)
        feats.append(grade_features(thickness(read_mask(r.mask_path, scan), scan.axial_scale_um_per_px)))
        labels.append(r.grade)
    return svm_train(feats, labels, cfg.grading.svm_lambda, cfg.grading.svm_epochs, cfg.seed)


def stage_grade(manifest: Manifest, cfg: RunConfig, run_dir: Path, train_idx, test_idx, probs: dict) -> dict:
    svm = None
    if cfg.grading.method == "svm":
        try:
            svm = fit_grader(manifest, cfg, train_idx)
        except ValueError as e:
            raise StageError("grade", f"cannot fit the SVM grader: {e}") from e
        svm.save(run_dir / "svm.json")
    preds = {}
    for i in test_idx:
        r = manifest.records[i]
        p = probs[r.id]
        entry = {"glaucoma_prob": p, "screened_glaucoma": p >= cfg.screen_threshold,
                 "grade": GradeLabel.HEALTHY.value, "margin": None}
        fpath = run_dir / "features" / f"{r.id}.json"
        if entry["screened_glaucoma"]:
            if not fpath.exists():
                entry["grade"] = None  # no measurable layers to grade
            elif svm is not None:
                g, m = svm_predict(svm, read_features(fpath))
                entry["grade"], entry["margin"] = g.value, m
            else:
                entry["grade"] = threshold_grade(read_features(fpath),
                                                 ThresholdGrader(cfg.grading.rnfl_threshold_um)).value
        preds[r.id] = entry
    _dump_json(preds, run_dir / "predictions.json")
    return preds


def evaluate_run(manifest: Manifest, cfg: RunConfig, run_dir) -> dict:
    """MetricReport from cached artifacts only (predictions.json and masks/)."""
    run_dir = Path(run_dir)
    try:
        preds = json.loads((run_dir / "predictions.json").read_text())
    except FileNotFoundError as e:
        raise StageError("evaluate", f"{run_dir} has no predictions.json; run the pipeline first") from e
    by_id = {r.id: r for r in manifest.records}
    ids = [i for i in (r.id for r in manifest.records) if i in preds]
    graded = [i for i in ids if by_id[i].grade is not None]

    confusion = curve = corr = seg = None
    extra = {"seed": cfg.seed, "n_test": len(ids)}
    if graded:
        truth = [by_id[i].grade.is_glaucoma for i in graded]
        screened = [bool(preds[i]["screened_glaucoma"]) for i in graded]
        confusion = ConfusionCounts.from_labels(truth, screened)
        if 0 < sum(truth) < len(truth):
            curve = roc([preds[i]["glaucoma_prob"] for i in graded], truth)
        pairs = [(by_id[i].grade.ordinal, GradeLabel.parse(preds[i]["grade"]).ordinal)
                 for i in graded if preds[i]["grade"] is not None]
        try:
            corr = pearson([a for a, _ in pairs], [b for _, b in pairs])
        except UndefinedCorrelation as e:
            extra["correlation_undefined"] = str(e)
        # severity grading on the scans that are glaucomatous and were screened as such
        sev = [i for i in graded if by_id[i].grade.is_glaucoma and preds[i]["screened_glaucoma"]
               and preds[i]["grade"] is not None]
        extra["grading"] = {
            "n": len(sev),
            "accuracy": accuracy([by_id[i].grade.value for i in sev], [preds[i]["grade"] for i in sev]) if sev else None,
        }
    masked = [i for i in ids if by_id[i].mask_path is not None]
    if masked:
        gts = [read_mask(by_id[i].mask_path).labels for i in masked]
        pds = [read_mask(run_dir / "masks" / f"{i}.png").labels for i in masked]
        seg = segmentation_score(pds, gts)
    report = metric_report(confusion, seg, curve, corr, {k: v for k, v in LABEL_NAMES.items() if k}, extra)
    _dump_json(report, run_dir / "report.json")
    return report


def pipeline_run(manifest: Manifest, cfg: RunConfig, run_dir, model_path=None) -> dict:
    """preprocess -> train (or load) -> segment -> profile -> screen/grade -> evaluate."""
    cfg.validate()
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    stale = run_dir / "STALE"
    stale.write_text("run in progress\n")
    train_idx, test_idx = manifest.split(cfg.seed, cfg.train.stratified)
    _dump_json({"train": [manifest.records[i].id for i in train_idx],
                "test": [manifest.records[i].id for i in test_idx], "seed": cfg.seed}, run_dir / "split.json")
    save_config(cfg, run_dir / "config.json")
    stage = "preprocess"
    try:
        stage_preprocess(manifest, cfg, run_dir)
        stage = "train"
        if model_path is not None:
            net, _ = load_network(model_path)
        else:
            net = stage_train(manifest, cfg, run_dir, train_idx)
        stage = "segment"
        probs = stage_segment(manifest, cfg, run_dir, net, test_idx)
        stage = "profile"
        stage_profile(manifest, cfg, run_dir, test_idx)
        stage = "grade"
        stage_grade(manifest, cfg, run_dir, train_idx, test_idx, probs)
        stage = "evaluate"
        report = evaluate_run(manifest, cfg, run_dir)
    except StageError as e:
        stale.write_text(f"failed at stage {e.stage}: {e}\n")
        raise
    except Exception as e:  # noqa: BLE001
        stale.write_text(f"failed at stage {stage}: {e}\n")
        raise StageError(stage, str(e)) from e
    stale.unlink()
    return report


# ----------------------------------------------------------------- agreement

def clinician_agreement(manifest: Manifest, predictions: dict, min_overlap: int = 3) -> list:
    """Per-clinician Pearson agreement with ordinal-coded predicted grades.

    ``predictions`` maps record id to a grade. Each row is a dict with
    ``clinician``, ``r``, ``p``, ``n`` and, when undefined, ``reason``.
    """
    n_clin = max((len(r.clinician_grades) for r in manifest.records), default=0)
    rows = []
    for k in range(n_clin):
        pairs = []
        for r in manifest.records:
            if r.id in predictions and predictions[r.id] is not None and k < len(r.clinician_grades) \
                    and r.clinician_grades[k] is not None:
                pairs.append((GradeLabel.parse(predictions[r.id]).ordinal, r.clinician_grades[k].ordinal))
        row = {"clinician": k + 1, "r": None, "p": None, "n": len(pairs)}
        if len(pairs) < min_overlap:
            row["reason"] = f"only {len(pairs)} records graded by both (need {min_overlap})"
        else:
            try:
                c = pearson([a for a, _ in pairs], [b for _, b in pairs])
                row["r"], row["p"] = c.r, c.p
            except UndefinedCorrelation as e:
                row["reason"] = str(e)
        rows.append(row)
    return rows


def write_agreement_csv(rows: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["clinician", "r", "p", "n"])
        for row in rows:
            w.writerow([row["clinician"], "" if row["r"] is None else repr(row["r"]),
                        "" if row["p"] is None else repr(row["p"]), row["n"]])
