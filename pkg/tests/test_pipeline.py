import json

import numpy as np
import pytest

from rgcaware import pipeline as P
from rgcaware.metrics import pearson
from rgcaware.scan import GradeLabel

FAST = ["train.epochs=1", "train.iters_per_epoch=2", "augment.copies_per_scan=1"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    return P.write_synthetic_dataset(tmp_path_factory.mktemp("data"), n=15, seed=3)


@pytest.fixture(scope="module")
def fast_cfg():
    return P.load_config(overrides=FAST)


@pytest.fixture(scope="module")
def run(dataset, fast_cfg, tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    report = P.pipeline_run(P.load_manifest(dataset), fast_cfg, d)
    return d, report


def test_run_layout(run):
    d, report = run
    for name in ("model.rgcn", "history.csv", "svm.json", "predictions.json", "report.json",
                 "split.json", "config.json"):
        assert (d / name).exists(), name
    assert not (d / "STALE").exists()
    assert {"confusion", "seg", "roc", "seed", "n_test"} <= set(report)


def test_rerun_is_deterministic(run, dataset, fast_cfg, tmp_path):
    d, report = run
    again = P.pipeline_run(P.load_manifest(dataset), fast_cfg, tmp_path)
    assert again == report
    assert (tmp_path / "predictions.json").read_bytes() == (d / "predictions.json").read_bytes()


def test_evaluate_only_reproduces_report(run, dataset, fast_cfg):
    d, _ = run
    before = (d / "report.json").read_bytes()
    P.evaluate_run(P.load_manifest(dataset), fast_cfg, d)
    assert (d / "report.json").read_bytes() == before


def test_evaluate_without_predictions_fails(dataset, fast_cfg, tmp_path):
    with pytest.raises(P.StageError, match="evaluate"):
        P.evaluate_run(P.load_manifest(dataset), fast_cfg, tmp_path)


def test_training_without_masks_is_refused(dataset, fast_cfg, tmp_path):
    m = P.load_manifest(dataset)
    bare = P.Manifest(tuple(P.ManifestRecord(r.scan_path, None, r.grade) for r in m.records))
    with pytest.raises(P.StageError, match=r"\[train\]"):
        P.pipeline_run(bare, fast_cfg, tmp_path)
    assert "train" in (tmp_path / "STALE").read_text()


def test_split_determinism_and_explicit_split(dataset):
    m = P.load_manifest(dataset)
    a, b = m.split(4), m.split(4)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert sorted(np.concatenate(a).tolist()) == list(range(len(m.records)))
    recs = tuple(P.ManifestRecord(r.scan_path, r.mask_path, r.grade, r.clinician_grades,
                                  "test" if i < 4 else "train") for i, r in enumerate(m.records))
    tr, te = P.Manifest(recs).split(99)
    assert te.tolist() == [0, 1, 2, 3]


def test_manifest_round_trip_and_validation(dataset, tmp_path):
    m = P.load_manifest(dataset)
    P.save_manifest(m, dataset)
    again = P.load_manifest(dataset)
    assert [r.id for r in again.records] == [r.id for r in m.records]
    assert again.records[0].clinician_grades == m.records[0].clinician_grades
    doc = json.loads(dataset.read_text())
    doc["records"][0]["surprise"] = 1
    bad = dataset.parent / "bad.json"
    bad.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="unknown"):
        P.load_manifest(bad)
    doc["records"][0].pop("surprise")
    doc["records"][0]["scan_path"] = "scans/missing.png"
    bad.write_text(json.dumps(doc))
    with pytest.raises(FileNotFoundError):
        P.load_manifest(bad)


def test_config_overrides_and_validation(tmp_path):
    cfg = P.load_config(overrides=["train.epochs=3", "grading.method=threshold", "seed=9"])
    assert cfg.train.epochs == 3 and cfg.grading.method == "threshold" and cfg.seed == 9
    assert cfg.training_config(0.7).augment.seed == 9
    P.save_config(cfg, tmp_path / "c.json")
    assert P.load_config(tmp_path / "c.json") == cfg
    for bad in (["train.nope=1"], ["screen_threshold=1.5"], ["grading.method=forest"], ["noequals"]):
        with pytest.raises(ValueError):
            P.load_config(overrides=bad)


def test_synthetic_cohort_is_seeded():
    a = P.synth_cohort(6, seed=2)
    b = P.synth_cohort(6, seed=2)
    assert all(np.array_equal(x[0].pixels, y[0].pixels) and x[2] is y[2] for x, y in zip(a, b))
    assert {g for _, _, g in a} == set(GradeLabel)


# ------------------------------------------------------------ agreement

def manifest_with_clinicians(dataset, grades):
    m = P.load_manifest(dataset)
    recs = tuple(P.ManifestRecord(r.scan_path, r.mask_path, r.grade, tuple(g))
                 for r, g in zip(m.records, grades))
    return P.Manifest(recs)


def test_identical_clinician_gives_r1(dataset):
    m = P.load_manifest(dataset)
    preds = {r.id: r.grade for r in m.records}
    m2 = manifest_with_clinicians(dataset, [[r.grade] for r in m.records])
    row = P.clinician_agreement(m2, preds)[0]
    assert row["r"] == pytest.approx(1.0) and row["n"] == len(m.records)


def test_constant_clinician_is_undefined(dataset):
    m = P.load_manifest(dataset)
    m2 = manifest_with_clinicians(dataset, [[GradeLabel.EARLY]] * len(m.records))
    row = P.clinician_agreement(m2, {r.id: r.grade for r in m.records})[0]
    assert row["r"] is None and "variance" in row["reason"]


def test_four_clinicians_match_direct_formula(dataset, tmp_path):
    m = P.load_manifest(dataset)
    rng = np.random.default_rng(0)
    levels = list(GradeLabel)
    clin = [[levels[k] for k in rng.integers(0, 3, 4)] for _ in m.records]
    m2 = manifest_with_clinicians(dataset, clin)
    preds = {r.id: levels[int(k)] for r, k in zip(m.records, rng.integers(0, 3, len(m.records)))}
    rows = P.clinician_agreement(m2, preds)
    assert len(rows) == 4
    for k, row in enumerate(rows):
        x = np.array([preds[r.id].ordinal for r in m.records], float)
        y = np.array([c[k].ordinal for c in clin], float)
        expect = np.sum((x - x.mean()) * (y - y.mean())) / np.sqrt(np.sum((x - x.mean()) ** 2) * np.sum((y - y.mean()) ** 2))
        assert row["r"] == pytest.approx(expect, abs=1e-12)
        assert row["p"] == pytest.approx(pearson(x, y).p)
    P.write_agreement_csv(rows, tmp_path / "a.csv")
    assert (tmp_path / "a.csv").read_text().startswith("clinician,r,p,n")


def test_too_few_overlapping_records(dataset):
    m = P.load_manifest(dataset)
    row = P.clinician_agreement(m, {m.records[0].id: GradeLabel.EARLY})[0]
    assert row["r"] is None and row["n"] <= 1
