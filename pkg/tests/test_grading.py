import json
import warnings

import numpy as np
import pytest

from rgcaware.grading import SvmModel, ThresholdGrader, svm_objective, svm_predict, svm_train, threshold_grade
from rgcaware.profiles import GradeFeatures
from rgcaware.scan import COHORT_THICKNESS_UM, GradeLabel

E, A = GradeLabel.EARLY, GradeLabel.ADVANCED


def cohort(n, seed=0, spread=1.0):
    """Feature vectors drawn from the early/advanced thickness statistics."""
    r = np.random.default_rng(seed)
    feats, labels = [], []
    for i in range(n):
        name, lab = ("early", E) if i % 2 == 0 else ("advanced", A)
        st = COHORT_THICKNESS_UM[name]
        rn = r.normal(st["rnfl"][0], spread * st["rnfl"][1])
        gc = r.normal(st["gcip"][0], spread * st["gcip"][1])
        feats.append(GradeFeatures(rn, gc, rn + gc))
        labels.append(lab)
    return feats, labels


def separable():
    feats = [GradeFeatures(93.5 + d, 62.23 + d, 155.73 + 2 * d) for d in (-2, 0, 2)]
    feats += [GradeFeatures(69.46 + d, 33.96 + d, 103.42 + 2 * d) for d in (-2, 0, 2)]
    return feats, [E] * 3 + [A] * 3


def test_separable_training_accuracy():
    f, y = separable()
    m = svm_train(f, y)
    assert all(svm_predict(m, x)[0] is lab for x, lab in zip(f, y))
    assert svm_predict(m, GradeFeatures(93.5, 62.23, 155.73))[0] is E


def test_swapped_labels_complement_predictions():
    f, y = cohort(40)
    m1 = svm_train(f, y)
    m2 = svm_train(f, [A if g is E else E for g in y])
    np.testing.assert_allclose(m2.w, -m1.w, atol=1e-12)
    for x in f:
        p1, mg1 = svm_predict(m1, x)
        p2, mg2 = svm_predict(m2, x)
        assert mg1 == pytest.approx(-mg2, abs=1e-9)
        if abs(mg1) > 1e-9:
            assert p1 is not p2


def test_deterministic():
    f, y = cohort(30)
    a, b = svm_train(f, y, seed=5), svm_train(f, y, seed=5)
    assert np.array_equal(a.w, b.w) and a.b == b.b


def test_objective_non_increasing():
    f, y = cohort(50, spread=2.0)
    h = svm_train(f, y, epochs=300).objective_history
    assert all(b <= a for a, b in zip(h, h[1:])) and h[-1] < h[0]


def test_best_iterate_matches_reported_objective():
    f, y = cohort(30)
    m = svm_train(f, y)
    X = np.vstack([x.vector() for x in f])
    s = np.array([1.0 if g is A else -1.0 for g in y])
    assert svm_objective(m.w, m.b, m.standardize(X), s, m.lam) == pytest.approx(m.objective_history[-1])


def test_single_class_and_healthy_rejected():
    f, _ = cohort(4)
    with pytest.raises(ValueError):
        svm_train(f, [E] * 4)
    with pytest.raises(ValueError):
        svm_train(f, [E, A, GradeLabel.HEALTHY, A])


def test_zero_variance_feature_warns():
    f = [GradeFeatures(90, 60, 150), GradeFeatures(70, 60, 130), GradeFeatures(92, 60, 152),
         GradeFeatures(68, 60, 128)]
    with pytest.warns(RuntimeWarning, match="zero-variance"):
        m = svm_train(f, [E, A, E, A])
    assert m.std[1] == 1e-9 and np.all(m.std > 0)


def test_tie_goes_to_advanced():
    m = SvmModel(np.zeros(3), 0.0, np.zeros(3), np.ones(3), 0.01, 0)
    assert svm_predict(m, GradeFeatures(80, 50, 130)) == (A, 0.0)


def test_rescaling_features_keeps_labels():
    f, y = cohort(40, seed=2)
    test, _ = cohort(20, seed=9)

    def scaled(fs, c):
        return [GradeFeatures(c * x.mean_rnfl_um, c * x.mean_gcip_um, c * x.mean_gcc_um) for x in fs]

    m1 = svm_train(f, y)
    m2 = svm_train(scaled(f, 3.7), y)
    assert [svm_predict(m1, x)[0] for x in test] == [svm_predict(m2, x)[0] for x in scaled(test, 3.7)]


def test_held_out_accuracy_and_threshold_baseline():
    ftr, ytr = cohort(200, seed=1)
    fte, yte = cohort(200, seed=2)
    m = svm_train(ftr, ytr)
    svm_acc = np.mean([svm_predict(m, x)[0] is t for x, t in zip(fte, yte)])
    thr_acc = np.mean([threshold_grade(x) is t for x, t in zip(fte, yte)])
    assert svm_acc >= 0.9
    assert svm_acc >= thr_acc - 0.02


def test_threshold_grader():
    g = ThresholdGrader()
    assert g.rnfl_threshold_um == pytest.approx(81.48)
    assert threshold_grade(GradeFeatures(69.46, 0, 0), g) is A
    assert threshold_grade(GradeFeatures(93.50, 0, 0), g) is E
    assert threshold_grade(GradeFeatures(81.48, 0, 0), ThresholdGrader(81.48)) is E
    with pytest.raises(ValueError):
        ThresholdGrader(0)


def test_model_json_round_trip(tmp_path):
    f, y = cohort(20)
    m = svm_train(f, y, lam=0.05, seed=3)
    m.save(tmp_path / "svm.json")
    d = json.loads((tmp_path / "svm.json").read_text())
    assert {"weights", "bias", "feature_mean", "feature_std", "lambda", "seed"} <= set(d)
    back = SvmModel.load(tmp_path / "svm.json")
    for x in f:
        assert svm_predict(back, x) == svm_predict(m, x)
