"""Walk through the building blocks on one synthetic scan.

    python demos/library_tour.py
"""
import numpy as np

from rgcaware.engine.dilation import fixed_schedule, gridding_coverage, make_schedule
from rgcaware.engine.network import count_parameters, toy_spec
from rgcaware.grading import svm_predict, svm_train, threshold_grade
from rgcaware.metrics import ConfusionCounts, confusion_metrics, pearson
from rgcaware.pipeline import synth_cohort
from rgcaware.preprocess import extract_retina_full
from rgcaware.profiles import grade_features, thickness

cohort = synth_cohort(30, seed=1)
scan, mask, grade = cohort[1]
ex = extract_retina_full(scan)
print(f"{scan.id}: {grade.value}, retina kept in {int(ex.mask.sum())} px via the {ex.component} tensor component")

feats = [grade_features(thickness(m, s.axial_scale_um_per_px)) for s, m, _ in cohort]
print(f"mean RNFL of {scan.id}: {feats[1].mean_rnfl_um:.1f} um")

glauc = [(f, g) for f, (_, _, g) in zip(feats, cohort) if g.is_glaucoma]
model = svm_train([f for f, _ in glauc], [g for _, g in glauc])
for f, g in glauc[:4]:
    label, margin = svm_predict(model, f)
    print(f"  truth {g.value:17s} svm {label.value:17s} (margin {margin:+.2f})  threshold {threshold_grade(f).value}")

for n, r in [(5, 3), (3, 3)]:
    v, fx = make_schedule(n, r), fixed_schedule(n, r)
    print(f"schedule({n},{r}) = {list(v.rates)}: coverage {gridding_coverage(v):.3f} vs fixed {gridding_coverage(fx):.3f}")

print("toy network parameters (learnable, fixed, total):", count_parameters(toy_spec()))
print("screening metrics for (34,22,2,1):",
      {k: round(v, 4) for k, v in confusion_metrics(ConfusionCounts(34, 22, 2, 1)).items()})
res = pearson([1, 2, 3, 4, 5], [2, 1, 4, 3, 6])
print(f"pearson r={res.r:.4f} p={res.p:.4f}")
