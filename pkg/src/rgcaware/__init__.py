"""RGC-aware glaucoma analysis on OCT B-scans."""
from .scan import (BoundarySet, GradeLabel, LayerMask, Scan, SynthConfig, generate_synthetic,
                   read_mask, read_scan, write_mask, write_scan)
from .preprocess import PreprocessConfig, extract_retina
from .profiles import GradeFeatures, ThicknessProfile, grade_features, thickness
from .grading import SvmModel, ThresholdGrader, svm_predict, svm_train, threshold_grade

__version__ = "0.1.0"
