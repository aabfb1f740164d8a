from .analysis import DistanceQualityTable, analyze_distance_quality
from .gmad import GmadPair, gmad_pairs
from .metrics import plcc, srocc
from .protocol import EvalReport, SplitPlan, cross_eval, make_split, make_splits, run_protocol
from .significance import FTestResult, f_test, logistic_residuals

__all__ = [
    "DistanceQualityTable",
    "EvalReport",
    "FTestResult",
    "GmadPair",
    "SplitPlan",
    "analyze_distance_quality",
    "cross_eval",
    "f_test",
    "gmad_pairs",
    "logistic_residuals",
    "make_split",
    "make_splits",
    "plcc",
    "run_protocol",
    "srocc",
]
