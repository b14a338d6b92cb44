from .evaluate import EvalOptions, evaluate, evaluate_model, model_scorer, score_dataset, write_report
from .metrics import EvalRecord, MetricError, ap, auc, eer, summary, video_aggregate
from .perturb import KINDS, LEVELS, PerturbationSpec, perturb, psnr

__all__ = [
    "EvalOptions", "evaluate", "evaluate_model", "model_scorer", "score_dataset", "write_report",
    "EvalRecord", "MetricError", "ap", "auc", "eer", "summary", "video_aggregate",
    "KINDS", "LEVELS", "PerturbationSpec", "perturb", "psnr",
]
