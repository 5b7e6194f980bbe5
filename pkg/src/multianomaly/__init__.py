"""Few-shot multi-anomaly detection with sign-prompt selection on embedding vectors."""

from .alignloss import LossBreakdown, PromptBank, anchor_loss, img_text_loss, loss_grad, margin_check, total_loss
from .datagen import SyntheticSpec, generate, load_manifest, save_dataset
from .encoder import EncoderModel, build_encoder, encode, encode_batch, load_checkpoint, save_checkpoint
from .estimator import SignDrivenDetector
from .metrics import EvalReport, auroc, category_wise_auroc, evaluate, hamming_score, subset_accuracy
from .numcore import DegenerateInputError, RngState, cosine_distance, cosine_similarity
from .scoring import anomaly_score, predict_binary, score_category
from .selection import SelectionResult, d_inf, delta, keep_all, select
from .trainer import FewShotDataset, NumericError, PromptInputs, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "LossBreakdown", "PromptBank", "anchor_loss", "img_text_loss", "loss_grad", "margin_check", "total_loss",
    "SyntheticSpec", "generate", "load_manifest", "save_dataset",
    "EncoderModel", "build_encoder", "encode", "encode_batch", "load_checkpoint", "save_checkpoint",
    "SignDrivenDetector",
    "EvalReport", "auroc", "category_wise_auroc", "evaluate", "hamming_score", "subset_accuracy",
    "DegenerateInputError", "RngState", "cosine_distance", "cosine_similarity",
    "anomaly_score", "predict_binary", "score_category",
    "SelectionResult", "d_inf", "delta", "keep_all", "select",
    "FewShotDataset", "NumericError", "PromptInputs", "TrainConfig", "train",
]
