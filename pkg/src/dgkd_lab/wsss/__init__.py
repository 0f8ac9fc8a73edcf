from .segnet import MASK_TAP, SegNet, build_segnet
from .pamr import pamr_refine
from .cams import CamStack, cams_from_scores, make_cams, pseudo_mask_from_cams
from .losses import LossReport, classification_loss, self_sup_seg_loss
from .train import (
    classification_accuracy,
    corpus_to_tensors,
    evaluate_model,
    load_checkpoint,
    load_segnet,
    save_checkpoint,
    train_student,
    train_teacher,
)

__all__ = [
    "MASK_TAP", "SegNet", "build_segnet", "pamr_refine", "CamStack",
    "cams_from_scores", "make_cams", "pseudo_mask_from_cams", "LossReport",
    "classification_loss", "self_sup_seg_loss", "classification_accuracy",
    "corpus_to_tensors", "evaluate_model", "load_checkpoint", "load_segnet",
    "save_checkpoint", "train_student", "train_teacher",
]
