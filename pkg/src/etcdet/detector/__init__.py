"""Toy-scale single-shot detector: multi-scale prior boxes, IoU matching,
the combined confidence + localization loss with hard-negative mining, a
small convolutional network with hand-coded gradients, SGD training, and
NMS-decoded inference."""

from .priors import PriorBox, PriorConfig, VARIANCES, center_to_corner, corner_to_center, decode, encode, generate_priors
from .matching import MatchAssignment, iou_matrix, match_priors
from .loss import LossBreakdown, mine_hard_negatives, multibox_loss, multibox_loss_and_grads, smooth_l1, smooth_l1_grad
from .network import Conv2d, MiniSSD, MiniSSDConfig, load_checkpoint, save_checkpoint
from .train import TrainConfig, TrainingSet, train, training_set_from_manifest, write_loss_trace
from .inference import Detection, infer, nms

__all__ = [
    "PriorBox", "PriorConfig", "VARIANCES", "center_to_corner", "corner_to_center",
    "decode", "encode", "generate_priors",
    "MatchAssignment", "iou_matrix", "match_priors",
    "LossBreakdown", "mine_hard_negatives", "multibox_loss", "multibox_loss_and_grads", "smooth_l1", "smooth_l1_grad",
    "Conv2d", "MiniSSD", "MiniSSDConfig", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "TrainingSet", "train", "training_set_from_manifest", "write_loss_trace",
    "Detection", "infer", "nms",
]
