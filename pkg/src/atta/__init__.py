"""Anomaly-aware test-time adaptation for dense novel-pixel detection.

A small BN segmentation network trained on synthetic scenes is adapted per
test image by mixing BN statistics according to an estimated domain-shift
probability and by self-training its head on calibrated outlier
pseudo-labels.
"""
from .adaptation import AdaptConfig, AdaptResult, adapt_image, adapt_stream, infer
from .kernels import BACKEND
from .metrics import EvalReport, auroc, average_precision, evaluate, fpr_at_95_tpr
from .nn import ModelCheckpoint, load_checkpoint, save_checkpoint
from .scenes import CorruptionSpec, SceneSpec, build_dataset, generate_scene
from .trainer import TrainConfig, calibrate_domain_detector, train

__version__ = "0.1.0"
