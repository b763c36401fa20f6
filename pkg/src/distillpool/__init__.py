"""Gradient-matching dataset distillation with model pools and KD evaluation."""
from .data import (LabeledDataset, SyntheticDataset, init_synthetic, load_cifar10, load_synthetic,
                   sample_class_batch, save_synthetic)
from .harness import ExperimentConfig, ResultRecord, report, run_experiment
from .kd import KDConfig, kd_loss, train_kd, train_plain
from .match import MatchConfig, distill, grad_distance, match_loss, syn_update
from .models import LayerGradients, ModelInstance, ModelSpec, build_model, loss_ce, param_gradients, sgd_step
from .pool import ModelPool, make_pool, sample_spec

__all__ = [
    "LabeledDataset", "SyntheticDataset", "init_synthetic", "load_cifar10", "load_synthetic", "sample_class_batch",
    "save_synthetic", "ExperimentConfig", "ResultRecord", "report", "run_experiment", "KDConfig", "kd_loss",
    "train_kd", "train_plain", "MatchConfig", "distill", "grad_distance", "match_loss", "syn_update",
    "LayerGradients", "ModelInstance", "ModelSpec", "build_model", "loss_ce", "param_gradients", "sgd_step",
    "ModelPool", "make_pool", "sample_spec",
]
__version__ = "0.1.0"
