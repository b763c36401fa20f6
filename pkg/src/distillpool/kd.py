"""Evaluation protocols: plain retraining on the distilled set and teacher-guided retraining.

The distillation loss is ``KL(teacher || student) * alpha * tau**2 + CE * (1 - alpha)``
with both distributions softened by ``tau``.
"""
from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
import torch
import torch.nn.functional as F

from .data import LabeledDataset, SyntheticDataset
from .errors import ConfigError, DivergenceError
from .models import MAIN_CONVNET, ModelInstance, ModelSpec, build_model

log = logging.getLogger(__name__)


@dataclass
class KDConfig:
    alpha: float = 0.5
    tau: float = 4.0
    epochs: int = 300
    lr: float = 0.01
    momentum: float = 0.9
    lr_decay_epochs: tuple[int, ...] = (150,)
    lr_decay_factor: float = 0.5
    weight_decay: float = 0.0
    batch_size: int | None = None  # None trains on the whole synthetic set per step
    eval_reps: int = 3
    test_subset: int | None = None  # class-stratified cap on the test split

    def __post_init__(self):
        self.lr_decay_epochs = tuple(self.lr_decay_epochs)

    def validate(self) -> "KDConfig":
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.epochs < 0 or self.eval_reps < 1 or self.lr <= 0:
            raise ConfigError("epochs >= 0, eval_reps >= 1 and lr > 0 are required")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lr_decay_epochs"] = list(self.lr_decay_epochs)
        return d


class EvalResult(NamedTuple):
    accuracy: float  # percent, mean over surviving reps
    model: ModelInstance  # the last surviving rep
    per_rep: list[float]  # percent; NaN marks a diverged rep
    history: list[dict] = []  # per-epoch losses of the first rep


def kd_loss(y_s: torch.Tensor, y_t: torch.Tensor, y: torch.Tensor, alpha: float, tau: float,
            return_parts: bool = False):
    if y_s.shape != y_t.shape or y_s.ndim != 2 or y.shape != y_s.shape[:1]:
        raise ValueError(f"shape mismatch: student {tuple(y_s.shape)}, teacher {tuple(y_t.shape)}, "
                         f"labels {tuple(y.shape)}")
    log_p_s = F.log_softmax(y_s / tau, dim=1)
    log_p_t = F.log_softmax(y_t / tau, dim=1)
    kl = F.kl_div(log_p_s, log_p_t, reduction="batchmean", log_target=True)
    ce = F.cross_entropy(y_s, y)
    total = kl * alpha * tau ** 2 + ce * (1 - alpha)
    if return_parts:
        return total, kl, ce
    return total


@torch.no_grad()
def evaluate_accuracy(model: ModelInstance, test: LabeledDataset, batch_size: int = 500) -> float:
    """Top-1 accuracy in percent."""
    was_training = model.module.training
    model.module.eval()
    correct = 0
    for i in range(0, len(test), batch_size):
        pred = model.module(test.images[i:i + batch_size]).argmax(1)
        correct += int((pred == test.labels[i:i + batch_size]).sum())
    model.module.train(was_training)
    return 100.0 * correct / len(test)


def _rep_seeds(seed: int, reps: int) -> list[int]:
    return [int(np.random.default_rng([seed, 7, r]).integers(2**62)) for r in range(reps)]


def _fit(model: ModelInstance, x: torch.Tensor, y: torch.Tensor, cfg: KDConfig,
         objective: Callable, seed: int) -> list[dict] | None:
    """SGD on ``objective(logits, index)``; returns the history, or None if the loss diverged."""
    opt = torch.optim.SGD(model.module.parameters(), lr=cfg.lr, momentum=cfg.momentum,
                          weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, list(cfg.lr_decay_epochs), cfg.lr_decay_factor)
    gen = torch.Generator().manual_seed(seed)
    n = x.shape[0]
    bs = cfg.batch_size or n
    history = []
    model.module.train()
    for epoch in range(cfg.epochs):
        order = torch.randperm(n, generator=gen) if bs < n else torch.arange(n)
        epoch_loss = []
        for i in range(0, n, bs):
            idx = order[i:i + bs]
            loss, parts = objective(model.module(x[idx]), idx)
            if not torch.isfinite(loss):
                return None
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            epoch_loss.append(loss.item())
        sched.step()
        history.append({"epoch": epoch, "loss": float(np.mean(epoch_loss)), **parts})
    return history


def _run_reps(arch: ModelSpec, syn: SyntheticDataset, test: LabeledDataset, cfg: KDConfig,
              seed: int, objective_for, student_init: ModelInstance | None = None) -> EvalResult:
    x = syn.pixels.detach()
    y = syn.labels
    if x.shape[0] == 0:
        raise ValueError("empty synthetic set")
    if cfg.test_subset:
        test = test.stratified_subset(cfg.test_subset)
    accs, survivor, first_history = [], None, []
    for r, rep_seed in enumerate(_rep_seeds(seed, cfg.eval_reps)):
        model = student_init.copy() if student_init is not None else build_model(arch, rep_seed)
        history = _fit(model, x, y, cfg, objective_for(y), rep_seed)
        if history is None:
            warnings.warn(f"{arch.label} rep {r} diverged; excluded from the mean", RuntimeWarning)
            accs.append(float("nan"))
            continue
        if r == 0:
            first_history = history
        accs.append(evaluate_accuracy(model, test))
        survivor = model
        log.info("%s rep %d: %.2f%%", arch.label, r, accs[-1])
    good = [a for a in accs if not math.isnan(a)]
    if not good:
        raise DivergenceError(f"all {cfg.eval_reps} reps of {arch.label} diverged")
    return EvalResult(float(np.mean(good)), survivor, accs, first_history)


def train_plain(arch: ModelSpec, syn: SyntheticDataset, test: LabeledDataset, cfg: KDConfig,
                seed: int = 0) -> EvalResult:
    """Retrain fresh ``arch`` networks on ``syn`` with cross-entropy and report test accuracy."""

    def objective_for(y):
        def objective(logits, idx):
            return F.cross_entropy(logits, y[idx]), {}
        return objective

    return _run_reps(arch, syn, test, cfg, seed, objective_for)


def train_teacher(syn: SyntheticDataset, test: LabeledDataset, cfg: KDConfig, seed: int = 0,
                  arch: ModelSpec = MAIN_CONVNET) -> EvalResult:
    """One plainly trained main ConvNet, used as the frozen teacher for every student."""
    return train_plain(arch, syn, test, dataclasses.replace(cfg, eval_reps=1), seed)


def train_kd(student_arch: ModelSpec, teacher: ModelInstance, syn: SyntheticDataset,
             test: LabeledDataset, cfg: KDConfig, seed: int = 0,
             student_init: ModelInstance | None = None) -> EvalResult:
    """Retrain ``student_arch`` on ``syn`` against the frozen teacher's logits."""
    cfg.validate()
    was_training = teacher.module.training
    teacher.module.eval()
    with torch.no_grad():
        teacher_logits = teacher.module(syn.pixels.detach())
    teacher.module.train(was_training)

    def objective_for(y):
        def objective(logits, idx):
            total, kl, ce = kd_loss(logits, teacher_logits[idx], y[idx], cfg.alpha, cfg.tau, return_parts=True)
            return total, {"kl": kl.item(), "ce": ce.item()}
        return objective

    return _run_reps(student_arch, syn, test, cfg, seed, objective_for, student_init)
