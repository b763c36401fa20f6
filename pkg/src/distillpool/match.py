"""Bilevel gradient matching with model-pool reinitialization."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import LabeledDataset, SyntheticDataset, init_synthetic, load_synthetic, sample_class_batch, save_synthetic
from .errors import ConfigError, NonFiniteError
from .models import LayerGradients, ModelInstance, ModelSpec, build_model, param_gradients, sgd_step
from .pool import PRESETS, make_pool, sample_spec

log = logging.getLogger(__name__)

# independent RNG streams so that fixing the architecture does not shift data or init draws
_STREAM_INIT, _STREAM_POOL, _STREAM_MODEL, _STREAM_DATA = range(4)


def default_loops(ipc: int) -> tuple[int, int]:
    """(matched_steps, inner_steps) used when the config leaves them unset."""
    return (1, 1) if ipc == 1 else (10, 50)


@dataclass
class MatchConfig:
    ipc: int = 1
    iterations: int = 1000
    matched_steps: int | None = None
    inner_steps: int | None = None
    eta_net: float = 0.01
    eta_img: float = 0.1
    momentum_img: float = 0.5
    real_batch_per_class: int = 256
    pool_preset: str = "baseline"
    main_prob: float = 0.9
    seed: int = 0
    init: str = "real"
    distance: str = "layer"
    checkpoint_every: int = 0

    def resolved(self) -> "MatchConfig":
        t, inner = default_loops(self.ipc)
        return dataclasses.replace(
            self,
            matched_steps=t if self.matched_steps is None else self.matched_steps,
            inner_steps=inner if self.inner_steps is None else self.inner_steps,
        ).validate()

    def validate(self) -> "MatchConfig":
        for name in ("ipc", "iterations", "real_batch_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.matched_steps is not None and self.matched_steps < 1:
            raise ConfigError("matched_steps must be >= 1")
        if self.inner_steps is not None and self.inner_steps < 0:
            raise ConfigError("inner_steps must be >= 0")
        if self.eta_net <= 0 or self.eta_img <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.momentum_img < 1:
            raise ConfigError("momentum_img must lie in [0, 1)")
        if self.pool_preset not in PRESETS:
            raise ConfigError(f"unknown pool preset {self.pool_preset!r}")
        if self.distance not in ("layer", "neuron"):
            raise ConfigError(f"unknown distance granularity {self.distance!r}")
        if self.init not in ("real", "noise"):
            raise ConfigError(f"unknown init mode {self.init!r}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self, exclude=("checkpoint_every",)) -> str:
        d = {k: v for k, v in self.resolved().to_dict().items() if k not in exclude}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def run_hash(self) -> str:
        """Hash shared by runs that differ only in their episode count."""
        return self.hash(exclude=("checkpoint_every", "iterations"))


def _rng(seed: int, stream: int, episode: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, episode])


def _cosine_distance(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """1 - cos(a, b) over the last axis; both-zero rows give 0, one-zero rows give 1."""
    na = a.norm(dim=-1)
    nb = b.norm(dim=-1)
    both_zero = (na == 0) & (nb == 0)
    cos = (a * b).sum(-1) / torch.where((na == 0) | (nb == 0), torch.ones_like(na), na * nb)
    return torch.where(both_zero, torch.zeros_like(cos), 1.0 - cos)


def grad_distance(ga: LayerGradients, gb: LayerGradients, granularity: str = "layer") -> torch.Tensor:
    """Sum over layers of the cosine distance between flattened layer gradients.

    ``granularity="neuron"`` instead sums the distance over output units (rows
    of each gradient reshaped to ``[out, -1]``).
    """
    if len(ga) != len(gb) or any(a.shape != b.shape for a, b in zip(ga.grads, gb.grads)):
        raise ValueError("gradient sets are not shape-congruent")
    total = None
    for a, b in zip(ga.grads, gb.grads):
        if granularity == "neuron" and a.ndim > 1:
            d = _cosine_distance(a.reshape(a.shape[0], -1), b.reshape(b.shape[0], -1)).sum()
        else:
            d = _cosine_distance(a.reshape(-1), b.reshape(-1))
        total = d if total is None else total + d
    return total


def match_loss(model: ModelInstance, real: LabeledDataset, syn: SyntheticDataset,
               rng: np.random.Generator, cfg: MatchConfig) -> torch.Tensor:
    """Class-wise gradient distance between real batches and the synthetic set."""
    loss = None
    for c in range(syn.num_classes):
        xr, yr = sample_class_batch(real, c, cfg.real_batch_per_class, rng)
        g_real = param_gradients(model, xr, yr)
        sl = syn.class_slice(c)
        g_syn = param_gradients(model, syn.pixels[sl], syn.labels[sl], create_graph=True)
        d = grad_distance(g_real, g_syn, cfg.distance)
        loss = d if loss is None else loss + d
    return loss


class PixelMomentum:
    """SGD with heavy-ball momentum on the synthetic pixels (torch.optim.SGD update rule)."""

    def __init__(self, lr: float, momentum: float, buffer: torch.Tensor | None = None):
        self.lr = lr
        self.momentum = momentum
        self.buffer = buffer

    @torch.no_grad()
    def step(self, pixels: torch.Tensor, grad: torch.Tensor) -> None:
        if self.momentum:
            self.buffer = grad.clone() if self.buffer is None else self.buffer.mul_(self.momentum).add_(grad)
            grad = self.buffer
        pixels.sub_(self.lr * grad)


def syn_update(syn: SyntheticDataset, model: ModelInstance, real: LabeledDataset,
               rng: np.random.Generator, cfg: MatchConfig, optimizer: PixelMomentum | None = None,
               episode: int | None = None) -> tuple[SyntheticDataset, float]:
    """One descent step on the matching loss w.r.t. the synthetic pixels.

    Returns the (in-place updated) set and the matching loss before the step.
    """
    if not syn.pixels.requires_grad:
        syn.pixels.requires_grad_(True)
    loss = match_loss(model, real, syn, rng, cfg)
    value = float(loss.detach())
    if not math.isfinite(value):
        raise NonFiniteError(f"non-finite matching loss {value} (config {cfg.hash()}, episode {episode})",
                             config_hash=cfg.hash(), episode=episode)
    (grad,) = torch.autograd.grad(loss, syn.pixels)
    if not torch.isfinite(grad).all():
        raise NonFiniteError(f"non-finite pixel gradient (config {cfg.hash()}, episode {episode})",
                             config_hash=cfg.hash(), episode=episode)
    opt = optimizer or PixelMomentum(cfg.eta_img, 0.0)
    opt.step(syn.pixels, grad)
    return syn, value


@dataclass
class EpisodeTrace:
    episode: int
    sampled_spec: str
    match_loss: float


def _write_trace(path: Path, trace: list[EpisodeTrace]) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["episode", "sampled_spec", "match_loss"])
        for t in trace:
            w.writerow([t.episode, t.sampled_spec, repr(t.match_loss)])
    os.replace(tmp, path)


def _read_trace(path: Path) -> list[EpisodeTrace]:
    with open(path, newline="") as f:
        return [EpisodeTrace(int(r["episode"]), r["sampled_spec"], float(r["match_loss"]))
                for r in csv.DictReader(f)]


def save_checkpoint(ckpt_dir: Path, syn: SyntheticDataset, trace: list[EpisodeTrace],
                    optimizer: PixelMomentum) -> None:
    ckpt_dir = Path(ckpt_dir)
    staging = ckpt_dir.with_name(ckpt_dir.name + ".staging")
    shutil.rmtree(staging, ignore_errors=True)
    save_synthetic(syn, staging)
    _write_trace(staging / "trace.csv", trace)
    torch.save({"momentum_buffer": optimizer.buffer}, staging / "optimizer.pt")
    old = ckpt_dir.with_name(ckpt_dir.name + ".old")
    shutil.rmtree(old, ignore_errors=True)
    if ckpt_dir.exists():
        os.replace(ckpt_dir, old)
    os.replace(staging, ckpt_dir)
    shutil.rmtree(old, ignore_errors=True)


def load_checkpoint(ckpt_dir: Path):
    syn = load_synthetic(ckpt_dir)
    trace = _read_trace(Path(ckpt_dir) / "trace.csv")
    state = torch.load(Path(ckpt_dir) / "optimizer.pt", weights_only=True)
    return syn, trace, state["momentum_buffer"]


def distill(train: LabeledDataset, cfg: MatchConfig, *, checkpoint_dir=None, spec: ModelSpec | None = None,
            resume: bool = True) -> tuple[SyntheticDataset, list[EpisodeTrace]]:
    """Run ``cfg.iterations`` reinitialization episodes and return the distilled set and loss trace.

    Each episode draws an architecture from the pool (or uses ``spec`` when
    given), builds a fresh network, then alternates a pixel update with
    ``inner_steps`` network SGD steps on the whole synthetic set, ``matched_steps``
    times. Episode ``e`` draws all of its randomness from streams keyed by
    ``(seed, e)``, so a run of K episodes is a prefix of any longer run.
    """
    cfg = cfg.resolved()
    pool = make_pool(cfg.pool_preset, cfg.main_prob)
    run_hash = cfg.run_hash()
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None

    start, trace, buffer = 0, [], None
    syn = None
    if ckpt is not None and resume and (ckpt / "manifest.json").exists():
        c_syn, c_trace, c_buf = load_checkpoint(ckpt)
        prov = c_syn.provenance
        if prov.get("run_hash") == run_hash and prov.get("iterations", 0) <= cfg.iterations:
            syn, trace, buffer, start = c_syn, c_trace, c_buf, int(prov["iterations"])
            log.info("resuming %s from episode %d", run_hash, start)
    if syn is None:
        syn = init_synthetic(train, cfg.ipc, cfg.init, _rng(cfg.seed, _STREAM_INIT))
    syn.pixels.requires_grad_(True)
    optimizer = PixelMomentum(cfg.eta_img, cfg.momentum_img, buffer)

    def stamp(n_done):
        syn.provenance = {"config_hash": cfg.hash(), "run_hash": run_hash, "seed": cfg.seed,
                          "iterations": n_done, "pool_preset": cfg.pool_preset, "init": cfg.init}

    for episode in range(start, cfg.iterations):
        arch = spec if spec is not None else sample_spec(pool, _rng(cfg.seed, _STREAM_POOL, episode))
        model = build_model(arch, _rng(cfg.seed, _STREAM_MODEL, episode))
        data_rng = _rng(cfg.seed, _STREAM_DATA, episode)
        losses = []
        try:
            for _ in range(cfg.matched_steps):
                _, value = syn_update(syn, model, train, data_rng, cfg, optimizer, episode)
                losses.append(value)
                pixels = syn.pixels.detach()
                for _ in range(cfg.inner_steps):
                    sgd_step(model, param_gradients(model, pixels, syn.labels), cfg.eta_net)
        except NonFiniteError as err:
            err.trace = list(trace)
            raise
        trace.append(EpisodeTrace(episode, arch.label, float(np.mean(losses))))
        if episode % 10 == 0 or episode == cfg.iterations - 1:
            log.info("episode %d/%d %s match_loss=%.4f", episode + 1, cfg.iterations, arch.label, trace[-1].match_loss)
        done = episode + 1
        if ckpt is not None and (done == cfg.iterations or (cfg.checkpoint_every and done % cfg.checkpoint_every == 0)):
            stamp(done)
            save_checkpoint(ckpt, syn, trace, optimizer)

    stamp(cfg.iterations)
    out = syn.detached()
    return out, trace
