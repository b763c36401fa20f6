"""Probability-weighted model pools and the per-reinitialization sampler."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import ACTIVATIONS, MAIN_CONVNET, ModelSpec

PRESETS = ("baseline", "main-plus-similar", "heterogeneous-main", "uniform-heterogeneous")
VARIANT_ACTIVATIONS = ACTIVATIONS
VARIANT_NORMS = ("instancenorm", "batchnorm", "layernorm", "groupnorm")
VARIANT_POOLINGS = ("avgpooling", "maxpooling")
DEFAULT_MAIN_PROB = 0.9


@dataclass(frozen=True)
class RandomConvNet:
    """Generator of ConvNet variants with uniformly drawn activation/norm/pooling."""

    width: int = 128
    depth: int = 3

    def draw(self, rng: np.random.Generator) -> ModelSpec:
        act = VARIANT_ACTIVATIONS[rng.integers(len(VARIANT_ACTIVATIONS))]
        norm = VARIANT_NORMS[rng.integers(len(VARIANT_NORMS))]
        pool = VARIANT_POOLINGS[rng.integers(len(VARIANT_POOLINGS))]
        return ModelSpec("convnet", self.width, self.depth, act, norm, pool)

    def to_dict(self):
        return {"random_convnet": {"width": self.width, "depth": self.depth}}


@dataclass(frozen=True)
class PoolEntry:
    source: ModelSpec | RandomConvNet
    probability: float

    def draw(self, rng: np.random.Generator) -> ModelSpec:
        if isinstance(self.source, ModelSpec):
            return self.source
        return self.source.draw(rng)

    def to_dict(self):
        src = self.source.to_dict()
        return {"source": src, "probability": self.probability}


@dataclass(frozen=True)
class ModelPool:
    entries: tuple[PoolEntry, ...]
    preset_name: str = "custom"
    _cum: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.entries:
            raise ValueError("a model pool needs at least one entry")
        probs = np.array([e.probability for e in self.entries], dtype=np.float64)
        if (probs <= 0).any() or (probs > 1).any():
            raise ValueError("entry probabilities must lie in (0, 1]")
        if abs(probs.sum() - 1.0) > 1e-9:
            raise ValueError(f"entry probabilities sum to {probs.sum()!r}, not 1")
        object.__setattr__(self, "_cum", np.cumsum(probs))

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([e.probability for e in self.entries])

    def to_dict(self):
        return {"preset": self.preset_name, "entries": [e.to_dict() for e in self.entries]}


def make_pool(preset: str, main_prob: float = DEFAULT_MAIN_PROB) -> ModelPool:
    """Build one of the named pools.

    ``main_prob`` only affects the presets that single out a main model.
    """
    if preset == "baseline":
        return ModelPool((PoolEntry(MAIN_CONVNET, 1.0),), preset)
    if not 0 < main_prob <= 1:
        raise ValueError("main_prob must lie in (0, 1]")
    if preset == "main-plus-similar":
        if main_prob == 1.0:
            return ModelPool((PoolEntry(MAIN_CONVNET, 1.0),), preset)
        return ModelPool((PoolEntry(MAIN_CONVNET, main_prob),
                          PoolEntry(RandomConvNet(), 1.0 - main_prob)), preset)
    others = [ModelSpec(family=f) for f in ("lenet", "alexnet", "vgg11")]
    if preset == "heterogeneous-main":
        rest = (1.0 - main_prob) / 3
        return ModelPool((PoolEntry(MAIN_CONVNET, main_prob),
                          *(PoolEntry(s, rest) for s in others)), preset)
    if preset == "uniform-heterogeneous":
        return ModelPool(tuple(PoolEntry(s, 0.25) for s in (MAIN_CONVNET, *others)), preset)
    raise ValueError(f"unknown pool preset {preset!r}; expected one of {PRESETS}")


def sample_index(pool: ModelPool, rng: np.random.Generator) -> int:
    u = rng.random()
    return min(int(np.searchsorted(pool._cum, u, side="right")), len(pool.entries) - 1)


def sample_spec(pool: ModelPool, rng: np.random.Generator) -> ModelSpec:
    """Pick an entry by probability, then draw its knobs if it is randomized."""
    return pool.entries[sample_index(pool, rng)].draw(rng)
