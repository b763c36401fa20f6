"""Architecture descriptors, network construction, losses and the inner SGD step.

ConvNet blocks are ``conv3x3 -> norm -> activation -> pool2x2`` repeated
``depth`` times followed by a linear classifier. The other five families are
fixed CIFAR-scale definitions:

* ``mlp``: 3072 -> width -> width -> 10 with ReLU (width defaults to 128).
* ``lenet``: conv5(6) -> maxpool -> conv5(16) -> maxpool -> fc120 -> fc84 -> fc10, ReLU.
* ``alexnet``: conv5(128) -> conv5(192) -> conv3(256) -> conv3(192) -> conv3(192),
  ReLU, three 2x2 max-pools, linear head on 192x4x4.
* ``vgg11``: configuration A with instance normalization after every conv.
* ``resnet18``: basic blocks [2, 2, 2, 2] with batch norm, 3x3 stem, no stem max-pool.
"""
from __future__ import annotations

import copy
import dataclasses
import json
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import SpecError

FAMILIES = ("convnet", "mlp", "lenet", "alexnet", "vgg11", "resnet18")
ACTIVATIONS = ("relu", "sigmoid", "leakyrelu", "swish")
NORMS = ("instancenorm", "batchnorm", "layernorm", "groupnorm", "none")
POOLINGS = ("avgpooling", "maxpooling")
GROUPNORM_GROUPS = 4
LEAKY_SLOPE = 0.01
NUM_CLASSES = 10


@dataclass(frozen=True)
class ModelSpec:
    family: str = "convnet"
    width: int = 128
    depth: int = 3
    activation: str = "relu"
    norm: str = "instancenorm"
    pooling: str = "avgpooling"

    def validate(self) -> "ModelSpec":
        if self.family not in FAMILIES:
            raise SpecError(f"unknown family {self.family!r}")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")
        if self.norm not in NORMS:
            raise SpecError(f"unknown norm {self.norm!r}")
        if self.pooling not in POOLINGS:
            raise SpecError(f"unknown pooling {self.pooling!r}")
        if self.width < 1 or self.depth < 1:
            raise SpecError("width and depth must be positive")
        if self.family == "convnet" and 32 >> self.depth < 1:
            raise SpecError(f"depth {self.depth} pools a 32x32 input below one pixel")
        if self.family == "convnet" and self.norm == "groupnorm" and self.width % GROUPNORM_GROUPS:
            raise SpecError(f"groupnorm needs width divisible by {GROUPNORM_GROUPS}")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - fields
        if unknown:
            raise SpecError(f"unknown ModelSpec keys {sorted(unknown)}")
        return cls(**d).validate()

    @classmethod
    def from_json(cls, s: str) -> "ModelSpec":
        return cls.from_dict(json.loads(s))

    @property
    def label(self) -> str:
        if self.family != "convnet":
            return self.family
        return f"convnet-w{self.width}d{self.depth}-{self.activation}-{self.norm}-{self.pooling}"


MAIN_CONVNET = ModelSpec()
EVAL_FAMILIES = ("mlp", "lenet", "alexnet", "vgg11", "resnet18")
DISPLAY_NAMES = {"convnet": "ConvNet", "mlp": "MLP", "lenet": "LeNet", "alexnet": "AlexNet",
                 "vgg11": "VGG11", "resnet18": "ResNet18"}


def spec_for(name: str) -> ModelSpec:
    """Canonical spec for a family name (the main ConvNet for ``convnet``)."""
    return ModelSpec(family=name.lower()).validate()


class Swish(nn.Module):
    def forward(self, x):
        return x * torch.sigmoid(x)


def make_activation(name: str) -> nn.Module:
    if name == "relu":
        return nn.ReLU()
    if name == "sigmoid":
        return nn.Sigmoid()
    if name == "leakyrelu":
        return nn.LeakyReLU(LEAKY_SLOPE)
    if name == "swish":
        return Swish()
    raise SpecError(f"unknown activation {name!r}")


def make_norm(name: str, channels: int) -> nn.Module:
    if name == "instancenorm":
        return nn.GroupNorm(channels, channels, affine=True)
    if name == "batchnorm":
        return nn.BatchNorm2d(channels)
    if name == "layernorm":
        # normalizes over (C, H, W) per sample, per-channel affine
        return nn.GroupNorm(1, channels, affine=True)
    if name == "groupnorm":
        return nn.GroupNorm(GROUPNORM_GROUPS, channels, affine=True)
    if name == "none":
        return nn.Identity()
    raise SpecError(f"unknown norm {name!r}")


def conv_bias(norm: str) -> bool:
    """Per-channel normalization cancels a conv bias exactly; such a bias would only carry round-off gradients."""
    return norm not in ("instancenorm", "batchnorm")


class ConvNet(nn.Module):
    def __init__(self, width=128, depth=3, activation="relu", norm="instancenorm",
                 pooling="avgpooling", num_classes=NUM_CLASSES):
        super().__init__()
        layers = []
        channels, size = 3, 32
        for _ in range(depth):
            layers += [nn.Conv2d(channels, width, 3, padding=1, bias=conv_bias(norm)), make_norm(norm, width),
                       make_activation(activation),
                       nn.AvgPool2d(2) if pooling == "avgpooling" else nn.MaxPool2d(2)]
            channels, size = width, size // 2
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Linear(width * size * size, num_classes)

    def forward(self, x):
        return self.classifier(self.features(x).flatten(1))


class MLP(nn.Module):
    def __init__(self, width=128, num_classes=NUM_CLASSES):
        super().__init__()
        self.net = nn.Sequential(nn.Flatten(), nn.Linear(3 * 32 * 32, width), nn.ReLU(),
                                 nn.Linear(width, width), nn.ReLU(), nn.Linear(width, num_classes))

    def forward(self, x):
        return self.net(x)


class LeNet(nn.Module):
    def __init__(self, num_classes=NUM_CLASSES):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 6, 5), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(6, 16, 5), nn.ReLU(), nn.MaxPool2d(2))
        self.classifier = nn.Sequential(
            nn.Linear(16 * 5 * 5, 120), nn.ReLU(), nn.Linear(120, 84), nn.ReLU(),
            nn.Linear(84, num_classes))

    def forward(self, x):
        return self.classifier(self.features(x).flatten(1))


class AlexNet(nn.Module):
    def __init__(self, num_classes=NUM_CLASSES):
        super().__init__()
        self.features = nn.Sequential(
            nn.Conv2d(3, 128, 5, padding=2), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(128, 192, 5, padding=2), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(192, 256, 3, padding=1), nn.ReLU(),
            nn.Conv2d(256, 192, 3, padding=1), nn.ReLU(),
            nn.Conv2d(192, 192, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2))
        self.classifier = nn.Linear(192 * 4 * 4, num_classes)

    def forward(self, x):
        return self.classifier(self.features(x).flatten(1))


VGG11_CFG = (64, "M", 128, "M", 256, 256, "M", 512, 512, "M", 512, 512, "M")


class VGG11(nn.Module):
    def __init__(self, num_classes=NUM_CLASSES, norm="instancenorm"):
        super().__init__()
        layers, channels = [], 3
        for v in VGG11_CFG:
            if v == "M":
                layers.append(nn.MaxPool2d(2))
            else:
                layers += [nn.Conv2d(channels, v, 3, padding=1, bias=conv_bias(norm)), make_norm(norm, v), nn.ReLU()]
                channels = v
        self.features = nn.Sequential(*layers)
        self.classifier = nn.Linear(512, num_classes)

    def forward(self, x):
        return self.classifier(self.features(x).flatten(1))


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet18(nn.Module):
    def __init__(self, num_classes=NUM_CLASSES):
        super().__init__()
        self.conv1 = nn.Conv2d(3, 64, 3, 1, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(64)
        blocks, cin = [], 64
        for cout, stride in ((64, 1), (128, 2), (256, 2), (512, 2)):
            blocks += [BasicBlock(cin, cout, stride), BasicBlock(cout, cout, 1)]
            cin = cout
        self.layers = nn.Sequential(*blocks)
        self.classifier = nn.Linear(512, num_classes)

    def forward(self, x):
        out = self.layers(F.relu(self.bn1(self.conv1(x))))
        return self.classifier(F.adaptive_avg_pool2d(out, 1).flatten(1))


def _construct(spec: ModelSpec) -> nn.Module:
    if spec.family == "convnet":
        return ConvNet(spec.width, spec.depth, spec.activation, spec.norm, spec.pooling)
    if spec.family == "mlp":
        return MLP(spec.width)
    if spec.family == "lenet":
        return LeNet()
    if spec.family == "alexnet":
        return AlexNet()
    if spec.family == "vgg11":
        return VGG11()
    return ResNet18()


@torch.no_grad()
def _initialize(module: nn.Module, gen: torch.Generator) -> None:
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            bound = 1.0 / math.sqrt(m.weight[0].numel())
            m.weight.copy_(torch.rand(m.weight.shape, generator=gen, dtype=m.weight.dtype) * 2 * bound - bound)
            if m.bias is not None:
                m.bias.zero_()
        elif isinstance(m, (nn.GroupNorm, nn.BatchNorm2d, nn.LayerNorm)):
            if getattr(m, "weight", None) is not None:
                m.weight.fill_(1.0)
                m.bias.zero_()


@dataclass
class ModelInstance:
    spec: ModelSpec
    module: nn.Module
    init_seed: int

    @property
    def params(self) -> list[tuple[str, torch.Tensor]]:
        return list(self.module.named_parameters())

    def __call__(self, x):
        return self.module(x)

    def copy(self) -> "ModelInstance":
        return ModelInstance(self.spec, copy.deepcopy(self.module), self.init_seed)

    def param_vector(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.module.parameters()])


@dataclass
class LayerGradients:
    names: tuple[str, ...]
    grads: tuple[torch.Tensor, ...]

    def __len__(self):
        return len(self.grads)

    def __iter__(self):
        return iter(zip(self.names, self.grads))

    def detach(self) -> "LayerGradients":
        return LayerGradients(self.names, tuple(g.detach() for g in self.grads))


def build_model(spec: ModelSpec, rng=0, dtype=torch.float32) -> ModelInstance:
    """Fresh network for ``spec``; ``rng`` is an int seed or a numpy Generator."""
    spec.validate()
    seed = int(rng) if isinstance(rng, int) else int(rng.integers(2**62))
    module = _construct(spec).to(dtype)
    _initialize(module, torch.Generator().manual_seed(seed))
    module.train()
    return ModelInstance(spec, module, seed)


def _check_batch(images: torch.Tensor, labels: torch.Tensor) -> None:
    if images.ndim != 4 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise ValueError(f"batch shape mismatch: images {tuple(images.shape)}, labels {tuple(labels.shape)}")
    if images.shape[0] == 0:
        raise ValueError("empty batch")


def loss_ce(model: ModelInstance, images: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    _check_batch(images, labels)
    return F.cross_entropy(model.module(images), labels)


def param_gradients(model: ModelInstance, images, labels, create_graph=False) -> LayerGradients:
    """Gradients of :func:`loss_ce` w.r.t. every parameter, in ``named_parameters`` order.

    With ``create_graph=True`` the result stays differentiable w.r.t. ``images``.
    """
    names, params = zip(*model.params)
    loss = loss_ce(model, images, labels)
    grads = torch.autograd.grad(loss, params, create_graph=create_graph)
    if not create_graph:
        grads = tuple(g.detach() for g in grads)
    return LayerGradients(names, grads)


@torch.no_grad()
def sgd_step(model: ModelInstance, grads: LayerGradients, eta: float) -> ModelInstance:
    """In-place ``theta <- theta - eta * grad``; returns ``model``."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    params = model.params
    if len(params) != len(grads) or any(p.shape != g.shape for (_, p), g in zip(params, grads.grads)):
        raise ValueError("gradients are not shape-congruent with the model parameters")
    for (_, p), g in zip(params, grads.grads):
        p.sub_(eta * g)
    return model
