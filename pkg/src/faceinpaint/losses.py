"""Generator loss terms, WGAN critic objectives and the frozen feature networks they use.

Frame tensors are ``(..., T, 3, H, W)`` in ``[-1, 1]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Protocol, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import frames_to_batch

TERMS = ("adv", "fer", "style", "vgg", "l1")
NUM_EXPRESSIONS = 7


class FeatureExtractor(Protocol):
    descriptor: str

    def layers(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Per-frame feature maps ``(N, C_l, H_l, W_l)`` for each tapped layer."""


class ExpressionClassifier(Protocol):
    descriptor: str

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """``(..., T, K)`` expression logits."""


def _freeze(module: nn.Module) -> None:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)


class RandomConvExtractor(nn.Module):
    """VGG-shaped conv stack with fixed seeded random weights.

    Stands in for an ImageNet VGG at desk scale; same call surface, never trained.
    """

    def __init__(self, widths: Sequence[int] = (16, 32, 64), convs_per_block: int = 2, seed: int = 0):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.blocks = nn.ModuleList()
        c_in = 3
        for w in widths:
            layers = []
            for _ in range(convs_per_block):
                conv = nn.Conv2d(c_in, w, 3, padding=1)
                with torch.no_grad():
                    nn.init.kaiming_normal_(conv.weight, generator=gen, nonlinearity="relu")
                    conv.bias.zero_()
                layers += [conv, nn.ReLU()]
                c_in = w
            self.blocks.append(nn.Sequential(*layers))
        self.descriptor = f"randcnn-{'-'.join(map(str, widths))}x{convs_per_block}-seed{seed}"
        _freeze(self)

    def train(self, mode: bool = True):
        return super().train(False)

    def layers(self, x: torch.Tensor) -> list[torch.Tensor]:
        f, _ = frames_to_batch(x)
        f = f.to(next(self.parameters()).dtype)
        feats = []
        for i, block in enumerate(self.blocks):
            if i:
                f = F.avg_pool2d(f, 2) if min(f.shape[-2:]) >= 2 else f
            f = block(f)
            feats.append(f)
        return feats

    def forward(self, x):
        return self.layers(x)


class VGGExtractor(nn.Module):
    """torchvision VGG19 features at relu1_1/2_1/3_1/4_1, weights loaded from a local file."""

    TAPS = (1, 6, 11, 20)

    def __init__(self, weights_path: str | None = None):
        super().__init__()
        from torchvision.models import vgg19  # optional dependency

        model = vgg19(weights=None)
        if weights_path:
            model.load_state_dict(torch.load(weights_path, map_location="cpu", weights_only=True))
        self.features = model.features[: max(self.TAPS) + 1]
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406])[:, None, None])
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225])[:, None, None])
        self.descriptor = f"vgg19:{weights_path or 'random'}"
        _freeze(self)

    def train(self, mode: bool = True):
        return super().train(False)

    def layers(self, x: torch.Tensor) -> list[torch.Tensor]:
        f, _ = frames_to_batch(x)
        f = ((f + 1) / 2 - self.mean.to(f.dtype)) / self.std.to(f.dtype)
        feats = []
        for i, layer in enumerate(self.features):
            f = layer(f)
            if i in self.TAPS:
                feats.append(f)
        return feats


class RandomExpressionClassifier(nn.Module):
    """Small seeded CNN producing ``K`` expression logits per frame; frozen."""

    def __init__(self, num_classes: int = NUM_EXPRESSIONS, width: int = 16, seed: int = 1):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.net = nn.Sequential(
            nn.Conv2d(3, width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(width, 2 * width, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(1), nn.Flatten(),
            nn.Linear(2 * width, num_classes),
        )
        with torch.no_grad():
            for m in self.net:
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    nn.init.kaiming_normal_(m.weight, a=0.2, generator=gen)
                    m.bias.zero_()
        self.num_classes = num_classes
        self.descriptor = f"randfer-k{num_classes}-w{width}-seed{seed}"
        _freeze(self)

    def train(self, mode: bool = True):
        return super().train(False)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        f, lead = frames_to_batch(x)
        out = self.net(f.to(next(self.parameters()).dtype))
        return out.reshape(*lead, self.num_classes)

    def forward(self, x):
        return self.logits(x)


def make_extractor(spec: str = "randcnn") -> nn.Module:
    """``randcnn`` | ``randcnn:<seed>`` | ``vgg19:<weights.pth>``."""
    name, _, arg = spec.partition(":")
    if name == "randcnn":
        return RandomConvExtractor(seed=int(arg) if arg else 0)
    if name == "vgg19":
        return VGGExtractor(arg or None)
    raise ValueError(f"unknown extractor {spec!r}")


# ---------------------------------------------------------------------------
# terms


def _check_shapes(out: torch.Tensor, gt: torch.Tensor) -> None:
    if out.shape != gt.shape:
        raise ValueError(f"shape mismatch: {tuple(out.shape)} vs {tuple(gt.shape)}")


def l1_loss(out: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    _check_shapes(out, gt)
    return (out - gt).abs().mean()


def gram(features: torch.Tensor) -> torch.Tensor:
    """``F F^T / (C H W)`` for ``(..., C, H, W)`` features."""
    c, h, w = features.shape[-3:]
    f = features.reshape(*features.shape[:-2], h * w)
    return f @ f.transpose(-1, -2) / (c * h * w)


def style_loss(out: torch.Tensor, gt: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    _check_shapes(out, gt)
    total = 0
    for fo, fg in zip(extractor.layers(out), extractor.layers(gt)):
        total = total + (gram(fo) - gram(fg)).abs().mean()
    return total


def perceptual_loss(out: torch.Tensor, gt: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    _check_shapes(out, gt)
    total = 0
    for fo, fg in zip(extractor.layers(out), extractor.layers(gt)):
        total = total + (fo - fg).abs().mean()
    return total


def fer_loss(out: torch.Tensor, gt: torch.Tensor, classifier: ExpressionClassifier) -> torch.Tensor:
    """Mean over frames of ``KL(softmax(gt logits) || softmax(out logits))``."""
    _check_shapes(out, gt)
    log_p = F.log_softmax(classifier.logits(gt), dim=-1)
    log_q = F.log_softmax(classifier.logits(out), dim=-1)
    kl = (log_p.exp() * (log_p - log_q)).sum(-1)
    return kl.mean()


def _scores(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x, dtype=torch.float64)


def wgan_g_loss(fake_scores) -> torch.Tensor:
    return -_scores(fake_scores).mean()


def wgan_d_loss(real_scores, fake_scores, gp_term=0.0, lambda_gp: float = 10.0) -> torch.Tensor:
    return _scores(fake_scores).mean() - _scores(real_scores).mean() + lambda_gp * gp_term


def gradient_penalty(critic_fn: Callable[[torch.Tensor], torch.Tensor], real: torch.Tensor,
                     fake: torch.Tensor, generator: torch.Generator | None = None) -> torch.Tensor:
    """``mean((||grad D(x_hat)||_2 - 1)^2)`` on per-clip random interpolates.

    ``real``/``fake`` are batched ``(B, ...)``; ``critic_fn`` returns ``(B,)`` scores.
    """
    b = real.shape[0]
    eps = torch.rand((b,) + (1,) * (real.dim() - 1), generator=generator, dtype=real.dtype)
    x_hat = (eps * real.detach() + (1 - eps) * fake.detach()).requires_grad_(True)
    scores = critic_fn(x_hat)
    (grad,) = torch.autograd.grad(scores.sum(), x_hat, create_graph=True)
    norms = grad.flatten(1).norm(dim=1)
    return ((norms - 1) ** 2).mean()


# ---------------------------------------------------------------------------
# weighting


@dataclass(frozen=True)
class LossWeights:
    adv: float = 1.0
    fer: float = 4.0
    style: float = 10.0
    vgg: float = 1.0
    l1: float = 1.0

    def __post_init__(self):
        for name in TERMS:
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"weight {name} must be finite and >= 0, got {v}")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(**{k: factor * v for k, v in asdict(self).items()})


@dataclass
class LossReport:
    adv: float
    fer: float
    style: float
    vgg: float
    l1: float
    total: float
    weights: LossWeights = field(default_factory=LossWeights)
    descriptor: str = ""
    critic: float | None = None
    gradient_penalty: float | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LossReport":
        d = dict(d)
        d["weights"] = LossWeights(**d["weights"])
        return cls(**d)


def weighted_total(terms: Mapping[str, torch.Tensor | float], weights: LossWeights):
    """Differentiable weighted sum; works on tensors or floats."""
    total = 0
    for name in TERMS:
        total = total + getattr(weights, name) * terms[name]
    return total


def total_generator_loss(terms: Mapping[str, float], weights: LossWeights = LossWeights(),
                         descriptor: str = "") -> LossReport:
    values = {name: float(terms[name]) for name in TERMS}
    total = math.fsum(getattr(weights, name) * values[name] for name in TERMS)
    return LossReport(**values, total=total, weights=weights, descriptor=descriptor)
