"""The 13-layer gated-TSM inpainting generator and its input/output plumbing."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import GatedTSMConv, SelfAttention, batch_to_frames, frames_to_batch
from .temporal_shift import MODES, ONLINE, ShiftSpec
from .video_data import FrameSequence, InpaintingSample

log = logging.getLogger(__name__)

INPUT_CHANNELS = 8  # masked RGB + mask + landmark heatmap + reference RGB
NUM_GATED_CONVS = 13
DILATIONS = (2, 4, 8, 16)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "conv" | "attention" | "upsample"
    name: str
    kernel_size: int = 1
    stride: int = 1
    dilation: int = 1
    out_channels: int = 0
    activation: str = "lrelu"


def default_layer_plan(base_channels: int = 32) -> list[LayerSpec]:
    b = base_channels
    plan = [
        LayerSpec("conv", "L1", 5, 1, 1, b),
        LayerSpec("conv", "L2", 4, 2, 1, 2 * b),
        LayerSpec("conv", "L3", 4, 2, 1, 4 * b),
        LayerSpec("attention", "A1"),
        LayerSpec("conv", "L4", 3, 1, 1, 4 * b),
    ]
    plan += [LayerSpec("conv", f"L{5 + i}", 3, 1, d, 4 * b) for i, d in enumerate(DILATIONS)]
    plan += [
        LayerSpec("attention", "A2"),
        LayerSpec("conv", "L9", 3, 1, 1, 4 * b),
        LayerSpec("upsample", "U1"),
        LayerSpec("conv", "L10", 3, 1, 1, 2 * b),
        LayerSpec("upsample", "U2"),
        LayerSpec("conv", "L11", 3, 1, 1, b),
        LayerSpec("conv", "L12", 3, 1, 1, max(b // 2, 1)),
        LayerSpec("conv", "L13", 3, 1, 1, 3, "tanh"),
    ]
    return plan


@dataclass
class GeneratorConfig:
    base_channels: int = 32
    shift_mode: str = ONLINE
    input_channels: int = INPUT_CHANNELS
    shift_fraction: str = "1/8"
    learnable_shift: bool = True
    attention_reduction: int = 8
    layer_plan: list[LayerSpec] = field(default_factory=list)

    def __post_init__(self):
        if not self.layer_plan:
            self.layer_plan = default_layer_plan(self.base_channels)
        self.layer_plan = [l if isinstance(l, LayerSpec) else LayerSpec(**l) for l in self.layer_plan]
        if self.shift_mode not in MODES:
            raise ConfigurationError(f"shift_mode must be one of {MODES}")
        self.validate()

    @property
    def shift(self) -> ShiftSpec:
        return ShiftSpec(self.shift_mode, Fraction(self.shift_fraction))

    @property
    def convs(self) -> list[LayerSpec]:
        return [l for l in self.layer_plan if l.kind == "conv"]

    def validate(self) -> None:
        convs = self.convs
        if len(convs) != NUM_GATED_CONVS:
            raise ConfigurationError(f"generator needs exactly {NUM_GATED_CONVS} gated convs, got {len(convs)}")
        if convs[0].kernel_size != 5 or convs[0].stride != 1:
            raise ConfigurationError("first layer must be a 5x5 stride-1 conv")
        for l in convs[1:]:
            if l.stride == 2 and l.kernel_size != 4:
                raise ConfigurationError(f"{l.name}: down-sampling layers must be 4x4")
            if l.stride == 1 and l.kernel_size != 3:
                raise ConfigurationError(f"{l.name}: non-initial stride-1 convs must be 3x3")
        dil = [l.dilation for l in convs if l.dilation > 1]
        if tuple(dil) != DILATIONS:
            raise ConfigurationError(f"dilated layers must use {DILATIONS}, got {tuple(dil)}")
        if convs[-1].out_channels != 3:
            raise ConfigurationError("last conv must produce 3 channels")
        kinds = {l.kind for l in self.layer_plan}
        if not kinds <= {"conv", "attention", "upsample"}:
            raise ConfigurationError(f"unknown layer kinds {kinds}")
        downs = sum(l.stride == 2 for l in convs)
        ups = sum(l.kind == "upsample" for l in self.layer_plan)
        if downs != ups:
            raise ConfigurationError(f"{downs} down-sampling layers but {ups} up-sampling steps")

    @property
    def scale(self) -> int:
        return 2 ** sum(l.stride == 2 for l in self.convs)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        return cls(**d)


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = config = config or GeneratorConfig()
        config.validate()
        self.layers = nn.ModuleDict()
        channels = config.input_channels
        for spec in config.layer_plan:
            if spec.kind == "conv":
                self.layers[spec.name] = GatedTSMConv(
                    channels, spec.out_channels, spec.kernel_size, spec.stride, spec.dilation,
                    shift=config.shift, learnable=config.learnable_shift, activation=spec.activation)
                channels = spec.out_channels
            elif spec.kind == "attention":
                self.layers[spec.name] = SelfAttention(channels, config.attention_reduction)
        n_params = sum(p.numel() for p in self.parameters())
        log.info("generator: %d parameters, shift=%s, base=%d", n_params, config.shift_mode, config.base_channels)

    @property
    def gated_convs(self) -> list[GatedTSMConv]:
        return [m for m in self.layers.values() if isinstance(m, GatedTSMConv)]

    @property
    def attention_layers(self) -> list[SelfAttention]:
        return [m for m in self.layers.values() if isinstance(m, SelfAttention)]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(..., T, 8, H, W)`` conditioned input to raw ``(..., T, 3, H, W)`` in (-1, 1)."""
        if x.shape[-3] != self.config.input_channels:
            raise ConfigurationError(f"expected {self.config.input_channels} input channels, got {x.shape[-3]}")
        h, w = x.shape[-2:]
        if h % self.config.scale or w % self.config.scale:
            raise ConfigurationError(f"H and W must be multiples of {self.config.scale}, got {h}x{w}")
        for spec in self.config.layer_plan:
            if spec.kind == "upsample":
                f, lead = frames_to_batch(x)
                x = batch_to_frames(F.interpolate(f, scale_factor=2, mode="nearest"), lead)
            else:
                x = self.layers[spec.name](x)
        return x


def assemble_input(sample: InpaintingSample) -> torch.Tensor:
    """Stack ``[masked RGB, mask, landmarks, reference RGB]`` into ``T x 8 x H x W``."""
    T, H, W = sample.ground_truth.shape
    if sample.reference.shape != (H, W, 3):
        raise ValueError(f"reference shape {sample.reference.shape} does not match {(H, W, 3)}")
    masked = torch.from_numpy(sample.masked_frames.frames).permute(0, 3, 1, 2)
    mask = torch.from_numpy(sample.masks.masks.astype(np.float32))[:, None]
    landmarks = torch.from_numpy(np.asarray(sample.landmarks.maps, dtype=np.float32))[:, None]
    if mask.shape[-2:] != (H, W) or landmarks.shape[-2:] != (H, W):
        raise ValueError("mask/landmark maps disagree with frame size")
    reference = torch.from_numpy(sample.reference).permute(2, 0, 1)[None].expand(T, 3, H, W)
    return torch.cat([masked, mask, landmarks, reference], dim=1).contiguous()


def composite(raw: torch.Tensor, mask: torch.Tensor, masked_frames: torch.Tensor) -> torch.Tensor:
    """Generated pixels inside the mask, input pixels (bit-exact) outside.

    ``mask`` broadcasts over channels, e.g. ``(..., T, 1, H, W)``.
    """
    return torch.where(mask > 0.5, raw, masked_frames)


def composite_sample(raw: FrameSequence | np.ndarray, sample: InpaintingSample) -> FrameSequence:
    raw = raw.frames if isinstance(raw, FrameSequence) else np.asarray(raw, dtype=np.float32)
    if raw.shape != sample.masked_frames.frames.shape:
        raise ValueError(f"raw shape {raw.shape} does not match {sample.masked_frames.frames.shape}")
    occluded = sample.masks.masks.astype(bool)[..., None]
    return FrameSequence(np.where(occluded, raw, sample.masked_frames.frames))


@torch.no_grad()
def inpaint_sample(generator: Generator, sample: InpaintingSample) -> FrameSequence:
    """Run the generator on one sample and composite the result."""
    param = next(generator.parameters())
    x = assemble_input(sample).to(param.dtype)
    raw = generator(x).permute(0, 2, 3, 1).cpu().numpy().astype(np.float32)
    return composite_sample(raw, sample)
