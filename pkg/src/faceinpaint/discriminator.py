"""TSM Wasserstein critic: six per-frame convs with temporal shifts, one score per clip."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import LEAKY_SLOPE, batch_to_frames, frames_to_batch
from .temporal_shift import MODES, OFFLINE, ShiftSpec, TemporalShift
from .video_data import FrameSequence, MaskSequence

NUM_CRITIC_CONVS = 6


@dataclass
class CriticConfig:
    channels: list[int] = field(default_factory=lambda: [32, 64, 128, 128, 128, 1])
    kernel_sizes: list[int] = field(default_factory=lambda: [4, 4, 4, 4, 4, 3])
    strides: list[int] = field(default_factory=lambda: [2, 2, 2, 2, 2, 1])
    shift_mode: str = OFFLINE
    shift_fraction: str = "1/8"
    in_channels: int = 4  # RGB + mask

    def __post_init__(self):
        self.validate()

    @classmethod
    def scaled(cls, base: int, **kw) -> "CriticConfig":
        return cls(channels=[base, 2 * base, 4 * base, 4 * base, 4 * base, 1], **kw)

    @property
    def shift(self) -> ShiftSpec:
        return ShiftSpec(self.shift_mode, Fraction(self.shift_fraction))

    def validate(self) -> None:
        if not len(self.channels) == len(self.kernel_sizes) == len(self.strides) == NUM_CRITIC_CONVS:
            raise ValueError(f"critic needs exactly {NUM_CRITIC_CONVS} conv layers")
        if self.channels[-1] != 1:
            raise ValueError("critic head must output one channel")
        if self.shift_mode not in MODES:
            raise ValueError(f"shift_mode must be one of {MODES}")

    @property
    def min_size(self) -> int:
        """Smallest square input every layer can still convolve (padding 1)."""
        size = 1
        for k, s in zip(reversed(self.kernel_sizes), reversed(self.strides)):
            size = max((size - 1) * s + k - 2, 1)
        return size

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CriticConfig":
        return cls(**d)


class Critic(nn.Module):
    def __init__(self, config: CriticConfig | None = None):
        super().__init__()
        self.config = config = config or CriticConfig()
        config.validate()
        self.shifts = nn.ModuleList()
        self.convs = nn.ModuleList()
        c_in = config.in_channels
        for c_out, k, s in zip(config.channels, config.kernel_sizes, config.strides):
            self.shifts.append(TemporalShift(config.shift))
            self.convs.append(nn.Conv2d(c_in, c_out, k, stride=s, padding=1))
            c_in = c_out

    def forward(self, frames: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
        """``frames (..., T, 3, H, W)``, ``masks (..., T, 1, H, W)`` -> raw scores ``(...)``."""
        if frames.shape[:-3] != masks.shape[:-3] or frames.shape[-2:] != masks.shape[-2:]:
            raise ValueError(f"frames {tuple(frames.shape)} and masks {tuple(masks.shape)} disagree")
        if min(frames.shape[-2:]) < self.config.min_size:
            raise ValueError(f"critic needs frames of at least {self.config.min_size}px, got {tuple(frames.shape[-2:])}")
        x = torch.cat([frames, masks.to(frames.dtype)], dim=-3)
        if x.shape[-3] != self.config.in_channels:
            raise ValueError(f"critic expects {self.config.in_channels} channels, got {x.shape[-3]}")
        last = len(self.convs) - 1
        for i, (shift, conv) in enumerate(zip(self.shifts, self.convs)):
            f, lead = frames_to_batch(shift(x))
            f = conv(f)
            if i < last:
                f = F.leaky_relu(f, LEAKY_SLOPE)
            x = batch_to_frames(f, lead)
        # mean over T, C(=1), H, W
        return x.flatten(-4).mean(-1)


def critic_forward(critic: Critic, frames: FrameSequence, masks: MaskSequence) -> float:
    param = next(critic.parameters())
    f = torch.from_numpy(frames.frames).permute(0, 3, 1, 2).to(param.dtype)
    m = torch.from_numpy(masks.masks.astype(np.float32))[:, None].to(param.dtype)
    with torch.no_grad():
        return float(critic(f, m))
