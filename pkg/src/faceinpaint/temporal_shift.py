"""Fixed and learnable temporal shifts over ``(..., T, C, H, W)`` feature clips.

The time axis is always dim ``-4`` so single clips ``(T, C, H, W)`` and
batches ``(B, T, C, H, W)`` go through the same code. Temporal neighbours
outside the clip are zeros.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
import math

import torch
import torch.nn as nn

OFFLINE = "offline"
ONLINE = "online"
MODES = (OFFLINE, ONLINE)

DEFAULT_FRACTION = Fraction(1, 8)


@dataclass(frozen=True)
class ShiftSpec:
    mode: str = OFFLINE
    fraction: Fraction = DEFAULT_FRACTION

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        frac = Fraction(self.fraction)
        if not 0 < frac <= Fraction(1, 2):
            raise ValueError(f"fraction must lie in (0, 1/2], got {frac}")
        object.__setattr__(self, "fraction", frac)

    def fold(self, channels: int) -> int:
        """Channels moved per direction, ``floor(fraction * C)``."""
        return math.floor(self.fraction * channels)


def past_frames(x: torch.Tensor) -> torch.Tensor:
    """``out[t] = x[t-1]``, zero at ``t = 0``."""
    out = torch.zeros_like(x)
    out[..., 1:, :, :, :] = x[..., :-1, :, :, :]
    return out


def future_frames(x: torch.Tensor) -> torch.Tensor:
    """``out[t] = x[t+1]``, zero at ``t = T-1``."""
    out = torch.zeros_like(x)
    out[..., :-1, :, :, :] = x[..., 1:, :, :, :]
    return out


def temporal_shift(x: torch.Tensor, spec: ShiftSpec = ShiftSpec()) -> torch.Tensor:
    """Move channel groups to their temporal neighbours.

    offline: channels ``[0, k)`` come from ``t-1`` and ``[k, 2k)`` from ``t+1``.
    online:  only channels ``[0, k)`` are shifted, from ``t-1``.
    """
    if x.dim() < 4:
        raise ValueError(f"expected (..., T, C, H, W), got shape {tuple(x.shape)}")
    k = spec.fold(x.shape[-3])
    if k == 0:
        return x
    out = x.clone()
    out[..., :k, :, :] = past_frames(x[..., :k, :, :])
    if spec.mode == OFFLINE:
        out[..., k:2 * k, :, :] = future_frames(x[..., k:2 * k, :, :])
    return out


def shift_kernels(channels: int, spec: ShiftSpec = ShiftSpec()) -> torch.Tensor:
    """Per-channel ``[past, present, future]`` taps that reproduce :func:`temporal_shift`."""
    k = spec.fold(channels)
    kern = torch.zeros(channels, 3)
    kern[:, 1] = 1.0
    kern[:k] = torch.tensor([1.0, 0.0, 0.0])
    if spec.mode == OFFLINE:
        kern[k:2 * k] = torch.tensor([0.0, 0.0, 1.0])
    return kern


def learnable_shift(x: torch.Tensor, kernels: torch.Tensor) -> torch.Tensor:
    """``out[t, c] = k[c,0] x[t-1, c] + k[c,1] x[t, c] + k[c,2] x[t+1, c]``."""
    if kernels.shape != (x.shape[-3], 3):
        raise ValueError(f"kernels must be ({x.shape[-3]}, 3), got {tuple(kernels.shape)}")
    taps = kernels.to(x.dtype)[:, :, None, None]
    return taps[:, 0] * past_frames(x) + taps[:, 1] * x + taps[:, 2] * future_frames(x)


class TemporalShift(nn.Module):
    """Parameter-free TSM."""

    def __init__(self, spec: ShiftSpec = ShiftSpec()):
        super().__init__()
        self.spec = spec

    @property
    def mode(self) -> str:
        return self.spec.mode

    def forward(self, x):
        return temporal_shift(x, self.spec)

    def extra_repr(self):
        return f"mode={self.spec.mode}, fraction={self.spec.fraction}"


class LearnableTemporalShift(nn.Module):
    """Per-channel 3-tap temporal kernel (the learnable half of LGTSM).

    Initialised to the fixed TSM pattern for the given spec. In online mode
    the future tap is multiplied by a constant zero, so it neither affects the
    output nor receives gradient.
    """

    def __init__(self, channels: int, spec: ShiftSpec = ShiftSpec(),
                 kernels: torch.Tensor | None = None):
        super().__init__()
        self.spec = spec
        if kernels is None:
            kernels = shift_kernels(channels, spec)
        kernels = torch.as_tensor(kernels, dtype=torch.get_default_dtype()).clone()
        if kernels.shape != (channels, 3):
            raise ValueError(f"kernels must be ({channels}, 3), got {tuple(kernels.shape)}")
        if not torch.isfinite(kernels).all():
            raise ValueError("kernels must be finite")
        if spec.mode == ONLINE and bool((kernels[:, 2] != 0).any()):
            raise ValueError("online shift kernels must have a zero future tap")
        self.kernels = nn.Parameter(kernels)
        tap_mask = torch.tensor([1.0, 1.0, 0.0 if spec.mode == ONLINE else 1.0])
        self.register_buffer("tap_mask", tap_mask, persistent=False)

    @property
    def mode(self) -> str:
        return self.spec.mode

    def effective_kernels(self) -> torch.Tensor:
        return self.kernels * self.tap_mask.to(self.kernels.dtype)

    def forward(self, x):
        return learnable_shift(x, self.effective_kernels())

    def extra_repr(self):
        return f"channels={self.kernels.shape[0]}, mode={self.spec.mode}"
