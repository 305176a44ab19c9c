import math

import pytest
import torch

from faceinpaint.discriminator import Critic, CriticConfig, critic_forward
from faceinpaint.video_data import generate_static_mask, synthetic_clip
from oracles import grad_rel_err


def test_six_layers_and_contract():
    torch.manual_seed(0)
    critic = Critic(CriticConfig.scaled(8))
    assert len(critic.convs) == 6
    frames, _, _ = synthetic_clip(0, 8, (64, 64))
    score = critic_forward(critic, frames, generate_static_mask(0, 8, (64, 64)))
    assert isinstance(score, float) and math.isfinite(score)
    again = critic_forward(critic, frames, generate_static_mask(0, 8, (64, 64)))
    assert score == again


def test_default_widths():
    cfg = CriticConfig()
    assert cfg.channels == [32, 64, 128, 128, 128, 1]
    assert cfg.kernel_sizes == [4] * 5 + [3] and cfg.strides == [2] * 5 + [1]
    assert cfg.shift_mode == "offline" and cfg.in_channels == 4


def test_bad_configs():
    with pytest.raises(ValueError):
        CriticConfig(channels=[8, 1], kernel_sizes=[4, 3], strides=[2, 1])
    with pytest.raises(ValueError):
        CriticConfig(channels=[8, 8, 8, 8, 8, 2])
    with pytest.raises(ValueError):
        CriticConfig.scaled(8, shift_mode="sideways")
    assert CriticConfig.from_dict(CriticConfig.scaled(8).to_dict()) == CriticConfig.scaled(8)


def test_batched_scores_and_shape_errors():
    torch.manual_seed(0)
    critic = Critic(CriticConfig.scaled(4))
    frames = torch.rand(3, 4, 3, 32, 32) * 2 - 1
    masks = torch.zeros(3, 4, 1, 32, 32)
    scores = critic(frames, masks)
    assert scores.shape == (3,)
    for b in range(3):
        torch.testing.assert_close(critic(frames[b], masks[b]), scores[b])
    with pytest.raises(ValueError):
        critic(frames, masks[:, :2])


def test_score_is_unbounded_raw_value():
    torch.manual_seed(0)
    critic = Critic(CriticConfig.scaled(4))
    with torch.no_grad():
        critic.convs[-1].bias.fill_(50.0)
    assert critic(torch.zeros(2, 3, 32, 32), torch.zeros(2, 1, 32, 32)) > 10


def test_critic_uses_neighbouring_frames():
    torch.manual_seed(0)
    critic = Critic(CriticConfig.scaled(8)).double()
    x = torch.rand(3, 3, 32, 32, dtype=torch.float64)
    m = torch.zeros(3, 1, 32, 32, dtype=torch.float64)
    base = critic(x, m)
    y = x.clone()
    y[2] += 1.0
    assert critic(y, m) != base


def test_input_gradient_matches_finite_differences():
    torch.manual_seed(1)
    critic = Critic(CriticConfig.scaled(8)).double()
    masks = (torch.rand(2, 1, 32, 32) > 0.5).double()
    x = torch.rand(2, 3, 32, 32, dtype=torch.float64) * 2 - 1
    # a small patch keeps the number of finite-difference evaluations reasonable
    patch = x[:, :, 10:14, 10:14].clone()

    def fn(p):
        y = x.clone()
        y[:, :, 10:14, 10:14] = p
        return critic(y, masks)

    assert grad_rel_err(fn, patch) < 1e-4


def test_too_small_frames_rejected():
    critic = Critic(CriticConfig.scaled(4))
    assert critic.config.min_size == 32
    with pytest.raises(ValueError, match="at least 32"):
        critic(torch.zeros(2, 3, 16, 16), torch.zeros(2, 1, 16, 16))
