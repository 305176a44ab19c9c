from fractions import Fraction

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from faceinpaint.temporal_shift import (LearnableTemporalShift, ShiftSpec, learnable_shift, shift_kernels,
                                        temporal_shift)
from oracles import grad_rel_err, learnable_shift_loop, shift_loop


def test_offline_example_t3_c8():
    x = torch.arange(3 * 8 * 2 * 2, dtype=torch.float64).reshape(3, 8, 2, 2)
    out = temporal_shift(x, ShiftSpec("offline", Fraction(1, 8)))
    assert torch.equal(out[1, 0], x[0, 0])
    assert torch.equal(out[1, 1], x[2, 1])
    assert torch.equal(out[:, 2:], x[:, 2:])


@pytest.mark.parametrize("mode", ["offline", "online"])
def test_zero_padding_at_boundaries(mode):
    x = torch.randn(4, 8, 3, 3) + 5.0
    out = temporal_shift(x, ShiftSpec(mode))
    assert torch.all(out[0, :1] == 0)
    if mode == "offline":
        assert torch.all(out[-1, 1:2] == 0)
    else:
        assert torch.equal(out[:, 1:], x[:, 1:])


def test_fold_zero_is_identity():
    x = torch.randn(3, 4, 2, 2)
    assert torch.equal(temporal_shift(x, ShiftSpec("offline", Fraction(1, 8))), x)


def test_shift_spec_rejects_bad_fraction():
    with pytest.raises(ValueError):
        ShiftSpec("offline", Fraction(3, 4))
    with pytest.raises(ValueError):
        ShiftSpec("offline", 0)
    with pytest.raises(ValueError):
        ShiftSpec("sideways")


@pytest.mark.parametrize("mode", ["offline", "online"])
@pytest.mark.parametrize("T,C", [(1, 1), (2, 8), (5, 3), (4, 16)])
def test_shift_matches_loop_oracle_integers(mode, T, C):
    x = torch.randint(-100, 100, (T, C, 4, 4))
    spec = ShiftSpec(mode, Fraction(1, 4))
    expected = shift_loop(x.numpy(), spec.fold(C), mode)
    np.testing.assert_array_equal(temporal_shift(x, spec).numpy(), expected)


def test_batched_input_shifts_each_clip():
    x = torch.randn(2, 3, 8, 2, 2)
    out = temporal_shift(x)
    for b in range(2):
        assert torch.equal(out[b], temporal_shift(x[b]))


def test_learnable_identity_and_delay():
    x = torch.randn(4, 3, 2, 2)
    ident = torch.tensor([[0.0, 1.0, 0.0]] * 3)
    delay = torch.tensor([[1.0, 0.0, 0.0]] * 3)
    assert torch.equal(learnable_shift(x, ident), x)
    out = learnable_shift(x, delay)
    assert torch.all(out[0] == 0)
    assert torch.equal(out[1:], x[:-1])


def test_learnable_matches_triple_loop():
    gen = torch.Generator().manual_seed(0)
    x = torch.randn(4, 3, 2, 2, generator=gen, dtype=torch.float64)
    kern = torch.randn(3, 3, generator=gen, dtype=torch.float64)
    np.testing.assert_allclose(learnable_shift(x, kern).numpy(), learnable_shift_loop(x, kern), atol=1e-6)


@pytest.mark.parametrize("mode", ["offline", "online"])
def test_fixed_shift_is_special_case_of_learnable(mode):
    spec = ShiftSpec(mode)
    x = torch.randn(5, 16, 3, 3)
    assert torch.equal(learnable_shift(x, shift_kernels(16, spec)), temporal_shift(x, spec))


def test_online_module_rejects_future_tap():
    kern = torch.zeros(4, 3)
    kern[:, 2] = 0.5
    with pytest.raises(ValueError, match="future"):
        LearnableTemporalShift(4, ShiftSpec("online"), kern)
    LearnableTemporalShift(4, ShiftSpec("offline"), kern)


def test_online_future_tap_gets_no_gradient():
    mod = LearnableTemporalShift(4, ShiftSpec("online"))
    x = torch.randn(3, 4, 2, 2)
    mod(x).square().sum().backward()
    assert torch.all(mod.kernels.grad[:, 2] == 0)
    assert mod.kernels.grad[:, :2].abs().sum() > 0


@pytest.mark.parametrize("learnable", [False, True])
def test_online_causality(learnable):
    torch.manual_seed(0)
    spec = ShiftSpec("online", Fraction(1, 4))
    op = LearnableTemporalShift(8, spec) if learnable else (lambda v: temporal_shift(v, spec))
    if learnable:
        with torch.no_grad():
            op.kernels[:, :2] = torch.randn(8, 2)
    x = torch.randn(6, 8, 3, 3)
    base = op(x).detach()
    for t in range(5):
        y = x.clone()
        y[t + 1:] += torch.randn_like(y[t + 1:]) * 10
        assert torch.equal(op(y).detach()[:t + 1], base[:t + 1])


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 5), st.integers(1, 8), st.floats(-3, 3), st.floats(-3, 3),
       st.sampled_from(["offline", "online"]), st.integers(0, 2 ** 16))
def test_linearity(T, C, a, b, mode, seed):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(T, C, 2, 2, generator=gen, dtype=torch.float64)
    y = torch.randn(T, C, 2, 2, generator=gen, dtype=torch.float64)
    kern = torch.randn(C, 3, generator=gen, dtype=torch.float64)
    spec = ShiftSpec(mode, Fraction(1, 2))
    torch.testing.assert_close(temporal_shift(a * x + b * y, spec),
                               a * temporal_shift(x, spec) + b * temporal_shift(y, spec))
    torch.testing.assert_close(learnable_shift(a * x + b * y, kern),
                               a * learnable_shift(x, kern) + b * learnable_shift(y, kern))


def test_learnable_gradients_match_finite_differences():
    gen = torch.Generator().manual_seed(1)
    x = torch.randn(4, 3, 2, 2, generator=gen, dtype=torch.float64)
    kern = torch.randn(3, 3, generator=gen, dtype=torch.float64)
    w = torch.randn(4, 3, 2, 2, generator=gen, dtype=torch.float64)
    assert grad_rel_err(lambda v: (learnable_shift(v, kern) * w).sum(), x) < 1e-5
    assert grad_rel_err(lambda k: (learnable_shift(x, k) * w).sum(), kern) < 1e-5
