import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from faceinpaint import losses as L
from oracles import central_fd, grad_rel_err


class TinyExtractor(torch.nn.Module):
    """Two fixed conv layers; small enough for loop oracles and finite differences."""

    descriptor = "tiny"

    def __init__(self):
        super().__init__()
        gen = torch.Generator().manual_seed(0)
        self.w1 = torch.randn(2, 3, 3, 3, generator=gen, dtype=torch.float64) * 0.5
        self.w2 = torch.randn(3, 2, 3, 3, generator=gen, dtype=torch.float64) * 0.5

    def layers(self, x):
        f = x.reshape(-1, *x.shape[-3:])
        a = torch.tanh(torch.nn.functional.conv2d(f, self.w1, padding=1))
        b = torch.tanh(torch.nn.functional.conv2d(a, self.w2, padding=1))
        return [a, b]


class TinyClassifier:
    descriptor = "tiny-fer"

    def __init__(self):
        gen = torch.Generator().manual_seed(1)
        self.w = torch.randn(4, 3 * 4 * 4, generator=gen, dtype=torch.float64)

    def logits(self, x):
        return x.flatten(-3) @ self.w.T


def _pair(seed=0, T=2, H=4):
    gen = torch.Generator().manual_seed(seed)
    a = torch.rand(T, 3, H, H, generator=gen, dtype=torch.float64) * 2 - 1
    b = torch.rand(T, 3, H, H, generator=gen, dtype=torch.float64) * 2 - 1
    return a, b


def test_l1_examples():
    a, b = _pair()
    assert L.l1_loss(a, a) == 0
    assert L.l1_loss(a + 0.5, a).item() == pytest.approx(0.5)
    expected = sum(abs(x - y) for x, y in zip(a.flatten().tolist(), b.flatten().tolist())) / a.numel()
    assert abs(L.l1_loss(a, b).item() - expected) < 1e-7
    with pytest.raises(ValueError):
        L.l1_loss(a, b[:1])


def test_gram_examples():
    eye = torch.eye(2).reshape(2, 1, 2)
    torch.testing.assert_close(L.gram(eye), torch.eye(2) / 4)
    gen = torch.Generator().manual_seed(2)
    f = torch.randn(3, 2, 4, generator=gen, dtype=torch.float64)
    g = L.gram(f)
    flat = f.reshape(3, 8).numpy()
    oracle = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            for n in range(8):
                oracle[i, j] += flat[i, n] * flat[j, n]
    np.testing.assert_allclose(g.numpy(), oracle / 24, atol=1e-7)
    assert torch.equal(g, g.T)
    assert torch.linalg.eigvalsh(g).min() > -1e-12


def test_style_and_perceptual_match_oracles():
    ext = TinyExtractor()
    a, b = _pair(3)
    fa, fb = ext.layers(a), ext.layers(b)
    style, percep = 0.0, 0.0
    for la, lb in zip(fa, fb):
        n, c = la.shape[:2]
        for i in range(n):
            Fa = la[i].reshape(c, -1).numpy()
            Fb = lb[i].reshape(c, -1).numpy()
            Ga = Fa @ Fa.T / Fa.size
            Gb = Fb @ Fb.T / Fb.size
            style += np.abs(Ga - Gb).sum() / (n * c * c)
        percep += np.abs(la.numpy() - lb.numpy()).mean()
    assert abs(L.style_loss(a, b, ext).item() - style) < 1e-9
    assert abs(L.perceptual_loss(a, b, ext).item() - percep) < 1e-9
    assert L.style_loss(a, b, ext).item() == pytest.approx(L.style_loss(b, a, ext).item(), rel=1e-12)
    assert L.style_loss(a, a, ext) == 0 and L.perceptual_loss(a, a, ext) == 0


def test_fer_examples():
    clf = TinyClassifier()
    a, b = _pair(4)
    assert L.fer_loss(a, a, clf).item() == pytest.approx(0.0, abs=1e-12)
    assert L.fer_loss(a, b, clf) >= 0

    class TwoClass:
        def logits(self, x):
            return x.flatten(-3)[..., :2]

    gt = torch.zeros(1, 3, 1, 1, dtype=torch.float64)
    out = torch.zeros(1, 3, 1, 1, dtype=torch.float64)
    gt[0, :2, 0, 0] = torch.tensor([1.0, 0.0])
    out[0, :2, 0, 0] = torch.tensor([0.0, 2.0])
    p = math.exp(1) / (math.exp(1) + 1)
    q = 1 / (1 + math.exp(2))
    expected = p * math.log(p / q) + (1 - p) * math.log((1 - p) / (1 - q))
    assert L.fer_loss(out, gt, TwoClass()).item() == pytest.approx(expected, abs=1e-12)


def test_wgan_examples():
    assert L.wgan_g_loss([1.0, 3.0]).item() == -2
    assert L.wgan_g_loss([0.0]).item() == 0
    assert L.wgan_g_loss([-5.0]).item() == 5
    assert L.wgan_d_loss([2.0], [1.0]).item() == -1
    assert L.wgan_d_loss([2.0], [1.0], 0.5, 10).item() == pytest.approx(4.0)


def test_gradient_penalty_on_linear_critic():
    gen = torch.Generator().manual_seed(5)
    w = torch.randn(2, 3, 2, 2, generator=gen, dtype=torch.float64)

    def critic(x):
        return (x * w).flatten(1).sum(1)

    real = torch.randn(3, 2, 3, 2, 2, dtype=torch.float64)
    fake = torch.randn(3, 2, 3, 2, 2, dtype=torch.float64)
    gp = L.gradient_penalty(critic, real, fake, gen)
    expected = (w.norm().item() - 1) ** 2
    assert gp.item() == pytest.approx(expected, rel=1e-12)
    # finite-difference gradient norm at one interpolate agrees with the analytic one
    x = real[0].clone()
    fd = central_fd(lambda v: critic(v[None])[0], x)
    assert ((fd.norm().item() - 1) ** 2) == pytest.approx(expected, rel=1e-6)


def test_gradient_penalty_is_differentiable_in_critic_params():
    w = torch.randn(1, 3, 2, 2, dtype=torch.float64, requires_grad=True)
    gp = L.gradient_penalty(lambda x: (x * w).flatten(1).sum(1), torch.randn(2, 1, 3, 2, 2, dtype=torch.float64),
                            torch.randn(2, 1, 3, 2, 2, dtype=torch.float64))
    (g,) = torch.autograd.grad(gp, w)
    torch.testing.assert_close(g, 2 * (w.norm() - 1) * w / w.norm())


def test_total_generator_loss_worked_example():
    terms = dict(adv=-1.0, fer=0.3, style=0.05, vgg=0.2, l1=0.1)
    report = L.total_generator_loss(terms, descriptor="d")
    assert report.total == 1.0
    assert report.descriptor == "d"
    assert L.total_generator_loss(dict.fromkeys(L.TERMS, 0.0)).total == 0
    doubled = L.total_generator_loss(terms, L.LossWeights().scaled(2)).total
    assert doubled == pytest.approx(2.0, abs=1e-15)
    assert L.LossReport.from_dict(report.to_dict()) == report


def test_default_weights():
    w = L.LossWeights()
    assert (w.adv, w.fer, w.style, w.vgg, w.l1) == (1, 4, 10, 1, 1)
    for bad in (-1.0, float("nan"), float("inf")):
        with pytest.raises(ValueError):
            L.LossWeights(l1=bad)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=5, max_size=5), st.sampled_from(L.TERMS), st.floats(-10, 10))
def test_total_is_linear_in_each_term(values, name, delta):
    terms = dict(zip(L.TERMS, values))
    w = L.LossWeights()
    base = L.total_generator_loss(terms, w).total
    bumped = L.total_generator_loss({**terms, name: terms[name] + delta}, w).total
    assert bumped - base == pytest.approx(getattr(w, name) * delta, abs=1e-9)
    assert L.weighted_total(terms, w) == pytest.approx(base, abs=1e-9)


def test_nonnegative_losses_on_random_pairs():
    ext, clf = TinyExtractor(), TinyClassifier()
    for seed in range(5):
        a, b = _pair(seed)
        for fn in (L.l1_loss, lambda x, y: L.style_loss(x, y, ext), lambda x, y: L.perceptual_loss(x, y, ext),
                   lambda x, y: L.fer_loss(x, y, clf)):
            assert fn(a, b) >= 0


@pytest.mark.parametrize("name", ["l1", "style", "vgg", "fer", "adv"])
def test_loss_gradients_match_finite_differences(name):
    ext, clf = TinyExtractor(), TinyClassifier()
    a, b = _pair(7)
    w = torch.randn(3, 4, 4, dtype=torch.float64)
    fn = {
        "l1": lambda x: L.l1_loss(x, b),
        "style": lambda x: L.style_loss(x, b, ext),
        "vgg": lambda x: L.perceptual_loss(x, b, ext),
        "fer": lambda x: L.fer_loss(x, b, clf),
        "adv": lambda x: L.wgan_g_loss((torch.tanh(x) * w).flatten(1).sum(1)),
    }[name]
    assert grad_rel_err(fn, a) < 1e-4


def test_random_extractor_is_frozen_and_deterministic():
    e1, e2 = L.make_extractor("randcnn:3"), L.make_extractor("randcnn:3")
    x = torch.rand(2, 3, 16, 16) * 2 - 1
    assert all(torch.equal(p, q) for p, q in zip(e1.layers(x), e2.layers(x)))
    assert not any(p.requires_grad for p in e1.parameters())
    assert len(e1.layers(x)) >= 2
    assert "3" in e1.descriptor
    e1.train()
    assert not e1.training
    with pytest.raises(ValueError):
        L.make_extractor("alexnet")


def test_random_classifier_shape():
    clf = L.RandomExpressionClassifier()
    out = clf.logits(torch.rand(2, 5, 3, 32, 32))
    assert out.shape == (2, 5, L.NUM_EXPRESSIONS)
    assert not any(p.requires_grad for p in clf.parameters())
