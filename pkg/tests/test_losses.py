import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from vdblur.losses import (
    LOG_EPS,
    LossWeights,
    adversarial_loss,
    combined_loss,
    content_loss,
    discriminator_loss,
)
from vdblur.oracle import content_loss_oracle, cross_entropy_oracle

unit = st.floats(0.0, 1.0)


def test_content_identical_is_zero():
    a = np.random.default_rng(0).random((6, 5))
    assert content_loss(a, a) == 0.0


def test_content_constant_offset():
    a = np.random.default_rng(1).random((4, 4))
    assert content_loss(a, a + 0.25) == pytest.approx(0.0625, abs=1e-15)


def test_content_matches_loop_oracle():
    rng = np.random.default_rng(2)
    a, b = rng.random((4, 4)), rng.random((4, 4))
    assert abs(content_loss(a, b) - content_loss_oracle(a, b)) < 1e-12


def test_content_shape_mismatch():
    with pytest.raises(ValueError):
        content_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_content_torch_differentiable():
    a = torch.rand(3, 3, dtype=torch.float64)
    b = torch.rand(3, 3, dtype=torch.float64, requires_grad=True)
    content_loss(a, b).backward()
    torch.testing.assert_close(b.grad, 2 * (b.detach() - a) / 9)


@given(arrays(np.float64, (3, 4), elements=unit), arrays(np.float64, (3, 4), elements=unit))
def test_content_nonnegative_and_symmetric(a, b):
    l_ab = content_loss(a, b)
    assert l_ab >= 0
    assert l_ab == content_loss(b, a)
    assert content_loss(a, a) == 0.0


def test_adversarial_values():
    assert adversarial_loss(0.0) == pytest.approx(0.0, abs=1e-11)
    assert adversarial_loss(0.5) == pytest.approx(-0.6931, abs=1e-4)
    assert adversarial_loss(1.0) == pytest.approx(math.log(LOG_EPS))
    assert adversarial_loss(1.0) == pytest.approx(-27.631, abs=1e-3)
    assert math.isfinite(adversarial_loss(1.0))


@given(unit, unit)
def test_adversarial_monotone(p, q):
    if p < q:
        assert adversarial_loss(p) >= adversarial_loss(q)


def test_combined_values():
    assert combined_loss(1.0, -0.5, LossWeights(0.0002)) == pytest.approx(0.9999, abs=1e-12)
    assert combined_loss(0.3, -7.0, LossWeights(0.0)) == 0.3


@given(st.floats(0, 10), st.floats(-30, 0))
def test_combined_linear_in_alpha(c, a):
    vals = [combined_loss(c, a, LossWeights(al)) for al in (0.0, 0.0002, 0.1)]
    assert vals[1] - vals[0] == pytest.approx(0.0002 * a, abs=1e-12)
    assert vals[2] - vals[0] == pytest.approx(0.1 * a, abs=1e-12)


def test_combined_alpha_zero_gradients_exact():
    x = torch.rand(4, 4, dtype=torch.float64, requires_grad=True)
    y = torch.rand(4, 4, dtype=torch.float64)
    p = torch.sigmoid(x.mean())
    c = content_loss(y, x)
    total = combined_loss(c, adversarial_loss(p), LossWeights(0.0))
    (g_total,) = torch.autograd.grad(total, x)
    (g_content,) = torch.autograd.grad(content_loss(y, x), x)
    assert torch.equal(g_total, g_content)
    assert float(total.detach()) == float(c.detach())


def test_combined_accepts_plain_alpha():
    assert combined_loss(1.0, 2.0, 0.5) == 2.0


def test_loss_weights_validation():
    assert LossWeights().alpha == 0.0002
    with pytest.raises(ValueError):
        LossWeights(-1.0)


def test_discriminator_loss_values():
    assert discriminator_loss(1.0, 0.0) == pytest.approx(0.0, abs=1e-11)
    assert discriminator_loss(0.5, 0.5) == pytest.approx(2 * math.log(2), abs=1e-4)
    assert discriminator_loss(0.5, 0.5) == pytest.approx(1.3863, abs=1e-4)


@given(unit, unit)
def test_discriminator_loss_matches_cross_entropy(ps, pg):
    assert abs(discriminator_loss(ps, pg) - cross_entropy_oracle(ps, pg)) < 1e-10


def test_discriminator_loss_batch_mean():
    ps = np.array([0.9, 0.6])
    pg = np.array([0.2, 0.3])
    expected = np.mean([cross_entropy_oracle(a, b) for a, b in zip(ps, pg)])
    assert discriminator_loss(ps, pg) == pytest.approx(expected, abs=1e-12)
