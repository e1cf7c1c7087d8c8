"""Content, adversarial and discriminator losses.

All functions accept torch tensors (differentiable) or plain numbers/arrays. Batched
inputs are averaged over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

LOG_EPS = 1e-12
DEFAULT_ALPHA = 2e-4


@dataclass(frozen=True)
class LossWeights:
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")


def _t(x):
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def _out(val, *inputs):
    if any(isinstance(x, torch.Tensor) for x in inputs):
        return val
    return float(val)


def content_loss(sharp, deblurred):
    """Mean squared error over pixels (and batch, if present)."""
    a, b = _t(sharp), _t(deblurred)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return _out(((a - b) ** 2).mean(), sharp, deblurred)


def adversarial_loss(p_real_of_generated):
    """``log(1 - p + eps)``: falls as the discriminator believes generated frames are real."""
    p = _t(p_real_of_generated)
    return _out(torch.log(1.0 - p + LOG_EPS).mean(), p_real_of_generated)


def combined_loss(content, adversarial, weights: LossWeights | float = LossWeights()):
    alpha = weights.alpha if isinstance(weights, LossWeights) else float(weights)
    if alpha == 0.0:
        # exact: no 0 * adversarial term, so NaNs/gradients from it cannot leak in
        return content
    return content + alpha * adversarial


def discriminator_loss(p_real_on_sharp, p_real_on_generated):
    """Negated discriminator objective: ``-[log(D(h)) + log(1 - D(G(x)))]``."""
    ps, pg = _t(p_real_on_sharp), _t(p_real_on_generated)
    val = -(torch.log(ps + LOG_EPS).mean() + torch.log(1.0 - pg + LOG_EPS).mean())
    return _out(val, p_real_on_sharp, p_real_on_generated)
