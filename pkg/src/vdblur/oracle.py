"""Slow, literal reference computations used to check the fast paths."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .errors import ConfigurationError


@dataclass(frozen=True)
class FiniteDiffConfig:
    h: float = 1e-5
    tolerance: float = 1e-4
    # gradients whose norm (analytic and numeric) is below this count as zero
    zero_tol: float = 1e-9

    def __post_init__(self):
        if not (self.h > 0 and self.tolerance > 0 and self.zero_tol >= 0):
            raise ValueError("h and tolerance must be positive")


def conv3d_oracle(x, layer) -> np.ndarray:
    """Nested-loop evaluation of a 3D convolution layer.

    ``x`` is ``C_in x T x H x W``; kernels are ``(out, in, P, Q, R)`` with P over
    rows, Q over frames, R over columns. Zero padding, stride 1.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(layer.kernels, dtype=np.float64)
    b = np.asarray(layer.bias, dtype=np.float64)
    if x.ndim != 4 or g.ndim != 5 or x.shape[0] != g.shape[1]:
        raise ConfigurationError(f"{getattr(layer, 'name', 'layer')}: input {x.shape} incompatible with kernels {g.shape}")
    c_out, c_in, P, Q, R = g.shape
    sp, tp = layer.spatial_padding, layer.temporal_padding
    C, T, H, W = x.shape
    xp = np.zeros((C, T + 2 * tp, H + 2 * sp, W + 2 * sp))
    xp[:, tp : tp + T, sp : sp + H, sp : sp + W] = x
    T_out = T + 2 * tp - Q + 1
    H_out = H + 2 * sp - P + 1
    W_out = W + 2 * sp - R + 1
    if T_out < 1 or H_out < 1 or W_out < 1:
        raise ConfigurationError("kernel larger than padded input")
    out = np.zeros((c_out, T_out, H_out, W_out))
    for j in range(c_out):
        for t in range(T_out):
            for row in range(H_out):
                for col in range(W_out):
                    acc = 0.0
                    for m in range(c_in):
                        for p in range(P):
                            for q in range(Q):
                                for r in range(R):
                                    acc += xp[m, t + q, row + p, col + r] * g[j, m, p, q, r]
                    v = acc + b[j]
                    if layer.activation == "relu":
                        v = max(v, 0.0)
                    out[j, t, row, col] = v
    return out


def content_loss_oracle(sharp, deblurred) -> float:
    a = np.asarray(sharp, np.float64).ravel()
    b = np.asarray(deblurred, np.float64).ravel()
    total = 0.0
    for u, v in zip(a, b):
        total += (u - v) ** 2
    return total / len(a)


def cross_entropy_oracle(p_real_on_sharp: float, p_real_on_generated: float, eps: float = 1e-12) -> float:
    """Two-class cross entropy: label 'real' for the sharp frame, 'fake' for the generated one."""
    import math

    return -math.log(p_real_on_sharp + eps) - math.log((1.0 - p_real_on_generated) + eps)


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    nonfinite: list[str]

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def mean_error(self) -> float:
        return float(np.mean(list(self.errors.values()))) if self.errors else 0.0

    def ok(self, tolerance: float) -> bool:
        return not self.nonfinite and self.max_error < tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, zero_tol: float = 0.0) -> float:
    """``|a - n| / (|a| + |n|)`` over a whole parameter array.

    Returns 0 when both norms are at most ``zero_tol``.
    """
    a, n = np.ravel(analytic), np.ravel(numeric)
    na, nn = np.linalg.norm(a), np.linalg.norm(n)
    if max(na, nn) <= zero_tol:
        return 0.0
    denom = na + nn
    return float(np.linalg.norm(a - n) / denom)


def grad_check(
    fn: Callable[[], float],
    params: Mapping[str, np.ndarray],
    analytic: Mapping[str, np.ndarray],
    cfg: FiniteDiffConfig = FiniteDiffConfig(),
) -> GradCheckReport:
    """Compare ``analytic`` gradients with central differences of ``fn``.

    ``params`` maps names to mutable float64 arrays that ``fn`` reads on every
    call; each entry is perturbed in place and restored.

    A tensor counts as having zero gradient when both norms fall below
    ``cfg.zero_tol`` or below the rounding floor of the differences,
    ``8 eps |f| / h`` per entry. Conv biases followed by batch norm are the usual
    case: their true gradient is exactly zero.
    """
    errors: dict[str, float] = {}
    nonfinite: list[str] = []
    f0 = float(fn())
    per_entry = 8 * np.finfo(np.float64).eps * max(abs(f0), 1.0) / cfg.h if np.isfinite(f0) else 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        num = np.zeros(flat.size)
        bad = False
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + cfg.h
            fp = fn()
            flat[i] = orig - cfg.h
            fm = fn()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                bad = True
                continue
            num[i] = (fp - fm) / (2 * cfg.h)
        if bad:
            nonfinite.append(name)
        floor = max(cfg.zero_tol, per_entry * np.sqrt(flat.size))
        errors[name] = relative_error(np.asarray(analytic[name]), num.reshape(p.shape), floor)
    return GradCheckReport(errors, nonfinite)


def torch_grad_check(
    fn: Callable[[], "torch.Tensor"],
    module_params: Mapping[str, "torch.nn.Parameter"],
    cfg: FiniteDiffConfig = FiniteDiffConfig(),
) -> GradCheckReport:
    """Finite-difference check of autograd gradients for float64 torch parameters."""
    import torch

    for p in module_params.values():
        if p.dtype != torch.float64:
            raise ValueError("gradient checks require float64 parameters")
        p.grad = None
    loss = fn()
    loss.backward()
    analytic = {k: p.grad.detach().numpy().copy() for k, p in module_params.items()}
    arrays = {k: p.data.numpy() for k, p in module_params.items()}  # shares storage

    def scalar() -> float:
        with torch.no_grad():
            return float(fn())

    return grad_check(scalar, arrays, analytic, cfg)
