"""VGG-like real/generated classifier over single luma frames."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigurationError
from .model import BN_EPS, BN_MOMENTUM

FULL_STAGES = ((2, 64), (3, 128), (4, 256), (5, 512))


@dataclass
class DiscriminatorSpec:
    conv_stages: list[tuple[int, int]] = field(default_factory=lambda: [tuple(s) for s in FULL_STAGES])
    fc: list[int] = field(default_factory=lambda: [4096, 2])
    input_size: tuple[int, int] = (128, 128)

    def __post_init__(self):
        self.conv_stages = [tuple(s) for s in self.conv_stages]
        self.fc = list(self.fc)
        self.input_size = tuple(self.input_size)
        if not self.fc or self.fc[-1] != 2:
            raise ConfigurationError("discriminator must end in a 2-way layer")
        h, w = self.input_size
        div = 2 ** len(self.conv_stages)
        if h % div or w % div:
            raise ConfigurationError(f"input size {self.input_size} must be divisible by {div}")

    @property
    def n_conv(self) -> int:
        return sum(n for n, _ in self.conv_stages)

    @property
    def head_shape(self) -> tuple[int, int, int]:
        div = 2 ** len(self.conv_stages)
        return self.conv_stages[-1][1], self.input_size[0] // div, self.input_size[1] // div

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorSpec":
        return cls(**d)


def toy_discriminator_spec(input_size=(16, 16), width: int = 8) -> DiscriminatorSpec:
    """Same 14-conv layout at reduced width."""
    return DiscriminatorSpec(
        conv_stages=[(2, width // 2), (3, width), (4, width), (5, width)],
        fc=[2 * width, 2],
        input_size=input_size,
    )


class Discriminator(nn.Module):
    """Stage-first convs use stride 2; every conv is 3x3 + BN + ReLU.

    ``forward`` maps ``(N, H, W)`` luma frames to ``(N, 2)`` logits ordered
    ``(real, fake)``.
    """

    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        convs = []
        c_in = 1
        for n_layers, width in spec.conv_stages:
            for k in range(n_layers):
                convs += [
                    nn.Conv2d(c_in, width, 3, stride=2 if k == 0 else 1, padding=1),
                    nn.BatchNorm2d(width, eps=BN_EPS, momentum=BN_MOMENTUM),
                    nn.ReLU(),
                ]
                c_in = width
        self.features = nn.Sequential(*convs)
        c, h, w = spec.head_shape
        fcs = []
        n_in = c * h * w
        for i, width in enumerate(spec.fc):
            fcs.append(nn.Linear(n_in, width))
            if i < len(spec.fc) - 1:
                fcs.append(nn.ReLU())
            n_in = width
        self.classifier = nn.Sequential(*fcs)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() == 3:
            x = x.unsqueeze(1)
        if tuple(x.shape[-2:]) != self.spec.input_size:
            raise ConfigurationError(f"frame size {tuple(x.shape[-2:])} != discriminator input {self.spec.input_size}")
        return self.classifier(torch.flatten(self.features(x), 1))

    def p_real(self, x: torch.Tensor) -> torch.Tensor:
        return F.softmax(self(x), dim=1)[:, 0]


def discriminator_forward(model: Discriminator, frame) -> tuple[float, float]:
    """Score one ``H x W`` luma frame; returns ``(p_real, p_fake)``."""
    param = next(model.parameters())
    x = torch.as_tensor(np.asarray(frame), dtype=param.dtype).unsqueeze(0)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            p = F.softmax(model(x), dim=1)[0]
    finally:
        model.train(was_training)
    return float(p[0]), float(p[1])
