"""DBLRNet generator: a 3D-convolutional residual network over a stack of luma frames.

Kernels are stored in ``(out, in, P, Q, R)`` order, where ``P`` and ``R`` are the
spatial extents (rows, columns) and ``Q`` the temporal extent in frames. Feature
tensors are ``(N, C, T, H, W)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Any, Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .errors import ConfigurationError

VARIANTS = ("net3d", "multi2d", "single2d")

BN_EPS = 1e-5
# torch's momentum weights the new batch: running = 0.9 * running + 0.1 * batch
BN_MOMENTUM = 0.1


@dataclass
class Conv3DLayer:
    """One convolution: weights, bias and geometry."""

    kernels: Any  # (out, in, P, Q, R)
    bias: Any  # (out,)
    spatial_padding: int = 1
    temporal_padding: int = 0
    activation: str = "none"
    batch_norm: bool = False
    name: str = "conv"

    @property
    def out_channels(self) -> int:
        return int(self.kernels.shape[0])

    @property
    def in_channels(self) -> int:
        return int(self.kernels.shape[1])

    @property
    def kernel_size(self) -> tuple[int, int, int]:
        _, _, p, q, r = self.kernels.shape
        return int(p), int(q), int(r)


def conv3d_forward(x, layer: Conv3DLayer):
    """Apply ``layer`` to a ``C_in x T x H x W`` array (numpy or torch).

    Returns the same kind of object it was given. Batch norm is not applied here;
    it lives in the network modules.
    """
    as_numpy = isinstance(x, np.ndarray)
    xt = torch.as_tensor(x)
    kernels = torch.as_tensor(layer.kernels, dtype=xt.dtype)
    bias = torch.as_tensor(layer.bias, dtype=xt.dtype)
    if xt.dim() != 4:
        raise ConfigurationError(f"{layer.name}: expected C x T x H x W input, got {tuple(xt.shape)}")
    if kernels.dim() != 5:
        raise ConfigurationError(f"{layer.name}: kernels must be (out, in, P, Q, R), got {tuple(kernels.shape)}")
    c_in, t = xt.shape[0], xt.shape[1]
    if c_in != kernels.shape[1]:
        raise ConfigurationError(f"{layer.name}: input channels {c_in} != kernel in_channels {kernels.shape[1]}")
    q = kernels.shape[3]
    if t + 2 * layer.temporal_padding < q:
        raise ConfigurationError(f"{layer.name}: temporal extent {t} shorter than kernel Q={q}")
    out = _conv(xt.unsqueeze(0), kernels, bias, layer.spatial_padding, layer.temporal_padding)[0]
    if layer.activation == "relu":
        out = F.relu(out)
    return out.numpy() if as_numpy else out


def _conv(x: torch.Tensor, kernels: torch.Tensor, bias, spatial_padding: int, temporal_padding: int):
    # (out, in, P, Q, R) -> torch's (out, in, Q, P, R) on input (N, C, T, H, W)
    weight = kernels.permute(0, 1, 3, 2, 4)
    return F.conv3d(x, weight, bias, padding=(temporal_padding, spatial_padding, spatial_padding))


@dataclass
class LayerDesc:
    id: str
    in_channels: int
    out_channels: int
    kernel: tuple[int, int, int]  # (P, Q, R)
    activation: str
    batch_norm: bool
    skip_to: list[str] = field(default_factory=list)
    role: str = "stem"

    @property
    def spatial_padding(self) -> int:
        return (self.kernel[0] - 1) // 2


@dataclass
class NetworkSpec:
    layers: list[LayerDesc]
    variant: str
    T: int

    @property
    def in_channels(self) -> int:
        return self.layers[0].in_channels

    @property
    def input_frames(self) -> int:
        """Temporal extent the first layer actually sees."""
        return self.T if self.variant == "net3d" else 1

    def layer(self, layer_id: str) -> LayerDesc:
        for desc in self.layers:
            if desc.id == layer_id:
                return desc
        raise KeyError(layer_id)

    def temporal_extents(self) -> list[int]:
        """Temporal extent after each layer."""
        t = self.input_frames
        out = []
        for desc in self.layers:
            t = t - desc.kernel[1] + 1
            out.append(t)
        return out

    def to_dict(self) -> dict:
        return {"variant": self.variant, "T": self.T, "layers": [asdict(d) for d in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = [LayerDesc(**{**ld, "kernel": tuple(ld["kernel"])}) for ld in d["layers"]]
        return cls(layers=layers, variant=d["variant"], T=int(d["T"]))


def build_generator(
    variant: str = "net3d",
    T: int = 5,
    *,
    num_blocks: int = 14,
    channels: int = 64,
    stem_channels: int = 16,
    head_channels: int = 256,
) -> NetworkSpec:
    """Describe a DBLRNet. Defaults reproduce the 35-layer configuration.

    net3d uses ``(T - 1) / 2`` leading 3x3x3 layers so the temporal extent is 1 at
    the first residual block. The stem always has at least two layers (16 then 64
    channels); windows longer than 5 frames get extra 64-channel stem layers.
    multi2d folds the T frames into input channels and uses Q=1 everywhere;
    single2d is multi2d restricted to the center frame.
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    if not isinstance(T, (int, np.integer)) or T < 1 or T % 2 == 0:
        raise ConfigurationError(f"window length T must be a positive odd integer, got {T!r}")
    if num_blocks < 0:
        raise ConfigurationError("num_blocks must be >= 0")

    n_temporal = (T - 1) // 2 if variant == "net3d" else 0
    n_stem = max(2, n_temporal)
    in_ch = {"net3d": 1, "multi2d": T, "single2d": 1}[variant]

    layers: list[LayerDesc] = []

    def add(out_ch, q, activation, bn, role):
        prev = layers[-1].out_channels if layers else in_ch
        layers.append(LayerDesc(f"L{len(layers) + 1}", prev, out_ch, (3, q, 3), activation, bn, [], role))
        return layers[-1]

    for i in range(n_stem):
        add(stem_channels if i == 0 else channels, 3 if i < n_temporal else 1, "relu", False, "stem")
    stem_out = layers[-1]

    for _ in range(num_blocks):
        block_in = layers[-1]
        add(channels, 1, "relu", True, "block_a")
        second = add(channels, 1, "none", True, "block_b")
        # block input is added to the second conv's normalized output
        block_in.skip_to.append(second.id)

    add(channels, 1, "relu", True, "trunk")
    trunk_end = add(channels, 1, "none", True, "trunk")
    stem_out.skip_to.append(trunk_end.id)

    add(head_channels, 1, "relu", False, "head")
    add(head_channels, 1, "relu", False, "head")
    add(1, 1, "none", False, "head")

    spec = NetworkSpec(layers=layers, variant=variant, T=int(T))
    check_spec(spec)
    return spec


def toy_generator_spec(variant: str = "net3d", T: int = 5, channels: int = 8, num_blocks: int = 2) -> NetworkSpec:
    """Topology-preserving reduced network for tests and desk-scale runs."""
    return build_generator(
        variant,
        T,
        num_blocks=num_blocks,
        channels=channels,
        stem_channels=max(1, channels // 2),
        head_channels=channels * 2,
    )


def check_spec(spec: NetworkSpec) -> None:
    prev_out = spec.in_channels
    for desc in spec.layers:
        p, q, r = desc.kernel
        if p != r or p % 2 == 0:
            raise ConfigurationError(f"{desc.id}: spatial kernel must be odd and square, got {desc.kernel}")
        if q not in (1, 3):
            raise ConfigurationError(f"{desc.id}: temporal kernel must be 1 or 3, got {q}")
        if desc.in_channels != prev_out:
            raise ConfigurationError(f"{desc.id}: in_channels {desc.in_channels} != previous out {prev_out}")
        prev_out = desc.out_channels
    extents = spec.temporal_extents()
    if min(extents) < 1:
        raise ConfigurationError(f"window of {spec.T} frames is too short for the temporal kernels")
    if spec.layers[-1].out_channels != 1 or spec.layers[-1].activation != "none" or spec.layers[-1].batch_norm:
        raise ConfigurationError("final layer must emit one channel without activation or batch norm")
    first_block = next((d for d in spec.layers if d.role != "stem"), None)
    if first_block is not None and extents[spec.layers.index(first_block) - 1] != 1:
        raise ConfigurationError("temporal extent must reach 1 before the residual trunk")


class ConvUnit(nn.Module):
    """Conv (+ BN) (+ ReLU) with kernels kept in (out, in, P, Q, R) order."""

    def __init__(self, desc: LayerDesc):
        super().__init__()
        self.desc = desc
        p, q, r = desc.kernel
        self.kernels = nn.Parameter(torch.zeros(desc.out_channels, desc.in_channels, p, q, r))
        self.bias = nn.Parameter(torch.zeros(desc.out_channels))
        self.bn = nn.BatchNorm3d(desc.out_channels, eps=BN_EPS, momentum=BN_MOMENTUM) if desc.batch_norm else None

    def conv(self, x: torch.Tensor) -> torch.Tensor:
        y = _conv(x, self.kernels, self.bias, self.desc.spatial_padding, 0)
        if self.bn is not None:
            y = self.bn(y)
        return y

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.conv(x)
        return F.relu(y) if self.desc.activation == "relu" else y

    def as_layer(self) -> Conv3DLayer:
        return Conv3DLayer(
            kernels=self.kernels.detach(),
            bias=self.bias.detach(),
            spatial_padding=self.desc.spatial_padding,
            activation=self.desc.activation,
            batch_norm=self.desc.batch_norm,
            name=self.desc.id,
        )


class Generator(nn.Module):
    """Executable DBLRNet built from a :class:`NetworkSpec`.

    ``forward`` takes ``(N, T, H, W)`` luma stacks and returns ``(N, H, W)``
    (unclamped; see :func:`generator_forward` for inference).
    """

    def __init__(self, spec: NetworkSpec):
        super().__init__()
        check_spec(spec)
        self.spec = spec
        self.units = nn.ModuleDict({d.id: ConvUnit(d) for d in spec.layers})
        self._skip_sources: dict[str, list[str]] = {}
        for d in spec.layers:
            for target in d.skip_to:
                self._skip_sources.setdefault(target, []).append(d.id)

    def fold_input(self, x: torch.Tensor) -> torch.Tensor:
        if x.dim() != 4:
            raise ConfigurationError(f"expected (N, T, H, W) input, got {tuple(x.shape)}")
        if x.shape[1] != self.spec.T:
            raise ConfigurationError(f"window has {x.shape[1]} frames, network expects T={self.spec.T}")
        if self.spec.variant == "net3d":
            return x.unsqueeze(1)
        if self.spec.variant == "multi2d":
            return x.unsqueeze(2)
        c = self.spec.T // 2
        return x[:, c : c + 1].unsqueeze(2)

    def forward(self, x: torch.Tensor, trace: list | None = None) -> torch.Tensor:
        h = self.fold_input(x)
        outputs: dict[str, torch.Tensor] = {}
        for layer_id, unit in self.units.items():
            sources = self._skip_sources.get(layer_id)
            if sources:
                y = unit.conv(h)
                for s in sources:
                    y = y + outputs[s]
                h = F.relu(y) if unit.desc.activation == "relu" else y
            else:
                h = unit(h)
            outputs[layer_id] = h
            if trace is not None:
                trace.append((layer_id, tuple(h.shape)))
        return h[:, 0, 0]


def generator_forward(model: Generator, window) -> np.ndarray:
    """Deblur one window in inference mode; returns an ``H x W`` array in [0, 1].

    ``window`` is a :class:`~vdblur.data.FrameWindow` or a ``T x H x W`` array.
    """
    luma = getattr(window, "luma", window)
    param = next(model.parameters())
    x = torch.as_tensor(np.asarray(luma), dtype=param.dtype).unsqueeze(0)
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            y = model(x)[0].clamp(0.0, 1.0)
    finally:
        model.train(was_training)
    return y.numpy()


def recombine(luma_out, window) -> np.ndarray:
    """Put a restored luma plane back together with the window's chroma.

    Returns an ``H x W x 3`` float RGB frame in [0, 1].
    """
    from .data import ycbcr_to_rgb

    luma_out = np.asarray(luma_out)
    if luma_out.shape != window.chroma_cb.shape:
        raise ConfigurationError(f"luma shape {luma_out.shape} != chroma shape {window.chroma_cb.shape}")
    return ycbcr_to_rgb(luma_out, window.chroma_cb, window.chroma_cr)


def layer_shapes(model: Generator, H: int, W: int) -> list[tuple[str, tuple[int, ...]]]:
    """Per-layer output shapes for a single ``T x H x W`` input."""
    trace: list = []
    param = next(model.parameters())
    with torch.no_grad():
        was_training = model.training
        model.eval()
        model(torch.zeros(1, model.spec.T, H, W, dtype=param.dtype), trace=trace)
        model.train(was_training)
    return trace


def count_conv_layers(spec: NetworkSpec) -> int:
    return len(spec.layers)


def same_geometry(a: NetworkSpec, b: NetworkSpec) -> bool:
    """True when two specs share layer count and per-layer spatial geometry."""
    if len(a.layers) != len(b.layers):
        return False
    return all(
        (x.kernel[0], x.kernel[2], x.out_channels, x.activation, x.batch_norm)
        == (y.kernel[0], y.kernel[2], y.out_channels, y.activation, y.batch_norm)
        for x, y in zip(a.layers, b.layers)
    )


def spec_summary(spec: NetworkSpec) -> Sequence[str]:
    rows = []
    for desc, t in zip(spec.layers, spec.temporal_extents()):
        p, q, r = desc.kernel
        ops = ("BN + " if desc.batch_norm else "") + ("ReLU" if desc.activation == "relu" else "-")
        skips = ", ".join(desc.skip_to) or "-"
        rows.append(f"{desc.id:>4}  {p}x{r}x{q}  {desc.out_channels:>4}  {ops:<10} T'={t}  skip: {skips}")
    return rows
