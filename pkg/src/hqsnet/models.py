"""Unrolled reconstruction networks and their static analysis.

Three variants share one engine (:func:`hqsnet.hqs_core.hqs_reconstruct`):

``hqsnet``
    n independent per-iteration CNNs, input ``[buffer, x]`` (2m+2 channels),
    output a 2m-channel update of the buffer.
``hqsnet_unet``
    one residual U-net (4 scales, 64/128/256/512 channels) shared across
    iterations, same input/output channels as ``hqsnet``.
``dccnn``
    deep cascade baseline: no buffer, denoiser sees only ``x`` and predicts
    ``x + CNN(x)``, denoiser runs before data consistency.
"""
from __future__ import annotations

import json
import shutil
import tempfile
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .container import read_container, write_container
from .errors import ConfigError, ContainerError, DataError
from .hqs_core import HqsParams, hqs_reconstruct
from .mri_ops import _ifft2c, mask_tensor

VARIANTS = ("hqsnet", "hqsnet_unet", "dccnn")
UNET_CHANNELS = (64, 128, 256, 512)
UNET_RESBLOCKS = 4


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "hqsnet"
    n_iterations: int = 8
    conv_layers_per_block: int = 6
    channels: int = 64
    buffer_m: int = 5
    kernel: int = 3
    dc_first: bool = True
    residual_dn: bool = True
    shared_mu: bool = True
    mu_init: float = 1.0
    zero_init_last: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown model variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_iterations < 1:
            raise ConfigError("n_iterations must be >= 1")
        if self.conv_layers_per_block < 2:
            raise ConfigError("conv_layers_per_block must be >= 2")
        if self.channels < 1 or self.buffer_m < 1:
            raise ConfigError("channels and buffer_m must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError("kernel must be a positive odd integer")
        if self.mu_init <= 0:
            raise ConfigError("mu_init must be > 0")
        if self.variant == "dccnn":
            # The baseline's formulation pins these three.
            object.__setattr__(self, "buffer_m", 1)
            object.__setattr__(self, "residual_dn", False)
            object.__setattr__(self, "dc_first", False)

    @property
    def block_in_channels(self) -> int:
        return 2 if self.variant == "dccnn" else 2 * self.buffer_m + 2

    @property
    def block_out_channels(self) -> int:
        return 2 * self.buffer_m

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


# --------------------------------------------------------------------------
# denoisers


class BlockCNN(nn.Module):
    """conv -> (L-2) x [ReLU, conv] -> ReLU -> conv, 'same' padding."""

    def __init__(self, in_ch: int, out_ch: int, channels: int = 64, n_layers: int = 6,
                 kernel: int = 3, residual: bool = True, image_only: bool = False,
                 zero_init_last: bool = True):
        super().__init__()
        self.residual = residual
        self.image_only = image_only
        pad = kernel // 2
        layers: list[nn.Module] = [nn.Conv2d(in_ch, channels, kernel, padding=pad)]
        for _ in range(n_layers - 2):
            layers += [nn.ReLU(inplace=True), nn.Conv2d(channels, channels, kernel, padding=pad)]
        layers += [nn.ReLU(inplace=True), nn.Conv2d(channels, out_ch, kernel, padding=pad)]
        self.net = nn.Sequential(*layers)
        if zero_init_last:
            nn.init.zeros_(self.net[-1].weight)
            nn.init.zeros_(self.net[-1].bias)

    def forward(self, buffer: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        inp = x if self.image_only else torch.cat([buffer, x], dim=-3)
        return self.net(inp)


class ResBlock(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv1 = nn.Conv2d(ch, ch, 3, padding=1, bias=False)
        self.conv2 = nn.Conv2d(ch, ch, 3, padding=1, bias=False)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class ResUNet(nn.Module):
    """Bias-free residual U-net: strided-conv down, transposed-conv up,
    additive skips, ``UNET_RESBLOCKS`` residual blocks per scale."""

    def __init__(self, in_ch: int, out_ch: int, widths=UNET_CHANNELS, nb: int = UNET_RESBLOCKS,
                 residual: bool = True, zero_init_last: bool = True):
        super().__init__()
        self.residual = residual
        self.image_only = False
        self.widths = tuple(widths)
        self.nb = nb
        self.in_ch, self.out_ch = in_ch, out_ch
        w = self.widths
        self.head = nn.Conv2d(in_ch, w[0], 3, padding=1, bias=False)
        self.down = nn.ModuleList(
            nn.Sequential(*[ResBlock(w[i]) for _ in range(nb)],
                          nn.Conv2d(w[i], w[i + 1], 2, stride=2, bias=False))
            for i in range(len(w) - 1)
        )
        self.body = nn.Sequential(*[ResBlock(w[-1]) for _ in range(nb)])
        self.up = nn.ModuleList(
            nn.Sequential(nn.ConvTranspose2d(w[i + 1], w[i], 2, stride=2, bias=False),
                          *[ResBlock(w[i]) for _ in range(nb)])
            for i in reversed(range(len(w) - 1))
        )
        self.tail = nn.Conv2d(w[0], out_ch, 3, padding=1, bias=False)
        if zero_init_last:
            nn.init.zeros_(self.tail.weight)

    @property
    def multiple(self) -> int:
        return 2 ** (len(self.widths) - 1)

    def forward(self, buffer: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        inp = torch.cat([buffer, x], dim=-3)
        H, W = inp.shape[-2:]
        ph, pw = (-H) % self.multiple, (-W) % self.multiple
        if ph or pw:
            inp = F.pad(inp, (0, pw, 0, ph), mode="replicate")
        skips = [self.head(inp)]
        for down in self.down:
            skips.append(down(skips[-1]))
        h = self.body(skips[-1])
        for up, skip in zip(self.up, reversed(skips[1:])):
            h = up(h + skip)
        out = self.tail(h + skips[0])
        return out[..., :H, :W]


# --------------------------------------------------------------------------
# unrolled model


class UnrolledNet(nn.Module):
    """``forward(y, mask) -> image``: y complex (B, H, W), mask (H, W) or (B, H, W)."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config
        self.hqs = HqsParams(c.n_iterations, dc_first=c.dc_first, mu_init=c.mu_init,
                             shared_mu=c.shared_mu)
        if c.variant == "hqsnet_unet":
            self.denoiser = ResUNet(c.block_in_channels, c.block_out_channels,
                                    residual=c.residual_dn, zero_init_last=c.zero_init_last)
        else:
            self.denoiser = nn.ModuleList(
                BlockCNN(c.block_in_channels, c.block_out_channels, c.channels,
                         c.conv_layers_per_block, c.kernel, residual=c.residual_dn,
                         image_only=c.variant == "dccnn", zero_init_last=c.zero_init_last)
                for _ in range(c.n_iterations)
            )

    def forward(self, y: torch.Tensor, mask, x0: torch.Tensor | None = None) -> torch.Tensor:
        m = mask_tensor(mask, like=y)
        if m.ndim == y.ndim:
            pass
        elif m.ndim == 2:
            m = m.expand(y.shape)
        if x0 is None:
            x0 = _ifft2c(y * m)
        return hqs_reconstruct(y, m, self.denoiser, self.hqs, self.config.buffer_m, x0=x0)


def build_model(config: ModelConfig) -> UnrolledNet:
    if not isinstance(config, ModelConfig):
        raise ConfigError("build_model expects a ModelConfig")
    return UnrolledNet(config)


# --------------------------------------------------------------------------
# static analysis


@dataclass(frozen=True)
class ConvSpec:
    c_in: int
    c_out: int
    k: int
    h_out: int
    w_out: int
    bias: bool

    @property
    def params(self) -> int:
        return self.c_in * self.c_out * self.k * self.k + (self.c_out if self.bias else 0)

    @property
    def macs(self) -> int:
        return self.c_in * self.c_out * self.k * self.k * self.h_out * self.w_out


@dataclass(frozen=True)
class ParamReport:
    total_parameters: int
    conv_parameters: int
    flops: float
    height: int
    width: int

    def summary(self) -> str:
        return f"params: {self.total_parameters / 1e6:.2f} M, flops: {self.flops / 1e9:.2f} G"


def conv_specs(config: ModelConfig, H: int, W: int) -> Iterator[ConvSpec]:
    """Every conv layer executed by one forward pass, with output sizes."""
    c = config
    if c.variant == "hqsnet_unet":
        w = UNET_CHANNELS
        mult = 2 ** (len(w) - 1)
        Hp, Wp = H + (-H) % mult, W + (-W) % mult
        per_pass = [ConvSpec(c.block_in_channels, w[0], 3, Hp, Wp, False)]
        for i, ch in enumerate(w):
            h, wd = Hp >> i, Wp >> i
            n_res = UNET_RESBLOCKS * (1 if i == len(w) - 1 else 2)
            per_pass += [ConvSpec(ch, ch, 3, h, wd, False)] * (2 * n_res)
            if i < len(w) - 1:
                per_pass.append(ConvSpec(ch, w[i + 1], 2, h >> 1, wd >> 1, False))
                per_pass.append(ConvSpec(w[i + 1], ch, 2, h, wd, False))
        per_pass.append(ConvSpec(w[0], c.block_out_channels, 3, Hp, Wp, False))
    else:
        hid = c.channels
        per_pass = [ConvSpec(c.block_in_channels, hid, c.kernel, H, W, True)]
        per_pass += [ConvSpec(hid, hid, c.kernel, H, W, True)] * (c.conv_layers_per_block - 2)
        per_pass.append(ConvSpec(hid, c.block_out_channels, c.kernel, H, W, True))
    for _ in range(c.n_iterations):
        yield from per_pass


def _n_mu(config: ModelConfig) -> int:
    return 1 if config.shared_mu else config.n_iterations


def conv_parameter_count(config: ModelConfig) -> int:
    """Closed-form count of conv weights and biases."""
    specs = list(conv_specs(config, 1, 1))
    if config.variant == "hqsnet_unet":
        # one network shared by every iteration
        specs = specs[: len(specs) // config.n_iterations]
    return sum(s.params for s in specs)


def parameter_count_formula(config: ModelConfig) -> int:
    return conv_parameter_count(config) + _n_mu(config)


def count_parameters(model: nn.Module) -> int:
    """Learnable scalars actually held by ``model`` (conv weights, biases, mu)."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def estimate_flops(config: ModelConfig, H: int, W: int) -> float:
    """Multiply-accumulates over all conv layers at H x W.

    Each layer contributes ``C_in * C_out * k^2 * H_out * W_out``; biases,
    activations and FFTs are not counted.
    """
    if H <= 0 or W <= 0:
        raise ConfigError(f"resolution must be positive, got {H}x{W}")
    return float(sum(s.macs for s in conv_specs(config, H, W)))


def analyze(config: ModelConfig, H: int = 192, W: int = 160) -> ParamReport:
    return ParamReport(
        total_parameters=parameter_count_formula(config),
        conv_parameters=conv_parameter_count(config),
        flops=estimate_flops(config, H, W),
        height=H,
        width=W,
    )


# --------------------------------------------------------------------------
# checkpoints

CONFIG_FILE = "config.json"
WEIGHTS_STEM = "weights"


def save_checkpoint(model: UnrolledNet, path, extra: dict | None = None) -> Path:
    """Write ``path/config.json`` and ``path/weights.{json,bin}``.

    Only learnable parameters are stored, as float32, in ``named_parameters``
    order. The directory is assembled aside and moved into place.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".ckpt-", dir=path.parent))
    try:
        arrays = {name: p.detach().cpu().numpy().astype(np.float32)
                  for name, p in model.named_parameters()}
        write_container(tmp / WEIGHTS_STEM, arrays)
        payload = {"model": model.config.to_dict()}
        if extra:
            payload.update(extra)
        (tmp / CONFIG_FILE).write_text(json.dumps(payload, indent=2))
        if path.exists():
            shutil.rmtree(path)
        tmp.rename(path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def read_checkpoint_config(path) -> dict:
    cfg_path = Path(path) / CONFIG_FILE
    try:
        return json.loads(cfg_path.read_text())
    except FileNotFoundError as exc:
        raise DataError(f"missing checkpoint config {cfg_path}") from exc


def load_checkpoint(path) -> UnrolledNet:
    payload = read_checkpoint_config(path)
    config = ModelConfig.from_dict(payload["model"])
    arrays = read_container(Path(path) / WEIGHTS_STEM)
    model = build_model(config)
    expected = dict(model.named_parameters())
    if set(arrays) != set(expected):
        raise ContainerError(
            f"checkpoint tensors do not match {config.variant}: "
            f"missing {sorted(set(expected) - set(arrays))}, extra {sorted(set(arrays) - set(expected))}"
        )
    for name, p in expected.items():
        if tuple(arrays[name].shape) != tuple(p.shape):
            raise ContainerError(f"{name}: shape {arrays[name].shape} != {tuple(p.shape)}")
    with torch.no_grad():
        for name, p in expected.items():
            p.copy_(torch.from_numpy(arrays[name]))
    model.eval()
    return model
