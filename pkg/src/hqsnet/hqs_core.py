"""Half-quadratic splitting engine: closed-form data consistency and the
unrolled DC/denoiser alternation with an m-slot iterate buffer.

Buffers are real tensors ``(B, 2m, H, W)``; slot ``j`` occupies channels
``2j`` and ``2j + 1``. Only slot 0 feeds the data-consistency step.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Protocol, Sequence

import torch
from torch import nn
from torch.nn import functional as F

from .errors import ContractError, ValidationError
from .mri_ops import _fft2c, _ifft2c, mask_tensor


class Denoiser(Protocol):
    """``(buffer (B,2m,H,W), x (B,2,H,W)) -> update (B,2m,H,W)``.

    With ``residual`` true the update is added to the buffer; otherwise it is
    added to ``m`` copies of ``x``.
    """

    residual: bool

    def __call__(self, buffer: torch.Tensor, x: torch.Tensor) -> torch.Tensor: ...


def dc_update(z: torch.Tensor, y: torch.Tensor, mask, mu) -> torch.Tensor:
    """Minimiser of ``||y - M F x||^2 + mu ||x - z||^2``.

    Sampled frequencies become ``(y + mu z_hat) / (1 + mu)``, unsampled ones
    keep ``z_hat``. ``mu`` may be a float or a (learnable) tensor broadcastable
    against the batch.
    """
    if not torch.is_tensor(mu):
        if mu < 0:
            raise ValidationError(f"mu must be >= 0, got {mu}")
    elif (mu.detach() < 0).any():
        raise ValidationError("mu must be >= 0")
    k = _fft2c(z)
    m = mask_tensor(mask, like=k)
    if tuple(m.shape[-2:]) != tuple(k.shape[-2:]) or tuple(y.shape[-2:]) != tuple(k.shape[-2:]):
        raise ValidationError("z, y and mask disagree in spatial shape")
    if torch.is_tensor(mu) and mu.ndim > 0:
        mu = mu.reshape(mu.shape + (1,) * 2)
    k_dc = k + m * (y - k) / (1 + mu)
    return _ifft2c(k_dc)


def softplus_inverse(value: float) -> float:
    return value + math.log(-math.expm1(-value))


class HqsParams(nn.Module):
    """Learnable penalty ``mu = softplus(mu_raw)`` plus unrolling options.

    With ``shared_mu`` one scalar serves every iteration; otherwise each
    iteration learns its own.
    """

    def __init__(self, n_iterations: int = 8, dc_first: bool = True, mu_init: float = 1.0,
                 shared_mu: bool = True):
        super().__init__()
        if n_iterations < 1:
            raise ValidationError("n_iterations must be >= 1")
        if mu_init <= 0:
            raise ValidationError("mu_init must be > 0")
        self.n_iterations = n_iterations
        self.dc_first = dc_first
        self.shared_mu = shared_mu
        n_mu = 1 if shared_mu else n_iterations
        self.mu_raw = nn.Parameter(torch.full((n_mu,), softplus_inverse(mu_init)))

    def mu(self, iteration: int = 0) -> torch.Tensor:
        raw = self.mu_raw[0 if self.shared_mu else iteration]
        return F.softplus(raw)


def _tile(x: torch.Tensor, m: int) -> torch.Tensor:
    """(..., 2, H, W) -> (..., 2m, H, W) holding m copies of ``x``."""
    return x.repeat(*([1] * (x.ndim - 3)), m, 1, 1)


@dataclass
class ReconState:
    buffer: torch.Tensor
    x: torch.Tensor
    iteration: int = 0

    @classmethod
    def initial(cls, x0: torch.Tensor, m: int) -> "ReconState":
        return cls(buffer=_tile(x0, m), x=x0)

    @property
    def head(self) -> torch.Tensor:
        return self.buffer[..., :2, :, :]


def _denoise(den: Callable, state: ReconState, m: int) -> torch.Tensor:
    update = den(state.buffer, state.x)
    if tuple(update.shape) != tuple(state.buffer.shape):
        raise ContractError(
            f"denoiser returned shape {tuple(update.shape)}, expected {tuple(state.buffer.shape)}"
        )
    if getattr(den, "residual", True):
        return state.buffer + update
    return _tile(state.x, m) + update


def hqs_reconstruct(y: torch.Tensor, mask, denoiser, params: HqsParams, m: int,
                    x0: torch.Tensor | None = None) -> torch.Tensor:
    """Run ``params.n_iterations`` unrolled HQS iterations.

    ``denoiser`` is either one callable shared by all iterations or a sequence
    with one callable per iteration. In DC-first mode the result is buffer slot
    0 after the last denoiser step; in DN-first mode it is the last DC output.
    ``x0`` skips recomputing the zero-filled image when the caller has it.
    """
    if m < 1:
        raise ValidationError(f"buffer size must be >= 1, got {m}")
    n = params.n_iterations
    if isinstance(denoiser, Sequence) or isinstance(denoiser, nn.ModuleList):
        blocks = list(denoiser)
        if len(blocks) != n:
            raise ContractError(f"{len(blocks)} denoisers for {n} iterations")
    else:
        blocks = [denoiser] * n

    if x0 is None:
        x0 = _ifft2c(y * mask_tensor(mask, like=y))
    state = ReconState.initial(x0, m)
    for i, den in enumerate(blocks):
        mu = params.mu(i)
        if params.dc_first:
            state.x = dc_update(state.head, y, mask, mu)
            state.buffer = _denoise(den, state, m)
        else:
            state.buffer = _denoise(den, state, m)
            state.x = dc_update(state.head, y, mask, mu)
        state.iteration = i + 1
    return state.head if params.dc_first else state.x


class SoftThresholdDenoiser:
    """Complex soft-thresholding of the DC output, written into every slot.

    The returned residual moves each buffer slot to ``soft(x)``, the prox of
    the l1 norm on pixel magnitudes. Handy as a parameter-free stand-in for a
    learned denoiser; with threshold 0 it is the identity map ``f <- x``.
    """

    residual = True

    def __init__(self, threshold: float):
        if threshold < 0:
            raise ValidationError(f"threshold must be >= 0, got {threshold}")
        self.threshold = float(threshold)

    def shrink(self, x: torch.Tensor) -> torch.Tensor:
        mag = torch.sqrt(x[..., 0:1, :, :] ** 2 + x[..., 1:2, :, :] ** 2)
        safe = torch.where(mag > 0, mag, torch.ones_like(mag))
        gain = torch.clamp(mag - self.threshold, min=0) / safe
        return x * gain

    def __call__(self, buffer: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        m = buffer.shape[-3] // 2
        return _tile(self.shrink(x), m) - buffer


def soft_threshold_denoiser(threshold: float) -> SoftThresholdDenoiser:
    return SoftThresholdDenoiser(threshold)


class ZeroDenoiser:
    residual = True

    def __call__(self, buffer: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        return torch.zeros_like(buffer)
