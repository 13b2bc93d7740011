"""Single-coil cartesian measurement model.

Images are real tensors with a leading real/imag channel pair, ``(..., 2, H, W)``.
k-space is a complex tensor ``(..., H, W)`` with the zero frequency at the array
centre. The Fourier pair is orthonormal, so ``ifft2c`` is both the inverse and
the adjoint of ``fft2c``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigError, DegenerateInputError, ValidationError

MIN_SIZE = 8


def _check_image(x: torch.Tensor, name: str = "image") -> None:
    if not isinstance(x, torch.Tensor):
        raise ValidationError(f"{name} must be a torch.Tensor, got {type(x).__name__}")
    if x.is_complex() or x.ndim < 3 or x.shape[-3] != 2:
        raise ValidationError(f"{name} must be real with shape (..., 2, H, W), got {tuple(x.shape)}")
    if x.shape[-2] < MIN_SIZE or x.shape[-1] < MIN_SIZE:
        raise ValidationError(f"{name} spatial size {tuple(x.shape[-2:])} below {MIN_SIZE}x{MIN_SIZE}")
    if not torch.isfinite(x).all():
        raise ValidationError(f"{name} contains non-finite values")


def _check_kspace(k: torch.Tensor) -> None:
    if not isinstance(k, torch.Tensor) or not k.is_complex() or k.ndim < 2:
        raise ValidationError("k-space must be a complex tensor of shape (..., H, W)")
    if k.shape[-2] < MIN_SIZE or k.shape[-1] < MIN_SIZE:
        raise ValidationError(f"k-space size {tuple(k.shape[-2:])} below {MIN_SIZE}x{MIN_SIZE}")
    if not torch.isfinite(torch.view_as_real(k)).all():
        raise ValidationError("k-space contains non-finite values")


def to_complex(x: torch.Tensor) -> torch.Tensor:
    """(..., 2, H, W) real -> (..., H, W) complex."""
    return torch.complex(x[..., 0, :, :], x[..., 1, :, :])


def to_channels(z: torch.Tensor) -> torch.Tensor:
    """(..., H, W) complex -> (..., 2, H, W) real."""
    return torch.stack((z.real, z.imag), dim=-3)


def magnitude(x: torch.Tensor) -> torch.Tensor:
    """Pixelwise modulus of a 2-channel image, shape (..., H, W)."""
    return torch.abs(to_complex(x))


# Unchecked variants for use inside networks, where validation per call would
# only cost time.
def _fft2c(x: torch.Tensor) -> torch.Tensor:
    z = to_complex(x)
    z = torch.fft.ifftshift(z, dim=(-2, -1))
    z = torch.fft.fft2(z, norm="ortho")
    return torch.fft.fftshift(z, dim=(-2, -1))


def _ifft2c(k: torch.Tensor) -> torch.Tensor:
    z = torch.fft.ifftshift(k, dim=(-2, -1))
    z = torch.fft.ifft2(z, norm="ortho")
    return to_channels(torch.fft.fftshift(z, dim=(-2, -1)))


def fft2c(image: torch.Tensor) -> torch.Tensor:
    """Centred, orthonormal 2D DFT of a 2-channel image."""
    _check_image(image)
    return _fft2c(image)


def ifft2c(kspace: torch.Tensor) -> torch.Tensor:
    """Inverse (and adjoint) of :func:`fft2c`; returns a 2-channel image."""
    _check_kspace(kspace)
    return _ifft2c(kspace)


@dataclass(frozen=True)
class SamplingMask:
    """Cartesian phase-encode mask.

    ``data`` is a uint8 ``(H, W)`` array whose rows are all-0 or all-1; row index
    is the phase-encode direction, columns the readout.
    """

    data: np.ndarray
    accel: float
    acs_lines: int
    seed: int

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.data.shape)

    @property
    def lines(self) -> np.ndarray:
        return self.data[:, 0].astype(bool)

    @property
    def n_lines(self) -> int:
        return int(self.lines.sum())

    @property
    def achieved_accel(self) -> float:
        return self.data.shape[0] / self.n_lines

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self.data.astype(np.float32)).to(dtype)


def n_sampled_lines(H: int, accel: float) -> int:
    # Round half up; Python's round() would send 2.5 -> 2.
    return int(np.floor(H / accel + 0.5))


def make_cartesian_mask(H: int, W: int, accel: float, acs_lines: int = 8, seed: int = 0) -> SamplingMask:
    """Random line mask with a fully sampled centre.

    The total line budget is ``round(H / accel)`` including the ``acs_lines``
    central rows; the remaining rows are drawn uniformly without replacement
    from a ``numpy`` generator seeded with ``seed``.
    """
    if H < MIN_SIZE or W < MIN_SIZE:
        raise ConfigError(f"mask size {H}x{W} below {MIN_SIZE}x{MIN_SIZE}")
    if not accel >= 1:
        raise ConfigError(f"acceleration must be >= 1, got {accel}")
    if acs_lines < 0:
        raise ConfigError(f"acs_lines must be non-negative, got {acs_lines}")
    budget = n_sampled_lines(H, accel)
    if budget < 1:
        raise ConfigError(f"acceleration {accel} leaves no lines out of {H}")
    if acs_lines > budget:
        raise ConfigError(f"acs_lines={acs_lines} exceeds the line budget round({H}/{accel})={budget}")

    lines = np.zeros(H, dtype=bool)
    start = H // 2 - acs_lines // 2
    lines[start:start + acs_lines] = True
    rest = np.flatnonzero(~lines)
    rng = np.random.default_rng(seed)
    lines[rng.choice(rest, size=budget - acs_lines, replace=False)] = True

    data = np.repeat(lines[:, None], W, axis=1).astype(np.uint8)
    return SamplingMask(data=data, accel=float(accel), acs_lines=int(acs_lines), seed=int(seed))


def mask_tensor(mask, like: torch.Tensor | None = None) -> torch.Tensor:
    """Accept a SamplingMask, ndarray or tensor; return a real tensor."""
    if isinstance(mask, SamplingMask):
        m = mask.tensor()
    elif isinstance(mask, np.ndarray):
        m = torch.from_numpy(mask.astype(np.float32))
    else:
        m = mask
    if like is not None:
        real_dtype = like.real.dtype if like.is_complex() else like.dtype
        m = m.to(dtype=real_dtype, device=like.device)
    return m


def _check_mask_shape(m: torch.Tensor, hw: tuple[int, int]) -> None:
    if tuple(m.shape[-2:]) != tuple(hw):
        raise ValidationError(f"mask shape {tuple(m.shape[-2:])} does not match data {tuple(hw)}")


def forward_model(x: torch.Tensor, mask, noise_sigma: float = 0.0, seed: int = 0) -> torch.Tensor:
    """Simulate undersampled k-space ``M * (F x + eps)``.

    ``eps`` is i.i.d. complex Gaussian with standard deviation ``noise_sigma``
    on each of the real and imaginary parts.
    """
    _check_image(x)
    if noise_sigma < 0:
        raise ValidationError(f"noise_sigma must be >= 0, got {noise_sigma}")
    k = _fft2c(x)
    m = mask_tensor(mask, like=k)
    _check_mask_shape(m, k.shape[-2:])
    if noise_sigma > 0:
        gen = torch.Generator().manual_seed(int(seed))
        re = torch.randn(k.shape, generator=gen, dtype=k.real.dtype)
        im = torch.randn(k.shape, generator=gen, dtype=k.real.dtype)
        k = k + noise_sigma * torch.complex(re, im).to(k.device)
    return k * m


def zero_filled(y: torch.Tensor, mask) -> torch.Tensor:
    """Adjoint of the undersampled operator applied to ``y``."""
    _check_kspace(y)
    m = mask_tensor(mask, like=y)
    _check_mask_shape(m, y.shape[-2:])
    return _ifft2c(y * m)


def normalize_p99(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Scale so the 99th-percentile pixel magnitude equals one.

    Percentile uses linear interpolation between order statistics. For batched
    input ``(B, 2, H, W)`` each image gets its own scale and ``scale`` has shape
    ``(B,)``; for a single image ``scale`` is 0-d.
    """
    _check_image(x)
    mag = magnitude(x)
    flat = mag.reshape(-1, mag.shape[-2] * mag.shape[-1])
    scale = torch.quantile(flat, 0.99, dim=-1, interpolation="linear")
    if (scale <= 0).any():
        raise DegenerateInputError("cannot normalise an image whose 99th-percentile magnitude is zero")
    scale = scale.reshape(x.shape[:-3])
    return x / scale[..., None, None, None], scale
