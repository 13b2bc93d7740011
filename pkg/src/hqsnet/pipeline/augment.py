"""Seeded random affine + crop augmentation for 2-channel images."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
import torch
from scipy import ndimage

from ..errors import ConfigError, ValidationError


@dataclass(frozen=True)
class AugmentConfig:
    crop: tuple[int, int] | None = (160, 128)
    max_rotate_deg: float = 15.0
    max_translate_frac: float = 0.05
    scale_range: tuple[float, float] = (0.95, 1.05)

    def __post_init__(self):
        if self.max_rotate_deg < 0 or self.max_translate_frac < 0:
            raise ConfigError("rotation and translation limits must be non-negative")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ConfigError(f"invalid scale_range {self.scale_range}")
        if self.crop is not None:
            object.__setattr__(self, "crop", tuple(int(c) for c in self.crop))
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        d = dict(d)
        if d.get("crop") is not None:
            d["crop"] = tuple(d["crop"])
        if "scale_range" in d:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


IDENTITY = AugmentConfig(crop=None, max_rotate_deg=0.0, max_translate_frac=0.0, scale_range=(1.0, 1.0))


def affine(x: torch.Tensor, rotate_deg: float = 0.0, translate=(0.0, 0.0), scale: float = 1.0) -> torch.Tensor:
    """Rotate (counter-clockwise as displayed, row 0 at the top), scale about
    the image centre, then shift by ``translate`` = (rows, cols) pixels.

    Bilinear interpolation on each channel, zeros outside the field of view.
    """
    H, W = x.shape[-2:]
    t = np.deg2rad(rotate_deg)
    # forward map on (row, col): p' = c + s R (p - c) + t
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    inv = rot.T / scale
    centre = np.array([(H - 1) / 2, (W - 1) / 2])
    offset = centre - inv @ (centre + np.asarray(translate, dtype=float))
    arr = x.detach().cpu().numpy()
    flat = arr.reshape(-1, H, W)
    out = np.stack([
        ndimage.affine_transform(ch, inv, offset=offset, order=1, mode="constant", cval=0.0)
        for ch in flat
    ]).reshape(arr.shape)
    return torch.from_numpy(out).to(x.dtype)


def sample_params(config: AugmentConfig, shape: tuple[int, int], seed) -> dict:
    H, W = shape
    rng = np.random.default_rng(seed)
    rot = rng.uniform(-config.max_rotate_deg, config.max_rotate_deg)
    ty = rng.uniform(-config.max_translate_frac, config.max_translate_frac) * H
    tx = rng.uniform(-config.max_translate_frac, config.max_translate_frac) * W
    scale = rng.uniform(*config.scale_range)
    out_h, out_w = config.crop if config.crop is not None else (H, W)
    top = int(rng.integers(0, H - out_h + 1))
    left = int(rng.integers(0, W - out_w + 1))
    return {"rotate_deg": rot, "translate": (ty, tx), "scale": scale, "top": top, "left": left,
            "out_h": out_h, "out_w": out_w}


def augment(x: torch.Tensor, config: AugmentConfig, seed) -> torch.Tensor:
    """Random affine then random crop; ``seed`` is anything ``default_rng`` takes."""
    H, W = x.shape[-2:]
    if config.crop is not None and (config.crop[0] > H or config.crop[1] > W):
        raise ValidationError(f"crop {config.crop} larger than image {H}x{W}")
    p = sample_params(config, (H, W), seed)
    if p["rotate_deg"] != 0 or p["translate"] != (0.0, 0.0) or p["scale"] != 1.0:
        x = affine(x, p["rotate_deg"], p["translate"], p["scale"])
    return x[..., p["top"]:p["top"] + p["out_h"], p["left"]:p["left"] + p["out_w"]].clone()
