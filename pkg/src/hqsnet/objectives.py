"""Reconstruction metrics and the MS-SSIM + L1 training loss.

Metric conventions (all on magnitude images):

* NRMSE (%) = 100 * ||x - ref||_2 / ||ref||_2
* PSNR (dB) = 10 log10(max(ref)^2 / MSE), capped at ``PSNR_CEILING``
* SSIM: 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03, data range
  max(ref), averaged over the valid (unpadded) region
* MS-SSIM: up to five dyadic scales with the standard weights; scales whose
  image would be no larger than ``(win - 1) * 2**s`` are dropped and the
  remaining weights renormalised
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch.nn import functional as F

from .errors import ConfigError, DegenerateInputError, ValidationError

logger = logging.getLogger(__name__)

PSNR_CEILING = 100.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WIN_SIZE = 11
WIN_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _as_magnitude(x: torch.Tensor) -> torch.Tensor:
    """2-channel images (..., 2, H, W) -> magnitudes; plain (..., H, W) passes through.

    A tensor is treated as 2-channel when its third-from-last dim is 2 and it
    has at least three dims; pass magnitudes with an explicit batch/channel
    axis of size 1 to avoid ambiguity.
    """
    if x.is_complex():
        return x.abs()
    if x.ndim >= 3 and x.shape[-3] == 2:
        return torch.abs(torch.complex(x[..., 0, :, :], x[..., 1, :, :]))
    return x


def _pair(x, ref):
    x, ref = _as_magnitude(torch.as_tensor(x)), _as_magnitude(torch.as_tensor(ref))
    if x.shape != ref.shape:
        raise ValidationError(f"shape mismatch {tuple(x.shape)} vs {tuple(ref.shape)}")
    return x, ref


def nrmse(x, ref) -> torch.Tensor:
    """Percent error of magnitudes; one value per image over the last two dims."""
    x, ref = _pair(x, ref)
    den = torch.linalg.vector_norm(ref, dim=(-2, -1))
    if (den == 0).any():
        raise DegenerateInputError("reference image is identically zero")
    return 100.0 * torch.linalg.vector_norm(x - ref, dim=(-2, -1)) / den


def psnr(x, ref) -> torch.Tensor:
    x, ref = _pair(x, ref)
    peak = ref.amax(dim=(-2, -1))
    if (peak == 0).any():
        raise DegenerateInputError("reference image is identically zero")
    mse = ((x - ref) ** 2).mean(dim=(-2, -1))
    value = 10.0 * torch.log10(peak ** 2 / mse)
    return torch.clamp(torch.nan_to_num(value, posinf=PSNR_CEILING), max=PSNR_CEILING)


def gaussian_window(size: int = WIN_SIZE, sigma: float = WIN_SIGMA, dtype=torch.float64) -> torch.Tensor:
    r = torch.arange(size, dtype=dtype) - (size - 1) / 2
    g = torch.exp(-(r ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter(img: torch.Tensor, win: torch.Tensor) -> torch.Tensor:
    # img (N, 1, H, W); separable valid convolution
    k = win.to(img.dtype)
    img = F.conv2d(img, k.view(1, 1, -1, 1))
    return F.conv2d(img, k.view(1, 1, 1, -1))


def _ssim_terms(x: torch.Tensor, y: torch.Tensor, data_range: torch.Tensor, win: torch.Tensor):
    """Mean SSIM and mean contrast-structure term per image. x, y: (N, 1, H, W)."""
    c1 = (K1 * data_range) ** 2
    c2 = (K2 * data_range) ** 2
    c1 = c1.view(-1, 1, 1, 1)
    c2 = c2.view(-1, 1, 1, 1)
    mu_x, mu_y = _filter(x, win), _filter(y, win)
    sxx = _filter(x * x, win) - mu_x * mu_x
    syy = _filter(y * y, win) - mu_y * mu_y
    sxy = _filter(x * y, win) - mu_x * mu_y
    cs_map = (2 * sxy + c2) / (sxx + syy + c2)
    ssim_map = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1) * cs_map
    return ssim_map.mean(dim=(-3, -2, -1)), cs_map.mean(dim=(-3, -2, -1))


def _prep(x, ref, data_range):
    x, ref = _pair(x, ref)
    lead = x.shape[:-2]
    H, W = x.shape[-2:]
    if H < WIN_SIZE or W < WIN_SIZE:
        raise ValidationError(f"image {H}x{W} smaller than the {WIN_SIZE}x{WIN_SIZE} window")
    xs = x.reshape(-1, 1, H, W)
    rs = ref.reshape(-1, 1, H, W)
    if data_range is None:
        dr = rs.detach().amax(dim=(-3, -2, -1))
    else:
        dr = torch.as_tensor(data_range, dtype=xs.dtype).expand(xs.shape[0])
    if (dr <= 0).any():
        raise DegenerateInputError("data range must be positive")
    return xs, rs, dr.to(xs.dtype), lead


def ssim(x, ref, data_range=None) -> torch.Tensor:
    """Mean SSIM per image; ``data_range`` defaults to max |ref| per image."""
    xs, rs, dr, lead = _prep(x, ref, data_range)
    s, _ = _ssim_terms(xs, rs, dr, gaussian_window(dtype=xs.dtype))
    return s.reshape(lead)


def ms_ssim_scales(H: int, W: int, max_scales: int = len(MS_SSIM_WEIGHTS)) -> int:
    """Number of dyadic scales whose coarsest image still exceeds the window."""
    n = 0
    while n < max_scales and min(H, W) > (WIN_SIZE - 1) * 2 ** n:
        n += 1
    return n


_warned_scales: set = set()


def ms_ssim(x, ref, data_range=None) -> torch.Tensor:
    """Multi-scale SSIM per image.

    Uses ``prod_{j<s} cs_j^{w_j} * ssim_s^{w_s}`` with 2x2 average pooling
    between scales; negative contrast-structure terms are clamped to zero
    before exponentiation. Images under 161 px on a side get fewer scales.
    """
    xs, rs, dr, lead = _prep(x, ref, data_range)
    H, W = xs.shape[-2:]
    n = ms_ssim_scales(H, W)
    if n < len(MS_SSIM_WEIGHTS) and (H, W) not in _warned_scales:
        _warned_scales.add((H, W))
        logger.info("MS-SSIM on %dx%d uses %d of %d scales", H, W, n, len(MS_SSIM_WEIGHTS))
    w = torch.tensor(MS_SSIM_WEIGHTS[:n], dtype=xs.dtype)
    w = w / w.sum()
    win = gaussian_window(dtype=xs.dtype)
    out = torch.ones(xs.shape[0], dtype=xs.dtype, device=xs.device)
    for j in range(n):
        s, cs = _ssim_terms(xs, rs, dr, win)
        if j == n - 1:
            out = out * torch.clamp(s, min=0) ** w[j]
        else:
            out = out * torch.clamp(cs, min=0) ** w[j]
            xs = F.avg_pool2d(xs, 2)
            rs = F.avg_pool2d(rs, 2)
    return out.reshape(lead)


def compound_loss(x_rec: torch.Tensor, x_gt: torch.Tensor, gamma: float = 0.84) -> torch.Tensor:
    """``gamma * (1 - MS-SSIM(|x_rec|, |x_gt|)) + (1 - gamma) * mean|x_rec - x_gt|``.

    Inputs are 2-channel images ``(B, 2, H, W)`` (or ``(2, H, W)``); the L1
    term runs over both channels, the MS-SSIM term over magnitudes with the
    ground-truth maximum as data range. Batch entries are averaged.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
    if x_rec.shape != x_gt.shape:
        raise ValidationError(f"shape mismatch {tuple(x_rec.shape)} vs {tuple(x_gt.shape)}")
    l1 = (x_rec - x_gt).abs().mean()
    if gamma == 0.0:
        return l1
    structural = 1.0 - ms_ssim(x_rec, x_gt).mean()
    return gamma * structural + (1.0 - gamma) * l1


# --------------------------------------------------------------------------
# reports

METRIC_NAMES = ("nrmse_percent", "psnr_db", "ssim")


def fmt(v: float) -> str:
    return f"{float(v):.6g}"


@dataclass
class MetricReport:
    """Per-image metrics for one or more methods plus mean/std (population)."""

    ids: list[str]
    methods: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def add(self, method: str, nrmse_v, psnr_v, ssim_v) -> None:
        rows = self.methods.setdefault(method, {k: [] for k in METRIC_NAMES})
        rows["nrmse_percent"].append(float(nrmse_v))
        rows["psnr_db"].append(float(psnr_v))
        rows["ssim"].append(float(ssim_v))

    def summary(self) -> dict:
        out = {}
        for method, rows in self.methods.items():
            out[method] = {
                k: {"mean": float(np.mean(v)), "std": float(np.std(v))} for k, v in rows.items()
            }
        return out

    def mean(self, method: str, metric: str) -> float:
        return float(np.mean(self.methods[method][metric]))

    def csv_text(self) -> str:
        """Header ``id,<method>_<metric>...``; one row per image in input order,
        then ``mean`` and ``std`` footer rows. Values use 6 significant digits."""
        cols = [(m, k) for m in self.methods for k in METRIC_NAMES]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["id"] + [f"{m}_{k}" for m, k in cols])
        for i, item in enumerate(self.ids):
            w.writerow([item] + [fmt(self.methods[m][k][i]) for m, k in cols])
        summ = self.summary()
        for stat in ("mean", "std"):
            w.writerow([stat] + [fmt(summ[m][k][stat]) for m, k in cols])
        return buf.getvalue()

    def json_dict(self) -> dict:
        summ = self.summary()
        return {
            "n_items": len(self.ids),
            **self.meta,
            "methods": {
                m: {k: {s: float(fmt(v)) for s, v in d.items()} for k, d in md.items()}
                for m, md in summ.items()
            },
        }

    def write(self, out_dir, stem: str = "metrics") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.csv").write_text(self.csv_text())
        (out / f"{stem}.json").write_text(json.dumps(self.json_dict(), indent=2))


def score(x: torch.Tensor, ref: torch.Tensor) -> tuple[float, float, float]:
    """(NRMSE %, PSNR dB, SSIM) of one image against its reference."""
    x = x.detach().to(torch.float64)
    ref = ref.detach().to(torch.float64)
    return float(nrmse(x, ref)), float(psnr(x, ref)), float(ssim(x, ref))
