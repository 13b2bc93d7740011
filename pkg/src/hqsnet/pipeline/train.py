"""Training loop for the unrolled models."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from ..errors import ConfigError, DataError, DivergenceError
from ..models import ModelConfig, UnrolledNet, build_model, save_checkpoint
from ..mri_ops import SamplingMask, forward_model, make_cartesian_mask, normalize_p99
from ..objectives import compound_loss, ms_ssim_scales, psnr, ssim
from .augment import AugmentConfig, augment
from .data import DatasetManifest, check_disjoint

logger = logging.getLogger(__name__)

MASK_POLICIES = ("random_per_sample", "fixed")


@dataclass(frozen=True)
class TrainConfig:
    accel: float = 5.0
    acs_lines: int = 8
    epochs: int = 20
    batch_size: int = 4
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    gamma: float = 0.84
    seed: int = 0
    mask_policy: str = "random_per_sample"
    eval_mask_seed: int = 1234
    noise_sigma: float = 0.0
    augmentation: AugmentConfig = field(default_factory=AugmentConfig)
    deterministic: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.mask_policy not in MASK_POLICIES:
            raise ConfigError(f"mask_policy must be one of {MASK_POLICIES}")
        if not 0 <= self.gamma <= 1:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.accel < 1:
            raise ConfigError("accel must be >= 1")
        if isinstance(self.augmentation, dict):
            object.__setattr__(self, "augmentation", AugmentConfig.from_dict(self.augmentation))
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["augmentation"] = self.augmentation.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)


@dataclass
class TrainResult:
    checkpoint: Path
    history: list[dict]
    best_epoch: int
    out_dir: Path


def derive_seed(*parts: int) -> int:
    """Stable 32-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def simulate(x: torch.Tensor, mask: SamplingMask, noise_sigma: float = 0.0, seed: int = 0):
    """Normalise a ground-truth image and measure it: returns ``(x_norm, y)``."""
    x_norm, _ = normalize_p99(x)
    y = forward_model(x_norm, mask, noise_sigma, seed)
    return x_norm, y


def set_deterministic(seed: int, on: bool = True) -> None:
    torch.manual_seed(seed)
    if on:
        torch.use_deterministic_algorithms(True)


def _prepare_eval(dataset: DatasetManifest, accel: float, acs_lines: int, mask_seed: int):
    """Fixed-mask measurements for every item of an evaluation set."""
    if len(dataset) == 0:
        raise DataError("evaluation set is empty")
    H, W = dataset.items[0].H, dataset.items[0].W
    mask = make_cartesian_mask(H, W, accel, acs_lines, mask_seed)
    out = []
    for i, item in enumerate(dataset.items):
        if (item.H, item.W) != (H, W):
            raise DataError(f"{item.id}: resolution {item.H}x{item.W} differs from mask {H}x{W}")
        x_norm, y = simulate(dataset.load(i), mask)
        out.append((item.id, x_norm, y))
    return mask, out


@torch.no_grad()
def reconstruct_batches(model, ys: list[torch.Tensor], mask: SamplingMask, batch_size: int = 4):
    """Run a model (or any ``(y, mask) -> image`` callable) over measurements."""
    if isinstance(model, torch.nn.Module):
        model.eval()
    m = mask.tensor()
    out = []
    for s in range(0, len(ys), batch_size):
        y = torch.stack(ys[s:s + batch_size])
        out.extend(model(y, m).unbind(0))
    return out


def validate(model, prepared, mask, batch_size: int = 4) -> tuple[float, float]:
    recs = reconstruct_batches(model, [y for _, _, y in prepared], mask, batch_size)
    p = [float(psnr(r.double(), x.double())) for r, (_, x, _) in zip(recs, prepared)]
    s = [float(ssim(r.double(), x.double())) for r, (_, x, _) in zip(recs, prepared)]
    return float(np.mean(p)), float(np.mean(s))


def _batch(dataset: DatasetManifest, indices, cfg: TrainConfig, epoch: int):
    xs, ys, ms = [], [], []
    for idx in indices:
        x = augment(dataset.load(idx), cfg.augmentation, [cfg.seed, epoch, idx])
        h, w = x.shape[-2:]
        if cfg.mask_policy == "fixed":
            mseed = cfg.eval_mask_seed
        else:
            mseed = derive_seed(cfg.seed, epoch, idx, 1)
        mask = make_cartesian_mask(h, w, cfg.accel, cfg.acs_lines, mseed)
        x_norm, y = simulate(x, mask, cfg.noise_sigma, derive_seed(cfg.seed, epoch, idx, 2))
        xs.append(x_norm)
        ys.append(y)
        ms.append(mask.tensor())
    return torch.stack(xs), torch.stack(ys), torch.stack(ms)


def train(model_config: ModelConfig, train_config: TrainConfig, train_set: DatasetManifest,
          val_set: DatasetManifest, out_dir, model: UnrolledNet | None = None) -> TrainResult:
    """Train with Adam on the compound loss; keep the best-validation-PSNR checkpoint.

    Writes ``out_dir/checkpoint`` (best), ``out_dir/history.jsonl`` and
    ``out_dir/run.json``. Every random draw (init, order, augmentation, masks)
    is derived from ``train_config.seed``.
    """
    cfg = train_config
    if len(train_set) == 0 or len(val_set) == 0:
        raise DataError("training and validation sets must be non-empty")
    check_disjoint(train_set, val_set)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    set_deterministic(cfg.seed, cfg.deterministic)
    if model is None:
        model = build_model(model_config)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.betas)
    eval_mask, val_prepared = _prepare_eval(val_set, cfg.accel, cfg.acs_lines, cfg.eval_mask_seed)

    crop = cfg.augmentation.crop or (train_set.items[0].H, train_set.items[0].W)
    run_info = {
        "model": model_config.to_dict(),
        "train": cfg.to_dict(),
        "train_ids": train_set.ids,
        "val_ids": val_set.ids,
        "ms_ssim_scales": ms_ssim_scales(*crop),
    }
    (out_dir / "run.json").write_text(json.dumps(run_info, indent=2))

    history: list[dict] = []
    best_psnr, best_epoch = -np.inf, 0
    ckpt = out_dir / "checkpoint"
    hist_path = out_dir / "history.jsonl"
    hist_path.write_text("")
    n = len(train_set)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        model.train()
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        losses = []
        for s in range(0, n, cfg.batch_size):
            x, y, m = _batch(train_set, order[s:s + cfg.batch_size], cfg, epoch)
            rec = model(y, m)
            loss = compound_loss(rec, x, cfg.gamma)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, step {s // cfg.batch_size}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append(loss.item())
        val_psnr, val_ssim = validate(model, val_prepared, eval_mask, cfg.batch_size)
        rec = {
            "epoch": epoch,
            "train_loss": float(f"{np.mean(losses):.6g}"),
            "val_psnr": float(f"{val_psnr:.6g}"),
            "val_ssim": float(f"{val_ssim:.6g}"),
            "mu": float(f"{model.hqs.mu(0).item():.6g}"),
        }
        history.append(rec)
        with open(hist_path, "a") as fh:
            fh.write(json.dumps(rec) + "\n")
        logger.info("epoch %d loss %.5f val psnr %.3f ssim %.4f (%.1fs)", epoch, rec["train_loss"],
                    val_psnr, val_ssim, time.perf_counter() - t0)
        if val_psnr > best_psnr:
            best_psnr, best_epoch = val_psnr, epoch
            save_checkpoint(model, ckpt, extra={"epoch": epoch, "val_psnr": rec["val_psnr"]})
    return TrainResult(checkpoint=ckpt, history=history, best_epoch=best_epoch, out_dir=out_dir)
