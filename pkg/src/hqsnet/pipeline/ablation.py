"""Design ablation: DC/DN order, denoiser formulation and buffer size."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..models import ModelConfig
from ..objectives import fmt
from .data import DatasetManifest
from .evaluate import RECON, evaluate
from .train import TrainConfig, train

# Rows of the design table, top to bottom.
TABLE3_GRID: tuple[dict, ...] = (
    {"variant": "dccnn"},
    {"dc_first": True, "residual_dn": False, "buffer_m": 1},
    {"dc_first": True, "residual_dn": False, "buffer_m": 5},
    {"dc_first": True, "residual_dn": True, "buffer_m": 1},
    {"dc_first": True, "residual_dn": True, "buffer_m": 3},
    {"dc_first": True, "residual_dn": True, "buffer_m": 5},
    {"dc_first": True, "residual_dn": True, "buffer_m": 7},
)


def cell_name(cfg: ModelConfig) -> str:
    return f"{cfg.variant}-dc{int(cfg.dc_first)}-res{int(cfg.residual_dn)}-m{cfg.buffer_m}"


@dataclass
class AblationReport:
    rows: list[dict] = field(default_factory=list)

    def find(self, **flags) -> dict:
        hits = [r for r in self.rows if all(r[k] == v for k, v in flags.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {flags}")
        return hits[0]

    def csv_text(self) -> str:
        cols = ["cell", "variant", "dc_first", "residual_dn", "buffer_m",
                "psnr_mean", "psnr_std", "ssim_mean", "ssim_std", "zf_psnr_mean", "zf_ssim_mean"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([fmt(r[c]) if isinstance(r[c], float) else r[c] for c in cols])
        return buf.getvalue()

    def table(self) -> str:
        """Markdown table in the layout of the published design ablation."""
        lines = [
            "| Model | DC_first | DN design | no buffer | buffer=3 | buffer=5 | buffer=7 | PSNR/SSIM |",
            "|---|---|---|---|---|---|---|---|",
        ]
        for r in self.rows:
            tick = lambda b: "✓" if b else ""  # noqa: E731
            name = "DC-CNN" if r["variant"] == "dccnn" else (
                "HQSNet" if r["dc_first"] and r["residual_dn"] and r["buffer_m"] > 1 else "-")
            m = r["buffer_m"]
            lines.append(
                f"| {name} | {tick(r['dc_first'])} | {tick(r['residual_dn'])} | {tick(m == 1)} "
                f"| {tick(m == 3)} | {tick(m == 5)} | {tick(m == 7)} "
                f"| {r['psnr_mean']:.2f}/{r['ssim_mean']:.3f} |"
            )
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(self.csv_text())
        (out / "ablation.json").write_text(json.dumps(self.rows, indent=2))
        (out / "ablation.md").write_text(self.table())


def run_ablation(base_model: ModelConfig, base_train: TrainConfig, grid, train_set: DatasetManifest,
                 val_set: DatasetManifest, test_set: DatasetManifest, out_dir) -> AblationReport:
    """Train and evaluate one model per grid cell.

    ``grid`` is a sequence of ``ModelConfig`` overrides; everything else,
    including the seed, is shared so cells differ only in the varied flags.
    Each cell lives in ``out_dir/<cell name>``.
    """
    out_dir = Path(out_dir)
    report = AblationReport()
    for overrides in grid:
        cfg = base_model.with_(**overrides)
        name = cell_name(cfg)
        result = train(cfg, base_train, train_set, val_set, out_dir / name)
        metrics = evaluate(result.checkpoint, test_set, base_train.eval_mask_seed, base_train.accel,
                           base_train.acs_lines, out_dir=out_dir / name / "test")
        summ = metrics.summary()
        report.rows.append({
            "cell": name,
            "variant": cfg.variant,
            "dc_first": cfg.dc_first,
            "residual_dn": cfg.residual_dn,
            "buffer_m": cfg.buffer_m,
            "psnr_mean": summ[RECON]["psnr_db"]["mean"],
            "psnr_std": summ[RECON]["psnr_db"]["std"],
            "ssim_mean": summ[RECON]["ssim"]["mean"],
            "ssim_std": summ[RECON]["ssim"]["std"],
            "zf_psnr_mean": summ["zero_filled"]["psnr_db"]["mean"],
            "zf_ssim_mean": summ["zero_filled"]["ssim"]["mean"],
            "checkpoint": str(result.checkpoint),
        })
    report.write(out_dir)
    return report
