"""``hqsnet`` command-line entry point.

Every command prints its resolved configuration as JSON first. Values may
come from ``--config FILE.json``; explicit flags win. Outputs are assembled
in a temporary sibling of ``--out`` and moved into place only on success.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .container import read_container, read_meta, write_container
from .errors import ConfigError, DataError, HqsError
from .models import ModelConfig, analyze, load_checkpoint
from .mri_ops import SamplingMask, make_cartesian_mask, magnitude, zero_filled
from .objectives import MetricReport, score
from .pipeline import (TABLE3_GRID, AugmentConfig, DatasetManifest, TrainConfig,
                       generate_phantom_dataset, run_ablation, train)
from .pipeline import evaluate as evaluate_fn
from .pipeline.train import set_deterministic, simulate

logger = logging.getLogger("hqsnet")

ERROR_MAP_SCALE = 5.0


# --------------------------------------------------------------------------
# helpers


@contextmanager
def staged_output(out: Path, is_dir: bool = True):
    """Yield a temporary path next to ``out``; move it over ``out`` on success."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp_root = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    staged = tmp_root / out.name
    if is_dir:
        staged.mkdir()
    try:
        yield staged
        if is_dir:
            if out.exists():
                shutil.rmtree(out)
            staged.rename(out)
        else:
            for f in tmp_root.iterdir():
                f.replace(out.parent / f.name)
    finally:
        shutil.rmtree(tmp_root, ignore_errors=True)


def load_mask(path) -> SamplingMask:
    arrays = read_container(path)
    if "mask" not in arrays:
        raise DataError(f"{path}: container has no 'mask' array")
    meta = read_meta(path)
    return SamplingMask(arrays["mask"], float(meta.get("accel", 0.0)), int(meta.get("acs_lines", 0)),
                        int(meta.get("seed", 0)))


def save_mask(mask: SamplingMask, stem) -> None:
    write_container(stem, {"mask": mask.data}, meta={
        "accel": mask.accel, "acs_lines": mask.acs_lines, "seed": mask.seed,
        "sampled_lines": mask.n_lines, "achieved_accel": mask.achieved_accel,
    })


def image_containers(directory) -> dict[str, np.ndarray]:
    """id -> ``image`` array for every container in ``directory`` (a dataset
    directory with a manifest is also accepted)."""
    directory = Path(directory)
    if (directory / "manifest.json").exists():
        man = DatasetManifest.load_manifest(directory)
        return {it.id: man.load(i).numpy() for i, it in enumerate(man.items)}
    out = {}
    for p in sorted(directory.glob("*.json")):
        arrays = read_container(p)
        if "image" in arrays:
            out[p.stem] = arrays["image"]
    if not out:
        raise DataError(f"no image containers in {directory}")
    return out


def model_config_from(args) -> ModelConfig:
    d = {}
    if getattr(args, "model_config", None):
        mc = args.model_config
        if isinstance(mc, dict):
            d.update(mc)
        else:
            try:
                d.update(json.loads(Path(mc).read_text()))
            except FileNotFoundError as exc:
                raise ConfigError(f"model config {mc} not found") from exc
            except json.JSONDecodeError as exc:
                raise ConfigError(f"model config {mc} is not valid JSON: {exc}") from exc
        d = d.get("model", d)
    for key in ("variant", "n_iterations", "conv_layers_per_block", "channels", "buffer_m"):
        v = getattr(args, key, None)
        if v is not None:
            d[key] = v
    return ModelConfig.from_dict(d)


def train_config_from(args) -> TrainConfig:
    aug = AugmentConfig(
        crop=tuple(args.crop) if args.crop else None,
        max_rotate_deg=args.max_rotate_deg,
        max_translate_frac=args.max_translate_frac,
        scale_range=tuple(args.scale_range),
    )
    return TrainConfig(
        accel=args.accel, acs_lines=args.acs, epochs=args.epochs, batch_size=args.batch_size,
        learning_rate=args.lr, gamma=args.gamma, seed=args.seed, mask_policy=args.mask_policy,
        eval_mask_seed=args.mask_seed, augmentation=aug, deterministic=args.deterministic,
    )


def to_png(values: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(np.clip(values, 0, 1) * 255).astype(np.uint8), mode="L").save(path)


def error_map_u8(recon: np.ndarray, gt: np.ndarray, scale: float = ERROR_MAP_SCALE) -> np.ndarray:
    """``255 * min(1, scale * |recon - gt| / max|gt|)`` on magnitudes, as uint8."""
    dr = gt.max()
    if dr <= 0:
        raise DataError("ground truth is identically zero")
    return np.round(np.clip(scale * np.abs(recon - gt) / dr, 0, 1) * 255).astype(np.uint8)


# --------------------------------------------------------------------------
# commands


def cmd_mask(args) -> dict:
    mask = make_cartesian_mask(args.height, args.width, args.accel, args.acs, args.seed)
    with staged_output(Path(args.out).with_suffix(".json"), is_dir=False) as staged:
        save_mask(mask, staged)
    print(f"sampled lines: {mask.n_lines}")
    print(f"acceleration: {mask.achieved_accel:.6g}")
    return {"sampled_lines": mask.n_lines, "achieved_accel": mask.achieved_accel}


def cmd_phantoms(args) -> dict:
    man = generate_phantom_dataset(args.count, args.height, args.width, args.seed, args.out, args.split)
    print(f"wrote {len(man)} phantoms to {args.out}")
    return {"count": len(man)}


def cmd_simulate(args) -> dict:
    man = DatasetManifest.load_manifest(args.input)
    mask = load_mask(args.mask)
    with staged_output(Path(args.out)) as out:
        save_mask(mask, out / "mask")
        for i, item in enumerate(man.items):
            if (item.H, item.W) != mask.shape:
                raise DataError(f"{item.id}: image {item.H}x{item.W} vs mask {mask.shape}")
            x, y = simulate(man.load(i), mask, args.noise_sigma, args.seed + i)
            write_container(out / "kspace" / item.id, {"kspace": y.numpy()})
            write_container(out / "target" / item.id, {"image": x.numpy()})
            write_container(out / "zero_filled" / item.id, {"image": zero_filled(y, mask).numpy()})
    print(f"simulated {len(man)} items")
    return {"count": len(man)}


def cmd_train(args) -> dict:
    mc = model_config_from(args)
    tc = train_config_from(args)
    tr = DatasetManifest.load_manifest(args.train)
    va = DatasetManifest.load_manifest(args.val)
    with staged_output(Path(args.out)) as out:
        res = train(mc, tc, tr, va, out)
    print(f"best epoch {res.best_epoch}: val psnr {res.history[res.best_epoch - 1]['val_psnr']}")
    return {"best_epoch": res.best_epoch}


def cmd_reconstruct(args) -> dict:
    model = load_checkpoint(args.checkpoint)
    src = Path(args.input)
    mask = load_mask(args.mask if args.mask else src / "mask")
    files = sorted((src / "kspace").glob("*.json")) if (src / "kspace").is_dir() else [src]
    ys = {}
    for f in files:
        arrays = read_container(f)
        if "kspace" not in arrays:
            raise DataError(f"{f}: no 'kspace' array")
        y = torch.from_numpy(arrays["kspace"])
        if tuple(y.shape[-2:]) != mask.shape:
            raise DataError(f"{f.stem}: k-space {tuple(y.shape)} vs mask {mask.shape}")
        ys[Path(f).stem] = y
    with staged_output(Path(args.out)) as out, torch.no_grad():
        m = mask.tensor()
        for name, y in ys.items():
            rec = model(y[None], m)[0]
            write_container(out / name, {"image": rec.numpy()})
    print(f"reconstructed {len(ys)} items")
    return {"count": len(ys)}


def cmd_evaluate(args) -> dict:
    test = DatasetManifest.load_manifest(args.test)
    with staged_output(Path(args.out)) as out:
        rep = evaluate_fn(args.checkpoint, test, args.mask_seed, args.accel, args.acs, out_dir=out)
    print(json.dumps(rep.json_dict()["methods"], indent=2))
    return rep.json_dict()


def cmd_ablate(args) -> dict:
    base = model_config_from(args)
    tc = train_config_from(args)
    if args.grid:
        grid = json.loads(Path(args.grid).read_text())
    else:
        grid = list(TABLE3_GRID)
    tr = DatasetManifest.load_manifest(args.train)
    va = DatasetManifest.load_manifest(args.val)
    te = DatasetManifest.load_manifest(args.test)
    with staged_output(Path(args.out)) as out:
        rep = run_ablation(base, tc, grid, tr, va, te, out)
    print(rep.table())
    return {"rows": len(rep.rows)}


def cmd_analyze(args) -> dict:
    cfg = model_config_from(args)
    rep = analyze(cfg, args.height, args.width)
    print(rep.summary())
    print(f"total_parameters: {rep.total_parameters}")
    print(f"conv_parameters: {rep.conv_parameters}")
    print(f"flops_macs: {rep.flops:.0f} at {rep.height}x{rep.width}")
    return {"total_parameters": rep.total_parameters, "flops": rep.flops}


def cmd_report(args) -> dict:
    recons = image_containers(args.recon_dir)
    gts = image_containers(args.gt_dir)
    missing = sorted(set(recons) - set(gts))
    if missing:
        raise DataError(f"no ground truth for {missing}")
    ids = sorted(recons)
    report = MetricReport(ids=ids, meta={"error_map_scale": args.error_scale})
    with staged_output(Path(args.out)) as out:
        img_dir = out / "images"
        img_dir.mkdir()
        for i in ids:
            r, g = torch.from_numpy(recons[i]), torch.from_numpy(gts[i])
            if r.shape != g.shape:
                raise DataError(f"{i}: shape {tuple(r.shape)} vs {tuple(g.shape)}")
            report.add("reconstruction", *score(r, g))
            rm, gm = magnitude(r.double()).numpy(), magnitude(g.double()).numpy()
            dr = gm.max()
            to_png(rm / dr, img_dir / f"{i}_recon.png")
            to_png(gm / dr, img_dir / f"{i}_gt.png")
            Image.fromarray(error_map_u8(rm, gm, args.error_scale), mode="L").save(img_dir / f"{i}_error.png")
        report.write(out)
        (out / "report_meta.json").write_text(json.dumps({
            "error_map_scale": args.error_scale,
            "error_map_formula": "255*min(1, scale*|recon-gt|/max|gt|) on magnitudes",
            "image_window": "per-image max |gt| maps to 255",
        }, indent=2))
    print(report.csv_text(), end="")
    return report.json_dict()


# --------------------------------------------------------------------------
# parser


def _add_model_flags(p):
    p.add_argument("--model-config", help="JSON file with ModelConfig fields")
    p.add_argument("--variant", choices=["hqsnet", "hqsnet_unet", "dccnn"])
    p.add_argument("--n-iterations", dest="n_iterations", type=int)
    p.add_argument("--conv-layers", dest="conv_layers_per_block", type=int)
    p.add_argument("--channels", type=int)
    p.add_argument("--buffer-m", dest="buffer_m", type=int)


def _add_train_flags(p):
    p.add_argument("--train", required=True, help="training manifest")
    p.add_argument("--val", required=True, help="validation manifest")
    p.add_argument("--accel", type=float, default=5.0)
    p.add_argument("--acs", type=int, default=8)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--gamma", type=float, default=0.84)
    p.add_argument("--mask-policy", default="random_per_sample", choices=["random_per_sample", "fixed"])
    p.add_argument("--mask-seed", type=int, default=1234, help="seed of the fixed evaluation mask")
    p.add_argument("--crop", type=int, nargs=2, metavar=("H", "W"), default=[160, 128])
    p.add_argument("--max-rotate-deg", type=float, default=15.0)
    p.add_argument("--max-translate-frac", type=float, default=0.05)
    p.add_argument("--scale-range", type=float, nargs=2, default=[0.95, 1.05])


COMMANDS = {
    "mask": cmd_mask, "phantoms": cmd_phantoms, "simulate": cmd_simulate, "train": cmd_train,
    "reconstruct": cmd_reconstruct, "evaluate": cmd_evaluate, "ablate": cmd_ablate,
    "analyze": cmd_analyze, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=None)
    common.add_argument("--config", default=None, help="JSON file of flag values")
    common.add_argument("--deterministic", action="store_true")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hqsnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mask", parents=[common], help="write a cartesian sampling mask")
    p.add_argument("--height", type=int, default=192)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--accel", type=float, default=5.0)
    p.add_argument("--acs", type=int, default=8)

    p = sub.add_parser("phantoms", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--height", type=int, default=192)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--split", default="train", choices=["train", "val", "test"])

    p = sub.add_parser("simulate", parents=[common], help="undersample a dataset with a mask")
    p.add_argument("--input", required=True, help="dataset manifest or directory")
    p.add_argument("--mask", required=True, help="mask container")
    p.add_argument("--noise-sigma", type=float, default=0.0)

    p = sub.add_parser("train", parents=[common], help="train a model")
    _add_model_flags(p)
    _add_train_flags(p)

    p = sub.add_parser("reconstruct", parents=[common], help="reconstruct simulated k-space")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="simulation directory or k-space container")
    p.add_argument("--mask", default=None, help="mask container (default: <input>/mask)")

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a test set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--mask-seed", type=int, default=1234)
    p.add_argument("--accel", type=float, default=5.0)
    p.add_argument("--acs", type=int, default=8)

    p = sub.add_parser("ablate", parents=[common], help="run the design ablation grid")
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--test", required=True)
    p.add_argument("--grid", default=None, help="JSON list of ModelConfig overrides")

    p = sub.add_parser("analyze", parents=[common], help="parameter and FLOP count")
    _add_model_flags(p)
    p.add_argument("--height", type=int, default=192)
    p.add_argument("--width", type=int, default=160)

    p = sub.add_parser("report", parents=[common], help="metrics and images for recon vs ground truth")
    p.add_argument("--recon-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--error-scale", type=float, default=ERROR_MAP_SCALE)
    return parser


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            values = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read --config {args.config}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError("--config must hold a JSON object")
        sub = parser._subparsers._group_actions[0].choices[args.command]
        valid = {a.dest for a in sub._actions}
        unknown = set(values) - valid
        if unknown:
            raise ConfigError(f"unknown keys in --config: {sorted(unknown)}")
        # config file values become defaults, explicit flags still win
        sub.set_defaults(**values)
        args = parser.parse_args(argv)
    needs_out = args.command not in ("analyze",)
    if needs_out and not args.out:
        raise ConfigError(f"{args.command} requires --out")
    return args


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        resolved = {k: v for k, v in sorted(vars(args).items()) if k != "verbose"}
        print(json.dumps(resolved, sort_keys=True))
        set_deterministic(args.seed, args.deterministic)
        COMMANDS[args.command](args)
    except HqsError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
