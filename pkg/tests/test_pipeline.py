import json

import numpy as np
import pytest
import torch

from hqsnet.container import read_container, write_container
from hqsnet.errors import ConfigError, DataError, DivergenceError, ValidationError
from hqsnet.models import ModelConfig, load_checkpoint
from hqsnet.mri_ops import magnitude, normalize_p99
from hqsnet.pipeline import (
    TABLE3_GRID,
    AugmentConfig,
    DatasetManifest,
    ManifestItem,
    TrainConfig,
    affine,
    augment,
    check_disjoint,
    evaluate,
    generate_phantom_dataset,
    run_ablation,
    train,
)
from hqsnet.pipeline.ablation import cell_name
from hqsnet.pipeline.augment import IDENTITY
from hqsnet.pipeline.evaluate import RECON, ZERO_FILLED, ground_truth_reconstructor
from hqsnet.pipeline.phantoms import cardiac_phantom

SMALL_MODEL = ModelConfig(n_iterations=2, conv_layers_per_block=3, channels=8, buffer_m=2)
SMALL_TRAIN = TrainConfig(epochs=1, batch_size=2, accel=4, acs_lines=4, augmentation=AugmentConfig(crop=(24, 24)))


@pytest.fixture(scope="module")
def tiny_sets(tmp_path_factory):
    root = tmp_path_factory.mktemp("sets")
    return (
        generate_phantom_dataset(4, 32, 32, 1, root / "train", "train"),
        generate_phantom_dataset(2, 32, 32, 2, root / "val", "val"),
        generate_phantom_dataset(3, 32, 32, 3, root / "test", "test"),
    )


# --------------------------------------------------------------------------
# phantoms and datasets


def test_phantom_dataset_is_deterministic(tmp_path):
    a = generate_phantom_dataset(3, 48, 40, 7, tmp_path / "a")
    b = generate_phantom_dataset(3, 48, 40, 7, tmp_path / "b")
    assert a.ids == b.ids
    for item in a.items:
        for ext in (".json", ".bin"):
            fa = (tmp_path / "a" / (item.path + ext)).read_bytes()
            fb = (tmp_path / "b" / (item.path + ext)).read_bytes()
            assert fa == fb


def test_phantoms_are_p99_normalised(tmp_path):
    ds = generate_phantom_dataset(5, 64, 64, 11, tmp_path / "d")
    for i in range(len(ds)):
        x = ds.load(i).double()
        assert x.shape == (2, 64, 64)
        _, s = normalize_p99(x)
        assert s.item() == pytest.approx(1.0, abs=1e-6)
        assert magnitude(x).std() > 0  # complex with non-trivial content
        assert x[1].abs().max() > 0


def count_plateaus(mag, bins=40, min_share=0.01):
    hist, _ = np.histogram(mag, bins=bins, range=(0, mag.max()))
    share = hist / hist.sum()
    padded = np.concatenate([[0], share, [0]])
    peaks = [i for i in range(1, bins + 1)
             if padded[i] >= min_share and padded[i] >= padded[i - 1] and padded[i] > padded[i + 1]]
    return len(peaks)


@pytest.mark.parametrize("seed", range(8))
def test_phantom_has_tissue_plateaus(seed):
    z = cardiac_phantom(96, 96, np.random.default_rng(seed))
    mag = np.abs(z)
    assert count_plateaus(mag[mag > 0.02]) >= 3


def test_manifest_round_trip(tmp_path):
    ds = generate_phantom_dataset(2, 16, 16, 5, tmp_path / "d", "val")
    back = DatasetManifest.load_manifest(tmp_path / "d")
    assert back.split == "val" and back.ids == ds.ids
    assert torch.equal(back.load(1), ds.load(1))


def test_manifest_errors(tmp_path):
    with pytest.raises(DataError):
        DatasetManifest.load_manifest(tmp_path / "missing")
    (tmp_path / "bad").mkdir()
    (tmp_path / "bad" / "manifest.json").write_text("{not json")
    with pytest.raises(DataError):
        DatasetManifest.load_manifest(tmp_path / "bad")
    with pytest.raises(DataError):
        generate_phantom_dataset(0, 16, 16, 0, tmp_path / "none")


def test_load_rejects_bad_items(tmp_path):
    img = np.zeros((2, 8, 8), np.float32)
    img[0, 0, 0] = np.nan
    write_container(tmp_path / "items" / "a", {"image": img})
    write_container(tmp_path / "items" / "b", {"image": np.zeros((2, 8, 8), np.float32)})
    ds = DatasetManifest("test", [ManifestItem("a_0", "items/a", 8, 8), ManifestItem("b_0", "items/b", 8, 9)],
                         tmp_path)
    with pytest.raises(DataError):
        ds.load(0)
    with pytest.raises(DataError):
        ds.load(1)


def test_disjoint_splits(tiny_sets, tmp_path):
    check_disjoint(*tiny_sets)
    dup = generate_phantom_dataset(1, 32, 32, 1, tmp_path / "dup", "val")
    with pytest.raises(DataError):
        check_disjoint(tiny_sets[0], dup)


# --------------------------------------------------------------------------
# augmentation


def test_identity_augmentation(rng):
    x = torch.from_numpy(rng.standard_normal((2, 20, 16)).astype(np.float32))
    assert torch.equal(augment(x, IDENTITY, 3), x)
    cfg = AugmentConfig(crop=(20, 16), max_rotate_deg=0, max_translate_frac=0, scale_range=(1, 1))
    assert torch.equal(augment(x, cfg, 9), x)
    assert torch.allclose(affine(x.double()), x.double())


def test_augmentation_is_seeded(rng):
    x = torch.from_numpy(rng.standard_normal((2, 40, 32)).astype(np.float32))
    cfg = AugmentConfig(crop=(32, 24))
    a, b, c = augment(x, cfg, [1, 2]), augment(x, cfg, [1, 2]), augment(x, cfg, [1, 3])
    assert a.shape == (2, 32, 24)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_rotation_moves_marker_to_expected_quadrant():
    H = W = 32
    x = torch.zeros(2, H, W, dtype=torch.float64)
    p = np.array([4.0, 22.0])  # top-right quadrant
    x[0, 3:6, 21:24] = 1.0
    out = magnitude(affine(x, rotate_deg=90.0)).numpy()
    # analytic image of p under a counter-clockwise quarter turn about the centre
    c = np.array([(H - 1) / 2, (W - 1) / 2])
    expected = c + np.array([[0, -1], [1, 0]]) @ (p - c)
    rows, cols = np.nonzero(out > 0.5)
    centroid = np.array([rows.mean(), cols.mean()])
    np.testing.assert_allclose(centroid, expected, atol=0.6)
    assert centroid[0] < H / 2 and centroid[1] < W / 2  # top-left


def test_translation_moves_marker():
    x = torch.zeros(2, 16, 16, dtype=torch.float64)
    x[0, 5, 5] = 1.0
    out = affine(x, translate=(2.0, -3.0))
    assert out[0, 7, 2].item() == pytest.approx(1.0)


def test_crop_too_large():
    with pytest.raises(ValidationError):
        augment(torch.zeros(2, 16, 16), AugmentConfig(crop=(20, 8)), 0)
    with pytest.raises(ConfigError):
        AugmentConfig(scale_range=(1.1, 1.0))


# --------------------------------------------------------------------------
# training


def test_train_smoke(tiny_sets, tmp_path):
    tr, va, _ = tiny_sets
    res = train(SMALL_MODEL, SMALL_TRAIN, tr, va, tmp_path / "run")
    assert res.best_epoch == 1
    assert (res.checkpoint / "config.json").exists()
    lines = (tmp_path / "run" / "history.jsonl").read_text().strip().split("\n")
    rec = json.loads(lines[0])
    assert set(rec) >= {"epoch", "train_loss", "val_psnr", "val_ssim"}
    run = json.loads((tmp_path / "run" / "run.json").read_text())
    assert run["train_ids"] == tr.ids and run["ms_ssim_scales"] == 2
    assert load_checkpoint(res.checkpoint).config == SMALL_MODEL


def test_train_is_deterministic(tiny_sets, tmp_path):
    tr, va, _ = tiny_sets
    cfg = SMALL_TRAIN.with_(epochs=2)
    a = train(SMALL_MODEL, cfg, tr, va, tmp_path / "a")
    b = train(SMALL_MODEL, cfg, tr, va, tmp_path / "b")
    assert a.history == b.history
    assert (a.checkpoint / "weights.bin").read_bytes() == (b.checkpoint / "weights.bin").read_bytes()


def test_fixed_mask_policy_runs(tiny_sets, tmp_path):
    tr, va, _ = tiny_sets
    cfg = SMALL_TRAIN.with_(mask_policy="fixed", augmentation=AugmentConfig(crop=None))
    res = train(SMALL_MODEL, cfg, tr, va, tmp_path / "fixed")
    assert np.isfinite(res.history[0]["train_loss"])


def test_train_rejects_overlap_and_bad_config(tiny_sets, tmp_path):
    tr, _, _ = tiny_sets
    with pytest.raises(DataError):
        train(SMALL_MODEL, SMALL_TRAIN, tr, DatasetManifest("val", tr.items, tr.root), tmp_path / "x")
    with pytest.raises(ConfigError):
        TrainConfig(learning_rate=0)
    with pytest.raises(ConfigError):
        TrainConfig(mask_policy="sometimes")
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"lr": 1})


def test_divergence_guard(tiny_sets, tmp_path):
    tr, va, _ = tiny_sets
    from hqsnet.models import build_model

    model = build_model(SMALL_MODEL)
    with torch.no_grad():
        model.denoiser[0].net[-1].bias.fill_(float("nan"))
    with pytest.raises(DivergenceError):
        train(SMALL_MODEL, SMALL_TRAIN, tr, va, tmp_path / "nan", model=model)


# --------------------------------------------------------------------------
# evaluation


def test_ground_truth_scores_perfectly(tiny_sets):
    _, _, te = tiny_sets
    rep = evaluate(ground_truth_reconstructor(te), te, mask_seed=4, accel=4, acs_lines=4)
    assert rep.methods[RECON]["nrmse_percent"] == [0.0] * len(te)
    assert all(s == pytest.approx(1.0) for s in rep.methods[RECON]["ssim"])
    assert rep.ids == te.ids


def test_zero_filled_worse_at_higher_acceleration(tmp_path):
    te = generate_phantom_dataset(4, 96, 96, 21, tmp_path / "te", "test")
    identity = ground_truth_reconstructor(te)
    r5 = evaluate(identity, te, 1234, 5)
    r10 = evaluate(ground_truth_reconstructor(te), te, 1234, 10)
    assert r10.mean(ZERO_FILLED, "psnr_db") < r5.mean(ZERO_FILLED, "psnr_db")


def test_evaluate_writes_report(tiny_sets, tmp_path):
    tr, va, te = tiny_sets
    res = train(SMALL_MODEL, SMALL_TRAIN, tr, va, tmp_path / "run")
    rep = evaluate(res.checkpoint, te, 1234, 4, acs_lines=4, out_dir=tmp_path / "ev")
    lines = (tmp_path / "ev" / "metrics.csv").read_text().strip().split("\n")
    assert lines[0].split(",")[:4] == ["id", "reconstruction_nrmse_percent", "reconstruction_psnr_db",
                                       "reconstruction_ssim"]
    assert [ln.split(",")[0] for ln in lines[1:]] == te.ids + ["mean", "std"]
    js = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert js["n_items"] == 3 and set(js["methods"]) == {RECON, ZERO_FILLED}
    assert js["sampled_lines"] == 8
    assert rep.mean(ZERO_FILLED, "psnr_db") > 0


def test_evaluate_resolution_mismatch(tmp_path):
    a = generate_phantom_dataset(1, 32, 32, 1, tmp_path / "a", "test")
    b = generate_phantom_dataset(1, 32, 24, 2, tmp_path / "b", "test")
    mixed = DatasetManifest("test", [a.items[0], ManifestItem(b.items[0].id, "../b/" + b.items[0].path, 32, 24)],
                            a.root)
    with pytest.raises(DataError):
        evaluate(ground_truth_reconstructor(a), mixed, 0, 4, 4)


# --------------------------------------------------------------------------
# ablation


def test_default_cell_is_default_config():
    row = next(g for g in TABLE3_GRID if g.get("buffer_m") == 5 and g.get("residual_dn"))
    assert ModelConfig().with_(**row) == ModelConfig()
    assert cell_name(ModelConfig()) == "hqsnet-dc1-res1-m5"


def test_two_cell_ablation(tiny_sets, tmp_path):
    tr, va, te = tiny_sets
    grid = [{}, {"buffer_m": 1}]
    rep = run_ablation(SMALL_MODEL, SMALL_TRAIN, grid, tr, va, te, tmp_path / "abl")
    assert len(rep.rows) == 2
    assert rep.find(buffer_m=1)["cell"] == "hqsnet-dc1-res1-m1"
    table = (tmp_path / "abl" / "ablation.md").read_text().strip().split("\n")
    assert len(table) == 4 and table[0].startswith("| Model | DC_first")
    csv_lines = (tmp_path / "abl" / "ablation.csv").read_text().strip().split("\n")
    assert len(csv_lines) == 3
    assert (tmp_path / "abl" / "hqsnet-dc1-res1-m2" / "test" / "metrics.csv").exists()
    # cells share the test items and mask, so zero-filled columns agree
    assert rep.rows[0]["zf_psnr_mean"] == rep.rows[1]["zf_psnr_mean"]


def test_container_item_shape_is_2hw(tiny_sets):
    tr = tiny_sets[0]
    arr = read_container(tr.root / tr.items[0].path)["image"]
    assert arr.dtype == np.float32 and arr.shape == (2, 32, 32)
