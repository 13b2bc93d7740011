"""Dataset manifests backed by the array container format."""
from __future__ import annotations

import json
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..container import read_container, write_container
from ..errors import DataError
from .phantoms import cardiac_phantom

MANIFEST = "manifest.json"
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class ManifestItem:
    id: str
    path: str
    H: int
    W: int

    @property
    def subject(self) -> str:
        return self.id.split("_", 1)[0]


@dataclass
class DatasetManifest:
    split: str
    items: list[ManifestItem]
    root: Path = field(default=Path("."))

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        self.root = Path(self.root)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def ids(self) -> list[str]:
        return [it.id for it in self.items]

    def load(self, index: int) -> torch.Tensor:
        """float32 ``(2, H, W)`` image of item ``index``; shape and finiteness checked."""
        item = self.items[index]
        arrays = read_container(self.root / item.path)
        if "image" not in arrays:
            raise DataError(f"{item.id}: container has no 'image' array")
        img = arrays["image"]
        if img.shape != (2, item.H, item.W):
            raise DataError(f"{item.id}: shape {img.shape} != declared (2, {item.H}, {item.W})")
        if not np.isfinite(img).all():
            raise DataError(f"{item.id}: non-finite values")
        return torch.from_numpy(img)

    def to_json(self) -> dict:
        return {"split": self.split, "items": [vars(it) for it in self.items]}

    def save(self) -> Path:
        self.root.mkdir(parents=True, exist_ok=True)
        path = self.root / MANIFEST
        path.write_text(json.dumps(self.to_json(), indent=2))
        return path

    @classmethod
    def load_manifest(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST
        try:
            d = json.loads(path.read_text())
        except FileNotFoundError as exc:
            raise DataError(f"missing dataset manifest {path}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"corrupt dataset manifest {path}: {exc}") from exc
        items = [ManifestItem(**it) for it in d["items"]]
        return cls(split=d["split"], items=items, root=path.parent)


def check_disjoint(*manifests: DatasetManifest) -> None:
    """Raise DataError if two manifests share a subject (id prefix before '_')."""
    seen: dict[str, str] = {}
    for man in manifests:
        for subj in {it.subject for it in man.items}:
            if subj in seen and seen[subj] != man.split:
                raise DataError(f"subject {subj!r} appears in both {seen[subj]} and {man.split}")
            seen[subj] = man.split


def complex_to_channels(z: np.ndarray) -> np.ndarray:
    return np.stack([z.real, z.imag]).astype(np.float32)


def generate_phantom_dataset(count: int, H: int, W: int, seed: int, out_dir,
                             split: str = "train") -> DatasetManifest:
    """Write ``count`` phantoms plus a manifest under ``out_dir``.

    Item ``i`` is seeded from ``(seed, i)``, so a dataset is a prefix of any
    larger one with the same seed. Subject ids embed the seed, hence splits
    generated from different seeds are disjoint.
    """
    if count < 1:
        raise DataError("count must be >= 1")
    out_dir = Path(out_dir)
    try:
        out_dir.parent.mkdir(parents=True, exist_ok=True)
        tmp = Path(tempfile.mkdtemp(prefix=".phantoms-", dir=out_dir.parent))
    except OSError as exc:
        raise DataError(f"cannot write to {out_dir}: {exc}") from exc
    try:
        items = []
        for i in range(count):
            item_id = f"ph{seed}s{i:05d}_sl0"
            z = cardiac_phantom(H, W, np.random.default_rng([seed, i]))
            rel = f"items/{item_id}"
            write_container(tmp / rel, {"image": complex_to_channels(z)},
                            meta={"generator": "cardiac_phantom", "seed": seed, "index": i})
            items.append(ManifestItem(item_id, rel, H, W))
        man = DatasetManifest(split=split, items=items, root=tmp)
        man.save()
        if out_dir.exists():
            shutil.rmtree(out_dir)
        tmp.rename(out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    man.root = out_dir
    return man
