"""Datasets, seeded randomness, subset sampling and batching.

Images are float32 tensors of shape (N, channels, H, W) with values in [0, 1].
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
import torch
import torch.nn.functional as F

SHARD_RECORDS = 10000
EVAL_SUBSET_SIZE = 512


class DatasetError(ValueError):
    pass


def derive_seed(seed: int, *keys) -> int:
    """Deterministically derive a 63-bit child seed from a parent seed and keys."""
    text = json.dumps([int(seed), *[str(k) for k in keys]])
    return int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little") >> 1


class SeededRng:
    """A torch generator that remembers its seed and can spawn independent children."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.generator = torch.Generator().manual_seed(self.seed)

    def spawn(self, *keys) -> "SeededRng":
        return SeededRng(derive_seed(self.seed, *keys))

    def randint(self, high: int) -> int:
        return int(torch.randint(high, (1,), generator=self.generator))

    def __repr__(self):
        return f"SeededRng({self.seed})"


def as_rng(rng: SeededRng | int | None) -> SeededRng:
    if isinstance(rng, SeededRng):
        return rng
    return SeededRng(0 if rng is None else rng)


@dataclass(eq=False)
class LabeledDataset:
    images: torch.Tensor
    labels: torch.Tensor
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be (N, C, H, W), got {tuple(self.images.shape)}")
        if len(self.labels) != len(self.images):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        self.labels = self.labels.long()
        meta = {"name": "unnamed", "split": "all"}
        meta.update(self.metadata)
        meta.setdefault("num_classes", int(self.labels.max()) + 1 if len(self.labels) else 0)
        meta["channels"], meta["H"], meta["W"] = (int(s) for s in self.images.shape[1:])
        self.metadata = meta
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= meta["num_classes"]):
            raise DatasetError("label outside [0, num_classes)")
        if len(self.images) and (self.images.min() < 0 or self.images.max() > 1):
            raise DatasetError("pixel values outside [0, 1]")

    @property
    def num_classes(self) -> int:
        return self.metadata["num_classes"]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def __len__(self):
        return len(self.labels)

    def subset(self, index, split: str | None = None) -> "LabeledDataset":
        index = torch.as_tensor(index, dtype=torch.long)
        meta = dict(self.metadata)
        if split is not None:
            meta["split"] = split
        return LabeledDataset(self.images[index], self.labels[index], meta)


# ---------------------------------------------------------------------------
# on-disk layout: meta.json + data_XXX.bin shards of (label byte, C*H*W pixel bytes)


def _record_size(meta: dict) -> int:
    return 1 + meta["C"] * meta["H"] * meta["W"]


def load_image_dataset(path, split: str | None = None) -> LabeledDataset:
    """Load a dataset directory written by :func:`save_image_dataset`.

    ``meta.json`` holds name, C (channels), H, W, count and num_classes.
    Each shard ``data_XXX.bin`` is a sequence of fixed-size records: one label
    byte followed by C*H*W row-major uint8 pixels.
    """
    path = Path(path)
    if not path.is_dir():
        raise DatasetError(f"dataset path does not exist: {path}")
    meta_path = path / "meta.json"
    if not meta_path.exists():
        raise DatasetError(f"missing meta.json in {path}")
    meta = json.loads(meta_path.read_text())
    for key in ("C", "H", "W", "count"):
        if key not in meta:
            raise DatasetError(f"meta.json missing key {key!r}")
    num_classes = int(meta.get("num_classes", 256))
    rec = _record_size(meta)
    shards = sorted(path.glob("data_*.bin"))
    raw = []
    for shard in shards:
        blob = np.fromfile(shard, dtype=np.uint8)
        if blob.size % rec:
            raise DatasetError(
                f"malformed shard {shard.name}: size {blob.size} is not a multiple of "
                f"record size {rec} (trailing record at byte offset {blob.size - blob.size % rec})"
            )
        raw.append(blob.reshape(-1, rec))
    records = np.concatenate(raw) if raw else np.zeros((0, rec), np.uint8)
    if len(records) == 0:
        raise DatasetError(f"no records in {path}")
    if len(records) != meta["count"]:
        raise DatasetError(f"meta.json count {meta['count']} != {len(records)} records on disk")
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= num_classes)
    if bad.size:
        i = int(bad[0])
        shard_idx, local = divmod(i, SHARD_RECORDS)
        raise DatasetError(
            f"label {labels[i]} out of range [0, {num_classes}) at record {i} "
            f"(byte offset {local * rec} in data_{shard_idx:03d}.bin)"
        )
    pixels = records[:, 1:].reshape(-1, meta["C"], meta["H"], meta["W"])
    images = torch.from_numpy(pixels.astype(np.float32) / 255.0)
    return LabeledDataset(
        images,
        torch.from_numpy(labels),
        {"name": meta.get("name", path.name), "num_classes": num_classes,
         "split": split or meta.get("split", "all")},
    )


def save_image_dataset(dataset: LabeledDataset, path) -> Path:
    """Write ``dataset`` in the shard layout. Pixels are rounded to 1/255 steps."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    if dataset.num_classes > 256:
        raise DatasetError("labels must fit in one byte")
    n = len(dataset)
    pixels = torch.round(dataset.images * 255).clamp(0, 255).to(torch.uint8).reshape(n, -1).numpy()
    records = np.concatenate([dataset.labels.numpy().astype(np.uint8)[:, None], pixels], axis=1)
    for old in path.glob("data_*.bin"):
        old.unlink()
    for k, start in enumerate(range(0, n, SHARD_RECORDS)):
        records[start:start + SHARD_RECORDS].tofile(path / f"data_{k:03d}.bin")
    c, h, w = dataset.image_shape
    meta = {
        "name": dataset.metadata.get("name", "unnamed"),
        "C": c, "H": h, "W": w,
        "count": n,
        "num_classes": dataset.num_classes,
        "split": dataset.metadata.get("split", "all"),
        "record_bytes": 1 + c * h * w,
        "byte_order": "label uint8, then pixels uint8 in (channel, row, column) order",
    }
    (path / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def import_cifar10_binary(src, dst, split: str = "test") -> Path:
    """Convert the CIFAR-10 binary release (``data_batch_*.bin``/``test_batch.bin``)."""
    src = Path(src)
    names = ["test_batch.bin"] if split == "test" else [f"data_batch_{i}.bin" for i in range(1, 6)]
    blobs = [np.fromfile(src / name, dtype=np.uint8).reshape(-1, 3073) for name in names]
    records = np.concatenate(blobs)
    images = torch.from_numpy(records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    ds = LabeledDataset(images, torch.from_numpy(records[:, 0].astype(np.int64)),
                        {"name": "cifar10", "num_classes": 10, "split": split})
    return save_image_dataset(ds, dst)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Class-conditioned synthetic images.

    Every image carries two class cues: a large geometric shape drawn with
    high contrast (survives noise and masking) and a faint fixed texture of
    amplitude ``texture_amp`` (destroyed by noise and easy to overwrite with an
    8/255 perturbation). ``shape_consistency`` is the probability that the
    shape agrees with the label; the texture always does.
    """

    C: int = 10
    H: int = 16
    W: int = 16
    n_per_class: int = 100
    channels: int = 3
    shape_contrast: float = 0.3
    texture_amp: float = 0.02
    shape_consistency: float = 1.0
    background_amp: float = 0.3
    pixel_noise: float = 0.01
    template_seed: int = 0

    def validate(self):
        if self.C < 2:
            raise DatasetError("synthetic dataset needs C >= 2")
        if self.H < 8 or self.W < 8 or self.H != self.W:
            raise DatasetError("synthetic dataset needs H == W >= 8")
        if self.n_per_class < 1:
            raise DatasetError("n_per_class must be >= 1")
        if not 0 <= self.shape_consistency <= 1:
            raise DatasetError("shape_consistency must be in [0, 1]")


def _shape_masks(spec: SyntheticSpec, cls: torch.Tensor, cx, cy, scale) -> torch.Tensor:
    """Soft-edged binary shape for each (class, centre, scale); returns (n, H, W)."""
    h = spec.H
    coords = (torch.arange(h, dtype=torch.float32) + 0.5) / h * 2 - 1
    yy, xx = torch.meshgrid(coords, coords, indexing="ij")
    u = (xx[None] - cx[:, None, None]) / scale[:, None, None]
    v = (yy[None] - cy[:, None, None]) / scale[:, None, None]
    r = torch.sqrt(u**2 + v**2)
    shapes = [
        r < 0.55,                                                   # disk
        (u.abs() < 0.45) & (v.abs() < 0.45),                        # square
        (r > 0.35) & (r < 0.65),                                    # ring
        ((u.abs() < 0.15) | (v.abs() < 0.15)) & (r < 0.7),          # plus
        (v.abs() < 0.18) & (u.abs() < 0.7),                         # horizontal bar
        (u.abs() < 0.18) & (v.abs() < 0.7),                         # vertical bar
        ((u - v).abs() < 0.25) & (u.abs() < 0.6),                   # diagonal
        ((u + v).abs() < 0.25) & (u.abs() < 0.6),                   # anti-diagonal
        (v > -0.5) & (v < 0.5) & (u.abs() < (v + 0.5) * 0.7),       # triangle
        ((u.abs() - 0.4).abs() < 0.18) & ((v.abs() - 0.4).abs() < 0.18),  # four dots
    ]
    stack = torch.stack(shapes, 1).float()                          # (n, 10, H, W)
    out = torch.zeros(len(cls), h, h)
    named = cls < len(shapes)
    if named.any():
        idx = cls[named]
        out[named] = stack[named.nonzero().squeeze(1), idx]
    if (~named).any():
        # extra classes: class-seeded 4x4 block patterns
        g = torch.Generator().manual_seed(spec.template_seed + 1)
        blocks = (torch.rand(int(cls.max()) + 1, 1, 4, 4, generator=g) > 0.5).float()
        up = F.interpolate(blocks, size=(h, h), mode="nearest")[:, 0]
        out[~named] = up[cls[~named]]
    return out


def class_textures(spec: SyntheticSpec) -> torch.Tensor:
    """Fixed +-1 texture per class, identical across splits and seeds."""
    g = torch.Generator().manual_seed(spec.template_seed)
    return torch.randint(0, 2, (spec.C, spec.channels, spec.H, spec.W), generator=g).float() * 2 - 1


def make_synthetic_dataset(rng: SeededRng | int, spec: SyntheticSpec, split: str = "train") -> LabeledDataset:
    """Generate ``spec.C * spec.n_per_class`` labelled images, deterministic in ``rng``."""
    spec.validate()
    g = as_rng(rng).generator
    n = spec.C * spec.n_per_class
    labels = torch.arange(spec.C).repeat_interleave(spec.n_per_class)
    labels = labels[torch.randperm(n, generator=g)]

    low = torch.rand(n, spec.channels, 4, 4, generator=g)
    background = 0.5 + spec.background_amp * (
        F.interpolate(low, size=(spec.H, spec.W), mode="bilinear", align_corners=False) - 0.5
    )
    shape_cls = labels.clone()
    swap = torch.rand(n, generator=g) >= spec.shape_consistency
    shape_cls[swap] = torch.randint(0, spec.C, (int(swap.sum()),), generator=g)
    cx = (torch.rand(n, generator=g) - 0.5) * 0.3
    cy = (torch.rand(n, generator=g) - 0.5) * 0.3
    scale = 0.8 + 0.4 * torch.rand(n, generator=g)
    shape = _shape_masks(spec, shape_cls, cx, cy, scale)[:, None]
    polarity = torch.where(torch.rand(n, generator=g) < 0.5, -1.0, 1.0)[:, None, None, None]
    tint = 0.6 + 0.4 * torch.rand(n, spec.channels, 1, 1, generator=g)
    images = background + polarity * spec.shape_contrast * tint * shape
    images = images + spec.texture_amp * class_textures(spec)[labels]
    images = images + spec.pixel_noise * torch.randn(images.shape, generator=g)
    images = torch.round(images.clamp(0, 1) * 255) / 255
    return LabeledDataset(images, labels, {"name": "synthetic", "num_classes": spec.C, "split": split})


# ---------------------------------------------------------------------------
# sampling and batching


def sample_eval_subset(dataset: LabeledDataset, n: int = EVAL_SUBSET_SIZE, rng: SeededRng | int = 0) -> LabeledDataset:
    """Draw ``n`` records without replacement."""
    if n > len(dataset):
        raise DatasetError(f"cannot sample {n} records from a dataset of {len(dataset)}")
    if n < 0:
        raise DatasetError("n must be non-negative")
    index = torch.randperm(len(dataset), generator=as_rng(rng).generator)[:n]
    subset = dataset.subset(index)
    subset.metadata["indices"] = index.tolist()
    return subset


@dataclass
class ImageBatch:
    x: torch.Tensor
    y: torch.Tensor
    index: torch.Tensor


def batches(dataset: LabeledDataset, batch_size: int, rng: SeededRng | int | None = None,
            shuffle: bool = False) -> Iterator[ImageBatch]:
    """One epoch of batches; the final batch may be smaller."""
    if batch_size < 1:
        raise DatasetError("batch_size must be >= 1")
    n = len(dataset)
    if shuffle:
        order = torch.randperm(n, generator=as_rng(rng).generator)
    else:
        order = torch.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield ImageBatch(dataset.images[idx], dataset.labels[idx], idx)


def num_batches(n: int, batch_size: int) -> int:
    return math.ceil(n / batch_size)


def default_data_root() -> Path:
    return Path(os.environ.get("ATOPLAB_DATA", "data"))
