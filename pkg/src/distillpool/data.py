"""CIFAR-10 ingestion, class-conditional sampling and the distilled-set container.

The distilled set is archived as a directory holding ``manifest.json`` and
``pixels.bin`` (raw little-endian float32, C order).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import ArchiveFormatError, ArchiveVersionError, CorruptionError, IngestionError

NUM_CLASSES = 10
IMAGE_SHAPE = (3, 32, 32)
RECORD_BYTES = 1 + 3 * 32 * 32
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILES = ("test_batch.bin",)
RECORDS_PER_FILE = 10000
FORMAT_VERSION = 1
CLASS_NAMES = ("airplane", "automobile", "bird", "cat", "deer",
               "dog", "frog", "horse", "ship", "truck")


@dataclass
class NormStats:
    mean: tuple[float, ...]
    std: tuple[float, ...]

    def to_dict(self):
        return {"mean": list(self.mean), "std": list(self.std)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(float(x) for x in d["mean"]), tuple(float(x) for x in d["std"]))


@dataclass
class LabeledDataset:
    images: torch.Tensor  # [N, 3, 32, 32] float32, normalized
    labels: torch.Tensor  # [N] int64
    split: str
    norm_stats: NormStats
    _by_class: list[np.ndarray] | None = field(default=None, repr=False, compare=False)

    def __len__(self):
        return int(self.labels.shape[0])

    def class_indices(self, class_id: int) -> np.ndarray:
        if self._by_class is None:
            labels = self.labels.numpy()
            self._by_class = [np.flatnonzero(labels == c) for c in range(NUM_CLASSES)]
        return self._by_class[class_id]

    def stratified_subset(self, n: int) -> "LabeledDataset":
        """First ``n // 10`` examples of each class, in dataset order."""
        if n >= len(self):
            return self
        per_class = n // NUM_CLASSES
        idx = np.sort(np.concatenate([self.class_indices(c)[:per_class] for c in range(NUM_CLASSES)]))
        idx_t = torch.from_numpy(idx)
        return LabeledDataset(self.images[idx_t], self.labels[idx_t], self.split, self.norm_stats)


@dataclass
class SyntheticDataset:
    pixels: torch.Tensor  # [C*ipc, 3, 32, 32], the optimization variable
    labels: torch.Tensor  # [C*ipc] int64, fixed
    ipc: int
    provenance: dict = field(default_factory=dict)
    norm_stats: NormStats | None = None

    def __post_init__(self):
        counts = torch.bincount(self.labels)
        expected = balanced_labels(self.ipc, int(counts.numel()))
        if self.pixels.shape[0] != self.labels.shape[0] or not torch.equal(self.labels, expected):
            raise ValueError(f"labels must be class-major with exactly ipc={self.ipc} per class")

    @property
    def num_classes(self) -> int:
        return int(self.labels.shape[0]) // self.ipc

    def class_slice(self, class_id: int) -> slice:
        return slice(class_id * self.ipc, (class_id + 1) * self.ipc)

    def detached(self) -> "SyntheticDataset":
        return SyntheticDataset(self.pixels.detach().clone(), self.labels.clone(), self.ipc,
                                dict(self.provenance), self.norm_stats)


def balanced_labels(ipc: int, num_classes: int = NUM_CLASSES) -> torch.Tensor:
    return torch.arange(num_classes, dtype=torch.long).repeat_interleave(ipc)


def _read_batches(root: Path, names) -> tuple[np.ndarray, np.ndarray]:
    chunks = []
    for name in names:
        path = root / name
        if not path.is_file():
            raise IngestionError(f"missing CIFAR-10 file: {path}")
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size != RECORDS_PER_FILE * RECORD_BYTES:
            raise IngestionError(
                f"truncated CIFAR-10 file: {path} has {raw.size} bytes, "
                f"expected {RECORDS_PER_FILE * RECORD_BYTES}")
        chunks.append(raw.reshape(RECORDS_PER_FILE, RECORD_BYTES))
    records = np.concatenate(chunks)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        raise CorruptionError(f"label {labels[bad[0]]} outside 0..9 at record {bad[0]}")
    pixels = records[:, 1:].reshape(-1, *IMAGE_SHAPE)
    return pixels, labels


def raw_channel_stats(pixels_u8: np.ndarray) -> NormStats:
    x = pixels_u8.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return NormStats(tuple(mean.tolist()), tuple(std.tolist()))


def _normalize(pixels_u8: np.ndarray, stats: NormStats) -> torch.Tensor:
    mean = np.asarray(stats.mean, dtype=np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(stats.std, dtype=np.float32).reshape(1, 3, 1, 1)
    out = pixels_u8.astype(np.float32)
    out /= 255.0
    out -= mean
    out /= std
    return torch.from_numpy(out)


def load_cifar10(root_path) -> tuple[LabeledDataset, LabeledDataset]:
    """Load both splits from the binary distribution in ``root_path``.

    Normalization statistics come from the raw training pixels and are reused
    verbatim for the test split.
    """
    root = Path(root_path)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    train_px, train_y = _read_batches(root, TRAIN_FILES)
    test_px, test_y = _read_batches(root, TEST_FILES)
    stats = raw_channel_stats(train_px)
    train = LabeledDataset(_normalize(train_px, stats), torch.from_numpy(train_y), "train", stats)
    test = LabeledDataset(_normalize(test_px, stats), torch.from_numpy(test_y), "test", stats)
    for ds in (train, test):
        for c in range(NUM_CLASSES):
            if ds.class_indices(c).size == 0:
                raise CorruptionError(f"class {c} is empty in the {ds.split} split")
    return train, test


def sample_class_batch(ds: LabeledDataset, class_id: int, n: int,
                       rng: np.random.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Draw ``n`` images of one class.

    Without replacement inside one call; when ``n`` exceeds the class size the
    whole class is taken once and the remainder drawn with replacement.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    idx = ds.class_indices(class_id)
    if idx.size == 0:
        raise ValueError(f"class {class_id} has no examples")
    if n <= idx.size:
        chosen = rng.choice(idx, size=n, replace=False)
    else:
        chosen = np.concatenate([rng.permutation(idx), rng.choice(idx, size=n - idx.size, replace=True)])
    chosen_t = torch.from_numpy(chosen)
    return ds.images[chosen_t], ds.labels[chosen_t]


def init_synthetic(ds: LabeledDataset, ipc: int, mode: str = "real",
                   rng: np.random.Generator | None = None) -> SyntheticDataset:
    if ipc < 1:
        raise ValueError("ipc must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    labels = balanced_labels(ipc)
    if mode in ("real", "real-init"):
        parts = []
        for c in range(NUM_CLASSES):
            idx = ds.class_indices(c)
            if ipc > idx.size:
                raise ValueError(f"ipc={ipc} exceeds the {idx.size} examples of class {c}")
            parts.append(torch.from_numpy(rng.choice(idx, size=ipc, replace=False)))
        pixels = ds.images[torch.cat(parts)].clone()
    elif mode in ("noise", "noise-init"):
        gen = torch.Generator().manual_seed(int(rng.integers(2**62)))
        pixels = torch.randn((NUM_CLASSES * ipc, *IMAGE_SHAPE), generator=gen)
    else:
        raise ValueError(f"unknown init mode {mode!r}")
    return SyntheticDataset(pixels, labels, ipc, {"init": mode}, ds.norm_stats)


def save_synthetic(sd: SyntheticDataset, path) -> Path:
    """Write ``sd`` as an archive directory; returns the directory path."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    pixels = sd.pixels.detach().cpu().contiguous().numpy().astype("<f4", copy=False)
    manifest = {
        "format_version": FORMAT_VERSION,
        "shape": list(pixels.shape),
        "dtype": "f32le",
        "ipc": sd.ipc,
        "class_count": sd.num_classes,
        "labels": sd.labels.tolist(),
        "norm_stats": sd.norm_stats.to_dict() if sd.norm_stats else None,
        "provenance": sd.provenance,
    }
    # blob first, manifest last: a present manifest implies a complete blob
    tmp_blob = path / "pixels.bin.tmp"
    tmp_blob.write_bytes(pixels.tobytes(order="C"))
    os.replace(tmp_blob, path / "pixels.bin")
    tmp_manifest = path / "manifest.json.tmp"
    tmp_manifest.write_text(json.dumps(manifest, indent=1))
    os.replace(tmp_manifest, path / "manifest.json")
    return path


def load_synthetic(path) -> SyntheticDataset:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise ArchiveFormatError(f"no manifest.json in {path}") from e
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise ArchiveVersionError(f"unsupported archive format_version {version!r}")
    if manifest.get("dtype") != "f32le":
        raise ArchiveFormatError(f"unsupported dtype {manifest.get('dtype')!r}")
    shape = tuple(int(s) for s in manifest["shape"])
    blob_path = path / "pixels.bin"
    if not blob_path.is_file():
        raise ArchiveFormatError(f"no pixels.bin in {path}")
    blob = blob_path.read_bytes()
    expected = int(np.prod(shape)) * 4
    if len(blob) != expected:
        raise ArchiveFormatError(
            f"pixels.bin holds {len(blob)} bytes but manifest shape {list(shape)} needs {expected}")
    labels = torch.tensor(manifest["labels"], dtype=torch.long)
    if labels.shape[0] != shape[0]:
        raise ArchiveFormatError("label count does not match the pixel shape")
    pixels = torch.from_numpy(np.frombuffer(blob, dtype="<f4").reshape(shape).astype(np.float32))
    stats = manifest.get("norm_stats")
    return SyntheticDataset(pixels, labels, int(manifest["ipc"]), manifest.get("provenance", {}),
                            NormStats.from_dict(stats) if stats else None)
