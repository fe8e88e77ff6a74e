"""Datasets: synthetic robust/non-robust Gaussian task, binary image
ingestion (1 label byte + 3x32x32 pixels per record) and batching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, DataFormatError

RECORD_BYTES = 3073  # 1 label byte + 3*32*32 pixels
IMAGE_SHAPE = (3, 32, 32)


@dataclass
class Dataset:
    inputs: np.ndarray  # [n, d...] float64
    labels: np.ndarray  # [n] int64
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ConfigurationError(
                f"{len(self.inputs)} inputs but {len(self.labels)} labels"
            )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self.labels) else 0


@dataclass(frozen=True)
class SyntheticSpec:
    """Gaussian two-class task with strongly and weakly separated coordinates.

    Robust coordinates carry a margin that survives an epsilon-bounded
    perturbation; non-robust ones carry a margin smaller than the flip
    budget, so an adversary can reverse their label correlation.
    """

    n: int = 2000
    d_robust: int = 5
    d_nonrobust: int = 50
    robust_margin: float = 2.0
    nonrobust_margin: float = 0.2
    noise: float = 1.0
    flip_budget: float = 0.5

    def __post_init__(self):
        if self.n < 1 or self.d_robust < 1 or self.d_nonrobust < 0:
            raise ConfigurationError("need n >= 1, d_robust >= 1, d_nonrobust >= 0")
        if not (self.robust_margin > self.flip_budget > self.nonrobust_margin > 0):
            raise ConfigurationError(
                "need robust_margin > flip_budget > nonrobust_margin > 0, got "
                f"{self.robust_margin} / {self.flip_budget} / {self.nonrobust_margin}"
            )

    @property
    def dim(self) -> int:
        return self.d_robust + self.d_nonrobust


def generate_synthetic(spec: SyntheticSpec, rng: np.random.Generator) -> Dataset:
    """Binary labels; coordinate means are +/- the margin times the label sign."""
    y = rng.integers(0, 2, size=spec.n)
    s = (2 * y - 1).astype(np.float64)[:, None]
    robust = s * spec.robust_margin + spec.noise * rng.standard_normal((spec.n, spec.d_robust))
    nonrobust = s * spec.nonrobust_margin + spec.noise * rng.standard_normal((spec.n, spec.d_nonrobust))
    x = np.concatenate([robust, nonrobust], axis=1)
    meta = {
        "kind": "synthetic",
        "robust_coords": list(range(spec.d_robust)),
        "nonrobust_coords": list(range(spec.d_robust, spec.dim)),
        "spec": {k: getattr(spec, k) for k in spec.__dataclass_fields__},
    }
    return Dataset(inputs=x, labels=y, metadata=meta)


def load_binary_images(path) -> Dataset:
    """Read fixed 3073-byte records; pixel bytes are scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    if len(raw) % RECORD_BYTES:
        raise DataFormatError(
            f"{path}: truncated record at offset {len(raw) - len(raw) % RECORD_BYTES}"
        )
    n = len(raw) // RECORD_BYTES
    records = np.frombuffer(raw, dtype=np.uint8).reshape(n, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise DataFormatError(
            f"{path}: label byte {labels[bad[0]]} > 9 at offset {int(bad[0]) * RECORD_BYTES}"
        )
    images = records[:, 1:].astype(np.float64).reshape((n,) + IMAGE_SHAPE) / 255.0
    return Dataset(inputs=images, labels=labels, metadata={"kind": "binary_images", "path": str(path)})


def save_binary_images(dataset: Dataset, path) -> None:
    """Write the same fixed-record layout (pixels quantized back to bytes)."""
    if dataset.inputs.shape[1:] != IMAGE_SHAPE:
        raise ConfigurationError(f"binary format requires {IMAGE_SHAPE} images, got {dataset.inputs.shape[1:]}")
    n = len(dataset)
    records = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = dataset.labels.astype(np.uint8)
    pixels = np.clip(np.rint(dataset.inputs * 255.0), 0, 255).astype(np.uint8)
    records[:, 1:] = pixels.reshape(n, -1)
    Path(path).write_bytes(records.tobytes())


def _sidecar(path: Path) -> Path:
    name = path.name[: -len(".npz")] if path.name.endswith(".npz") else path.name
    return path.with_name(name + ".meta.json")


def save_dataset(dataset: Dataset, path) -> None:
    """Container for arbitrary-shape datasets plus a JSON metadata sidecar."""
    path = Path(path)
    if not path.name.endswith(".npz"):
        path = path.with_name(path.name + ".npz")
    np.savez(path, inputs=dataset.inputs, labels=dataset.labels)
    _sidecar(path).write_text(json.dumps(dataset.metadata, sort_keys=True, indent=2))


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists() and path.with_name(path.name + ".npz").exists():
        path = path.with_name(path.name + ".npz")
    with np.load(path) as z:
        inputs, labels = z["inputs"], z["labels"]
    sidecar = _sidecar(path)
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return Dataset(inputs=inputs, labels=labels, metadata=meta)


def batches(
    dataset: Dataset,
    batch_size: int,
    shuffle: bool = False,
    rng: np.random.Generator | None = None,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Partition covering every sample once; the last batch may be short."""
    if batch_size < 1:
        raise ConfigurationError("batch size must be at least 1")
    order = np.arange(len(dataset))
    if shuffle:
        if rng is None:
            raise ConfigurationError("shuffle requires an rng")
        rng.shuffle(order)
    out = []
    for start in range(0, len(dataset), batch_size):
        idx = order[start : start + batch_size]
        out.append((dataset.inputs[idx], dataset.labels[idx]))
    return out
