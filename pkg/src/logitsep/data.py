"""Datasets: IDX (MNIST) and CSV loaders, synthetic Gaussian blobs, splits and batching."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

from .errors import DimensionError, DomainError, FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    k: int
    split: str = "train"
    normalization: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels).astype(np.int64)
        if x.ndim != 2:
            raise DimensionError(f"features must be n x d, got shape {x.shape}")
        if y.shape != (x.shape[0],):
            raise DimensionError(f"{x.shape[0]} feature rows but {y.size} labels")
        if self.k < 1:
            raise DomainError(f"class count must be positive, got {self.k}")
        if y.size and (y.min() < 0 or y.max() >= self.k):
            raise DomainError(f"labels must lie in [0, {self.k})")
        if not np.isfinite(x).all():
            raise DomainError("features must be finite")
        if self.split not in SPLITS:
            raise DomainError(f"split must be one of {SPLITS}, got {self.split!r}")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.labels.size

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, idx: np.ndarray, split: Optional[str] = None) -> "Dataset":
        return replace(self, features=self.features[idx], labels=self.labels[idx], split=split or self.split)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.k)


# IDX


def _read_bytes(path: Path) -> bytes:
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(path: Path, magic: int, ndim: int) -> np.ndarray:
    raw = _read_bytes(path)
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise FormatError(f"{path}: truncated at byte 0, no magic number")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path}: bad magic 0x{found:08x} at byte 0, expected 0x{magic:08x}")
    if len(raw) < header:
        raise FormatError(f"{path}: truncated header, {len(raw)} of {header} bytes")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise FormatError(f"{path}: truncated at byte {len(raw)}, payload needs {header + size} bytes")
    if len(raw) > header + size:
        raise FormatError(f"{path}: {len(raw) - header - size} trailing bytes after offset {header + size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: Optional[int] = None, split: str = "train") -> Dataset:
    """Read an IDX image/label pair; pixels are scaled to [0, 1] by dividing by 255."""
    images = _parse_idx(Path(images_path), IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(Path(labels_path), IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels (count at byte 4)"
        )
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), k, split, {"scale": 1 / 255.0, "offset": 0.0})


def save_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise DimensionError(f"images must be n x rows x cols, got {images.shape}")
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">2I", IDX_LABELS_MAGIC, labels.size))
        fh.write(labels.tobytes())


# CSV


def load_csv(path, header: bool = False, num_classes: Optional[int] = None, split: str = "train") -> Dataset:
    """Rows of numeric features followed by an integer label in the last column."""
    path = Path(path)
    rows, labels = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for r, row in enumerate(reader, start=1):
            if header and r == 1:
                continue
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) < 2:
                raise FormatError(f"{path}: row {r} needs at least one feature and a label")
            if rows and len(row) - 1 != len(rows[0]):
                raise FormatError(f"{path}: row {r} has {len(row)} columns, expected {len(rows[0]) + 1}")
            values = []
            for c, cell in enumerate(row[:-1], start=1):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise FormatError(f"{path}: row {r}, column {c}: {cell!r} is not a number") from None
            try:
                label = int(row[-1])
            except ValueError:
                raise FormatError(f"{path}: row {r}, column {len(row)}: label {row[-1]!r} is not an integer") from None
            rows.append(values)
            labels.append(label)
    if not rows:
        raise FormatError(f"{path}: no data rows")
    y = np.array(labels, dtype=np.int64)
    if y.min() < 0:
        raise FormatError(f"{path}: negative label {y.min()}")
    k = num_classes if num_classes is not None else int(y.max()) + 1
    return Dataset(np.array(rows), y, k, split)


def save_csv(dataset: Dataset, path, header: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow([f"x{i}" for i in range(dataset.d)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label)])


# synthetic data


def synth_blobs(
    k: int, per_class: int, d: int, spread: float, seed: int = 0, scale: float = 1.0
) -> Dataset:
    """Isotropic Gaussian clusters around ``k`` seeded, mutually equidistant centres.

    When ``d >= k`` the centres are ``scale`` times k orthonormal directions
    from a seeded random rotation (a scaled simplex, pairwise distance
    ``scale * sqrt(2)``).  For ``d < k`` they are seeded random directions of
    norm ``scale``.  Rows are grouped by class.
    """
    if k < 2:
        raise DomainError(f"need k >= 2 classes, got {k}")
    if per_class < 1 or d < 1:
        raise DomainError("per_class and d must be positive")
    if spread < 0:
        raise DomainError(f"spread must be >= 0, got {spread}")
    rng = np.random.default_rng(seed)
    if d >= k:
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        q *= np.sign(np.diag(r))
        centres = scale * q[:, :k].T
    else:
        raw = rng.standard_normal((k, d))
        centres = scale * raw / np.linalg.norm(raw, axis=1, keepdims=True)
    labels = np.repeat(np.arange(k), per_class)
    x = centres[labels] + spread * rng.standard_normal((labels.size, d))
    return Dataset(x, labels, k)


# splitting and batching


def split(dataset: Dataset, validation_fraction: float, seed: int = 0, names=("train", "validation")):
    """Seeded stratified split; each class contributes ``round(fraction * n_c)`` (at least 1) held-out rows."""
    if not 0 < validation_fraction < 1:
        raise DomainError(f"validation fraction must be in (0, 1), got {validation_fraction}")
    rng = np.random.default_rng(seed)
    keep, held = [], []
    for c in range(dataset.k):
        idx = np.flatnonzero(dataset.labels == c)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise DomainError(f"class {c} has {idx.size} example; stratified splitting needs at least 2")
        idx = rng.permutation(idx)
        n_held = min(max(int(round(validation_fraction * idx.size)), 1), idx.size - 1)
        held.append(idx[:n_held])
        keep.append(idx[n_held:])
    keep_idx = np.sort(np.concatenate(keep))
    held_idx = np.sort(np.concatenate(held))
    return dataset.subset(keep_idx, names[0]), dataset.subset(held_idx, names[1])


class BatchSampler:
    """Seeded per-epoch permutations cut into batches; the last short batch is kept."""

    def __init__(self, n: int, batch_size: int, seed: int = 0):
        if n < 1 or batch_size < 1:
            raise DomainError("n and batch_size must be positive")
        self.n = n
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0
        self._rng = np.random.default_rng(seed)
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next_batch(self) -> np.ndarray:
        if self._pos >= self._order.size:
            if self._order.size:
                self.epoch += 1
            self._order = self._rng.permutation(self.n)
            self._pos = 0
        batch = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return batch

    def epoch_batches(self) -> Iterator[np.ndarray]:
        """The batches of one fresh epoch."""
        order = self._rng.permutation(self.n)
        self.epoch += 1
        for start in range(0, self.n, self.batch_size):
            yield order[start : start + self.batch_size]


# dataset URIs


def _parse_kv(body: str) -> dict[str, str]:
    out = {}
    for part in filter(None, body.split(",")):
        if "=" not in part:
            raise DomainError(f"expected key=value, got {part!r}")
        key, value = part.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve_dataset(uri: str, base_dir: Optional[Path] = None) -> Dataset:
    """Load a dataset from a URI.

    ``synth:k=10,n=1000,d=64,spread=0.5,seed=0``  (n is the per-class count)
    ``idx:images=PATH,labels=PATH``
    ``csv:PATH`` or ``csv:path=PATH,header=1``
    """
    base = Path(base_dir) if base_dir else Path.cwd()
    scheme, _, body = uri.partition(":")
    if scheme == "synth":
        kv = _parse_kv(body)
        unknown = set(kv) - {"k", "n", "per_class", "d", "spread", "seed", "scale"}
        if unknown:
            raise DomainError(f"unknown synth parameter(s): {', '.join(sorted(unknown))}")
        per_class = kv.get("per_class", kv.get("n"))
        if per_class is None or "k" not in kv or "d" not in kv:
            raise DomainError("synth URI needs k, n and d")
        return synth_blobs(
            int(kv["k"]),
            int(per_class),
            int(kv["d"]),
            float(kv.get("spread", 1.0)),
            int(kv.get("seed", 0)),
            float(kv.get("scale", 1.0)),
        )
    if scheme == "idx":
        kv = _parse_kv(body)
        if "images" not in kv or "labels" not in kv:
            raise DomainError("idx URI needs images=... and labels=...")
        images, labels = base / kv["images"], base / kv["labels"]
        for p in (images, labels):
            if not p.exists():
                raise FileNotFoundError(f"dataset file not found: {p}")
        return load_idx(images, labels, int(kv["k"]) if "k" in kv else None)
    if scheme == "csv":
        kv = _parse_kv(body) if "=" in body else {"path": body}
        path = base / kv["path"]
        if not path.exists():
            raise FileNotFoundError(f"dataset file not found: {path}")
        return load_csv(path, header=kv.get("header", "0") in ("1", "true"), num_classes=int(kv["k"]) if "k" in kv else None)
    raise DomainError(f"unrecognised dataset URI {uri!r}; expected synth:, idx: or csv:")


def check_dataset_uri(uri: str, base_dir: Optional[Path] = None) -> None:
    """Validate a URI and the existence of any files it names, without loading them."""
    base = Path(base_dir) if base_dir else Path.cwd()
    scheme, _, body = uri.partition(":")
    if scheme == "synth":
        resolve_kv = _parse_kv(body)
        if "k" not in resolve_kv or "d" not in resolve_kv or not ({"n", "per_class"} & set(resolve_kv)):
            raise DomainError("synth URI needs k, n and d")
        return
    if scheme == "idx":
        kv = _parse_kv(body)
        paths = [kv.get("images"), kv.get("labels")]
    elif scheme == "csv":
        kv = _parse_kv(body) if "=" in body else {"path": body}
        paths = [kv.get("path")]
    else:
        raise DomainError(f"unrecognised dataset URI {uri!r}; expected synth:, idx: or csv:")
    for p in paths:
        if p is None:
            raise DomainError(f"dataset URI {uri!r} is missing a path")
        if not (base / p).exists():
            raise FileNotFoundError(f"dataset file not found: {base / p}")
