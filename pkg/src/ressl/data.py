"""Dataset ingestion into packed split files and deterministic batch iteration.

Each split is decoded once into a single packed binary file of fixed-size
records (``id u32, label i32, H*W*3 uint8``) preceded by a little-endian
header, plus a JSON manifest. Training and evaluation only ever read the
packed file through a read-only memory map.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import pickle
import struct
import tarfile
import urllib.request
import zipfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .exceptions import ChecksumError, ConfigError, IngestError

logger = logging.getLogger(__name__)

MAGIC = b"RSSLDATA"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIIHH")
UNLABELED = -1

SPLITS = ("train", "train_unlabeled_plus_labeled", "test")


@dataclass(frozen=True)
class DatasetInfo:
    num_classes: int
    image_side: int
    archive: str
    url: str
    md5: str | None
    counts: dict


DATASETS = {
    "cifar10": DatasetInfo(
        10, 32, "cifar-10-python.tar.gz",
        "https://www.cs.toronto.edu/~kriz/cifar-10-python.tar.gz",
        "c58f30108f718f92721af3b95e74349a",
        {"train": 50000, "test": 10000},
    ),
    "cifar100": DatasetInfo(
        100, 32, "cifar-100-python.tar.gz",
        "https://www.cs.toronto.edu/~kriz/cifar-100-python.tar.gz",
        "eb9058c3a382ffc7106e4002c42a8d85",
        {"train": 50000, "test": 10000},
    ),
    "stl10": DatasetInfo(
        10, 96, "stl10_binary.tar.gz",
        "http://ai.stanford.edu/~acoates/stl10/stl10_binary.tar.gz",
        "91f7769df0f17e558f3565bffb0c7dfb",
        {"train": 5000, "train_unlabeled_plus_labeled": 105000, "test": 8000},
    ),
    "tiny_imagenet": DatasetInfo(
        200, 64, "tiny-imagenet-200.zip",
        "http://cs231n.stanford.edu/tiny-imagenet-200.zip",
        "90528d7ca1a48142e341f4ef8d21d0de",
        {"train": 100000, "test": 10000},
    ),
}


@dataclass(frozen=True)
class DatasetSpec:
    """Where a dataset split lives and what it should contain.

    ``image_side`` is the stored (source) side. STL-10 is kept at 96 and
    resized to 64 by the augmentation stage.
    """

    name: str
    root_path: str
    split: str = "train"
    image_side: int | None = None
    num_classes: int | None = None

    def __post_init__(self):
        if self.name not in DATASETS:
            raise ConfigError(f"unknown dataset {self.name!r}; expected one of {sorted(DATASETS)}")
        if self.split not in SPLITS:
            raise ConfigError(f"unknown split {self.split!r}; expected one of {SPLITS}")
        info = DATASETS[self.name]
        if self.split not in info.counts:
            raise ConfigError(f"split {self.split!r} is not defined for {self.name}")
        if self.image_side is None:
            object.__setattr__(self, "image_side", info.image_side)
        if self.num_classes is None:
            object.__setattr__(self, "num_classes", info.num_classes)
        if self.image_side not in (32, 64, 96):
            raise ConfigError(f"image_side must be 32, 64 or 96, got {self.image_side}")
        if self.num_classes != info.num_classes:
            raise ConfigError(
                f"{self.name} has {info.num_classes} classes, but num_classes={self.num_classes} was given"
            )

    @property
    def info(self) -> DatasetInfo:
        return DATASETS[self.name]

    @property
    def packed_path(self) -> Path:
        return Path(self.root_path) / f"{self.name}_{self.split}.rssl"

    @property
    def manifest_path(self) -> Path:
        return Path(self.root_path) / f"{self.name}_{self.split}.manifest.json"

    def with_split(self, split: str) -> "DatasetSpec":
        return DatasetSpec(self.name, self.root_path, split)


@dataclass
class Manifest:
    name: str
    split: str
    count: int
    sha256: str
    class_histogram: dict
    image_side: int
    num_classes: int
    channel_mean: list = field(default_factory=list)
    channel_std: list = field(default_factory=list)
    version: int = FORMAT_VERSION

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if not path.exists():
            raise IngestError("manifest not found (run ingest first)", path)
        with open(path) as fh:
            raw = json.load(fh)
        raw["class_histogram"] = {int(k): v for k, v in raw["class_histogram"].items()}
        return cls(**raw)


def _record_dtype(side: int) -> np.dtype:
    return np.dtype([("id", "<u4"), ("label", "<i4"), ("pixels", "u1", (side, side, 3))])


def sha256_file(path, chunk: int = 1 << 22) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        while block := fh.read(chunk):
            digest.update(block)
    return digest.hexdigest()


def md5_file(path, chunk: int = 1 << 22) -> str:
    digest = hashlib.md5()
    with open(path, "rb") as fh:
        while block := fh.read(chunk):
            digest.update(block)
    return digest.hexdigest()


class PackedWriter:
    """Streams records into a packed split file; the header count is patched on close."""

    def __init__(self, path, side: int, num_classes: int):
        self.path = Path(path)
        self.side = side
        self.num_classes = num_classes
        self.dtype = _record_dtype(side)
        self.count = 0
        self.histogram = np.zeros(num_classes, dtype=np.int64)
        self._sum = np.zeros(3)
        self._sumsq = np.zeros(3)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "wb")
        self._fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, 0, side, side))

    def write(self, images: np.ndarray, labels: np.ndarray) -> None:
        images = np.asarray(images, dtype=np.uint8)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4 or images.shape[1:] != (self.side, self.side, 3):
            raise IngestError(
                f"expected images of shape (N, {self.side}, {self.side}, 3), got {images.shape}"
            )
        if len(images) != len(labels):
            raise IngestError("images and labels differ in length")
        bad = (labels != UNLABELED) & ((labels < 0) | (labels >= self.num_classes))
        if bad.any():
            raise IngestError(f"label out of range [0, {self.num_classes}): {labels[bad][0]}")
        rec = np.empty(len(images), dtype=self.dtype)
        rec["id"] = np.arange(self.count, self.count + len(images))
        rec["label"] = labels
        rec["pixels"] = images
        self._fh.write(rec.tobytes())
        self.count += len(images)
        known = labels[labels != UNLABELED]
        self.histogram += np.bincount(known, minlength=self.num_classes)
        pix = images.reshape(-1, 3).astype(np.float64) / 255.0
        self._sum += pix.sum(0)
        self._sumsq += (pix * pix).sum(0)

    def close(self) -> tuple[np.ndarray, np.ndarray]:
        self._fh.seek(0)
        self._fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, self.count, self.side, self.side))
        self._fh.close()
        n = max(self.count * self.side * self.side, 1)
        mean = self._sum / n
        std = np.sqrt(np.maximum(self._sumsq / n - mean**2, 1e-12))
        return mean, std


class PackedDataset:
    """Read-only, memory-mapped view over a packed split file."""

    def __init__(self, path):
        self.path = Path(path)
        if not self.path.exists():
            raise IngestError("packed split file not found", self.path)
        with open(self.path, "rb") as fh:
            head = fh.read(_HEADER.size)
        if len(head) < _HEADER.size:
            raise IngestError("truncated packed file", self.path)
        magic, version, count, height, width = _HEADER.unpack(head)
        if magic != MAGIC:
            raise IngestError("not a packed dataset file (bad magic)", self.path)
        if version != FORMAT_VERSION:
            raise IngestError(f"unsupported packed format version {version}", self.path)
        if height != width:
            raise IngestError("non-square images are not supported", self.path)
        self.side = height
        self._records = np.memmap(
            self.path, dtype=_record_dtype(height), mode="r", offset=_HEADER.size, shape=(count,)
        )

    def __len__(self) -> int:
        return len(self._records)

    @property
    def ids(self) -> np.ndarray:
        return np.asarray(self._records["id"])

    @property
    def labels(self) -> np.ndarray:
        return np.asarray(self._records["label"])

    @property
    def images(self) -> np.ndarray:
        return self._records["pixels"]

    def take(self, index) -> "Batch":
        rec = self._records[np.asarray(index)]
        return Batch(ids=rec["id"].astype(np.int64), labels=rec["label"].astype(np.int64),
                     images=np.ascontiguousarray(rec["pixels"]))


@dataclass
class Batch:
    ids: np.ndarray
    labels: np.ndarray
    images: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


# -- archive readers -------------------------------------------------------
# Each reader yields (images NHWC uint8, labels int64) chunks.


def _tar_member(tar: tarfile.TarFile, suffix: str, archive) -> bytes:
    for member in tar.getmembers():
        if member.name.endswith(suffix):
            return tar.extractfile(member).read()
    raise IngestError(f"archive has no member ending in {suffix!r}", archive)


def _read_cifar(archive: Path, split: str, fine: bool):
    if fine:
        members = ["cifar-100-python/train"] if split == "train" else ["cifar-100-python/test"]
        key = b"fine_labels"
    else:
        if split == "train":
            members = [f"cifar-10-batches-py/data_batch_{i}" for i in range(1, 6)]
        else:
            members = ["cifar-10-batches-py/test_batch"]
        key = b"labels"
    with tarfile.open(archive, "r:*") as tar:
        for name in members:
            entry = pickle.loads(_tar_member(tar, name, archive), encoding="bytes")
            data = np.asarray(entry[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32)
            yield data.transpose(0, 2, 3, 1), np.asarray(entry[key], dtype=np.int64)


def _read_stl10(archive: Path, split: str, chunk: int = 10000):
    def decode(raw: bytes):
        # stored column-major per channel
        return np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3, 96, 96).transpose(0, 3, 2, 1)

    with tarfile.open(archive, "r:*") as tar:
        if split == "test":
            parts = [("test_X.bin", "test_y.bin")]
        else:
            parts = [("train_X.bin", "train_y.bin")]
            if split == "train_unlabeled_plus_labeled":
                parts.append(("unlabeled_X.bin", None))
        for xname, yname in parts:
            images = decode(_tar_member(tar, xname, archive))
            if yname is None:
                labels = np.full(len(images), UNLABELED, dtype=np.int64)
            else:
                labels = np.frombuffer(_tar_member(tar, yname, archive), dtype=np.uint8).astype(np.int64) - 1
            for start in range(0, len(images), chunk):
                yield images[start:start + chunk], labels[start:start + chunk]


def _read_tiny_imagenet(archive: Path, split: str, chunk: int = 5000):
    from PIL import Image

    def load(zf: zipfile.ZipFile, name: str) -> np.ndarray:
        with zf.open(name) as fh:
            return np.asarray(Image.open(io.BytesIO(fh.read())).convert("RGB"), dtype=np.uint8)

    with zipfile.ZipFile(archive) as zf:
        names = zf.namelist()
        prefix = next((n[: -len("wnids.txt")] for n in names if n.endswith("wnids.txt")), None)
        if prefix is None:
            raise IngestError("archive has no wnids.txt", archive)
        wnids = zf.read(prefix + "wnids.txt").decode().split()
        index = {w: i for i, w in enumerate(wnids)}
        if split == "train":
            items = sorted(
                (n, index[n[len(prefix):].split("/")[1]])
                for n in names
                if n.startswith(prefix + "train/") and n.endswith(".JPEG")
            )
        else:
            # labels for the held-out images come from the annotation text file
            ann = zf.read(prefix + "val/val_annotations.txt").decode().splitlines()
            items = []
            for line in ann:
                if not line.strip():
                    continue
                fname, wnid = line.split("\t")[:2]
                items.append((prefix + "val/images/" + fname, index[wnid]))
            items.sort()
        for start in range(0, len(items), chunk):
            part = items[start:start + chunk]
            yield (np.stack([load(zf, n) for n, _ in part]),
                   np.asarray([y for _, y in part], dtype=np.int64))


def _reader(spec: DatasetSpec, archive: Path):
    if spec.name == "cifar10":
        return _read_cifar(archive, spec.split, fine=False)
    if spec.name == "cifar100":
        return _read_cifar(archive, spec.split, fine=True)
    if spec.name == "stl10":
        return _read_stl10(archive, spec.split)
    return _read_tiny_imagenet(archive, spec.split)


def download(spec: DatasetSpec, url: str | None = None) -> Path:
    target = Path(spec.root_path) / spec.info.archive
    target.parent.mkdir(parents=True, exist_ok=True)
    url = url or spec.info.url
    logger.info("downloading %s -> %s", url, target)
    try:
        urllib.request.urlretrieve(url, target)
    except OSError as exc:
        raise IngestError(f"download failed ({exc})", url) from exc
    return target


def _finish(spec: DatasetSpec, writer: PackedWriter, expected: int | None) -> Manifest:
    mean, std = writer.close()
    if expected is not None and writer.count != expected:
        writer.path.unlink(missing_ok=True)
        raise IngestError(
            f"{spec.name}/{spec.split} has {writer.count} records, expected {expected}",
            writer.path,
        )
    manifest = Manifest(
        name=spec.name,
        split=spec.split,
        count=writer.count,
        sha256=sha256_file(writer.path),
        class_histogram={i: int(c) for i, c in enumerate(writer.histogram) if c},
        image_side=spec.image_side,
        num_classes=spec.num_classes,
        channel_mean=[float(x) for x in mean],
        channel_std=[float(x) for x in std],
    )
    spec.manifest_path.write_text(manifest.to_json())
    return manifest


def ingest(
    spec: DatasetSpec,
    archive=None,
    *,
    verify_archive: bool = True,
    strict_counts: bool = True,
    allow_download: bool = False,
    url: str | None = None,
) -> Manifest:
    """Decode one split of a dataset archive into a packed file and manifest.

    ``verify_archive`` compares the archive md5 against the published one and
    refuses on mismatch. ``strict_counts`` requires the canonical split size.
    """
    archive = Path(archive) if archive is not None else Path(spec.root_path) / spec.info.archive
    if not archive.exists():
        if not allow_download:
            raise IngestError("dataset archive not found", archive)
        archive = download(spec, url)
    if verify_archive and spec.info.md5 is not None:
        got = md5_file(archive)
        if got != spec.info.md5:
            raise ChecksumError(f"archive md5 {got} != expected {spec.info.md5}, refusing", archive)

    writer = PackedWriter(spec.packed_path, spec.image_side, spec.num_classes)
    try:
        for images, labels in _reader(spec, archive):
            writer.write(images, labels)
    except IngestError:
        writer.close()
        writer.path.unlink(missing_ok=True)
        raise
    except (tarfile.TarError, zipfile.BadZipFile, pickle.UnpicklingError, OSError, KeyError,
            ValueError, EOFError) as exc:
        writer.close()
        writer.path.unlink(missing_ok=True)
        raise IngestError(f"corrupt or unreadable archive ({exc})", archive) from exc
    expected = spec.info.counts[spec.split] if strict_counts else None
    manifest = _finish(spec, writer, expected)
    logger.info("ingested %s/%s: %d records", spec.name, spec.split, manifest.count)
    return manifest


def ingest_arrays(spec: DatasetSpec, images: np.ndarray, labels=None) -> Manifest:
    """Pack in-memory images (N, H, W, 3) uint8 as a split; labels may be omitted."""
    images = np.asarray(images)
    if labels is None:
        labels = np.full(len(images), UNLABELED, dtype=np.int64)
    writer = PackedWriter(spec.packed_path, spec.image_side, spec.num_classes)
    try:
        writer.write(images, labels)
    except IngestError:
        writer.close()
        writer.path.unlink(missing_ok=True)
        raise
    return _finish(spec, writer, None)


def open_split(spec: DatasetSpec, *, verify: bool = True) -> tuple[PackedDataset, Manifest]:
    """Open an ingested split; with ``verify`` the packed file hash must match the manifest."""
    manifest = Manifest.load(spec.manifest_path)
    if verify:
        got = sha256_file(spec.packed_path) if spec.packed_path.exists() else None
        if got is None:
            raise IngestError("packed split file not found", spec.packed_path)
        if got != manifest.sha256:
            raise ChecksumError("packed file does not match manifest sha256, refusing", spec.packed_path)
    data = PackedDataset(spec.packed_path)
    if len(data) != manifest.count:
        raise IngestError(f"packed file holds {len(data)} records, manifest says {manifest.count}",
                          spec.packed_path)
    return data, manifest


def batch_indices(n: int, batch_size: int, seed: int, drop_last: bool = True) -> Iterator[np.ndarray]:
    """Index batches of one shuffled epoch; the permutation depends only on ``(n, seed)``."""
    if batch_size <= 0:
        raise ConfigError("batch_size must be positive")
    if batch_size > n:
        raise ConfigError(f"batch_size {batch_size} exceeds dataset size {n}")
    order = np.random.default_rng(seed).permutation(n)
    stop = n - n % batch_size if drop_last else n
    for start in range(0, stop, batch_size):
        yield order[start:start + batch_size]


def num_batches(n: int, batch_size: int, drop_last: bool = True) -> int:
    return n // batch_size if drop_last else -(-n // batch_size)


def iterate_batches(source, batch_size: int, seed: int, drop_last: bool = True) -> Iterator[Batch]:
    """Yield shuffled batches of records from a :class:`DatasetSpec` or an open dataset."""
    data = open_split(source)[0] if isinstance(source, DatasetSpec) else source
    for idx in batch_indices(len(data), batch_size, seed, drop_last):
        yield data.take(idx)


class ArrayDataset:
    """In-memory counterpart of :class:`PackedDataset` (used by the estimators)."""

    def __init__(self, images: np.ndarray, labels=None, ids=None):
        self.images = np.asarray(images, dtype=np.uint8)
        n = len(self.images)
        self.labels = (np.full(n, UNLABELED, dtype=np.int64) if labels is None
                       else np.asarray(labels, dtype=np.int64))
        self.ids = np.arange(n, dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        self.side = self.images.shape[1]

    def __len__(self) -> int:
        return len(self.images)

    def take(self, index) -> Batch:
        index = np.asarray(index)
        return Batch(ids=self.ids[index], labels=self.labels[index], images=self.images[index])
