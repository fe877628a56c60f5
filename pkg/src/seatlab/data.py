"""Datasets (MNIST IDX, CIFAR-10 binary), augmentation, checkpoints and metric files."""
from __future__ import annotations

import csv
import gzip
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .engine import DTYPE

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
CKPT_MAGIC = b"SEATCKPT"
CKPT_VERSION = 1
METRIC_FIELDS = ("epoch", "sa", "ra_pgd20", "acc_fgsm", "mean_xi", "train_loss", "lr")


class DataFormatError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray  # [N]
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=DTYPE)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be [N, C, H, W], got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DataFormatError("image and label counts differ")
        if len(self.labels) == 0:
            raise DataFormatError("empty dataset")
        if self.images.min() < 0 or self.images.max() > 1:
            raise DataFormatError("pixels outside [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DataFormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def take(self, idx, split=None) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], split or self.split, self.num_classes)

    def head(self, n: int) -> "Dataset":
        return self.take(slice(0, n))

    def split_tail(self, n: int) -> tuple["Dataset", "Dataset"]:
        """(everything but the last n, the last n as a validation split)."""
        cut = len(self) - n
        return self.take(slice(0, cut)), self.take(slice(cut, None), "val")

    def batches(self, batch_size: int, rng=None):
        """Yield (images, labels) batches; shuffled when ``rng`` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for i in range(0, len(self), batch_size):
            idx = order[i:i + batch_size]
            yield self.images[idx], self.labels[idx]


# -- IDX ----------------------------------------------------------------------------

def _read_bytes(path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, what: str) -> np.ndarray:
    if len(raw) < 4:
        raise DataFormatError(f"{what}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise DataFormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = got & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{what}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header != count:
        raise DataFormatError(f"{what}: expected {count} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, split="train", num_classes=10) -> Dataset:
    """Big-endian IDX image/label pair (optionally gzipped); pixels scaled by 1/255."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES, "images")
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS, "labels")
    if len(images) != len(labels):
        raise DataFormatError(f"{len(images)} images but {len(labels)} labels")
    if labels.size and labels.max() >= num_classes:
        raise DataFormatError(f"label {labels.max()} outside [0, {num_classes})")
    x = images.astype(DTYPE)[:, None] / DTYPE(255.0)
    return Dataset(x, labels.astype(np.int64), split, num_classes)


def write_idx(path, array: np.ndarray):
    """Write a uint8 array as IDX (gzipped when the name ends in .gz)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    payload = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    payload += array.tobytes()
    path = Path(path)
    if path.suffix == ".gz":
        # mtime=0 keeps the file bytes reproducible
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz"),
    "test": ("t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte.gz"),
}


def find_mnist_files(directory, split):
    """Locate the IDX image/label pair for ``split`` with or without .gz."""
    directory = Path(directory)
    pair = []
    for name in MNIST_FILES[split]:
        for candidate in (name, name[:-3]):
            if (directory / candidate).exists():
                pair.append(directory / candidate)
                break
        else:
            raise FileNotFoundError(directory / name)
    return pair


def load_mnist(directory, split="train", subset=None) -> Dataset:
    images, labels = find_mnist_files(directory, split)
    ds = load_idx(images, labels, split)
    return ds.head(subset) if subset else ds


def export_mnist_subset(directory, test_size=1000, seed=0):
    """Write mlxtend's bundled 5000-image MNIST sample as IDX train/test files.

    The sample is class-sorted, so it is shuffled once with ``seed`` before
    the last ``test_size`` images become the test split.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    order = np.random.default_rng(seed).permutation(len(y))
    x = x[order].reshape(-1, 28, 28).astype(np.uint8)
    y = y[order].astype(np.uint8)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cut = len(y) - test_size
    for split, sl in (("train", slice(0, cut)), ("test", slice(cut, None))):
        img_name, lbl_name = MNIST_FILES[split]
        write_idx(directory / img_name, x[sl])
        write_idx(directory / lbl_name, y[sl])
    return directory


# -- CIFAR-10 ------------------------------------------------------------------------

CIFAR_TRAIN = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST = ("test_batch.bin",)


def parse_cifar10_records(raw: bytes, source="cifar") -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"{source}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        raise DataFormatError(f"{source}: label {labels.max()} > 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(directory, split="train", subset=None) -> Dataset:
    """CIFAR-10 binary batches; ``subset`` keeps the first n records in file order."""
    directory = Path(directory)
    names = CIFAR_TRAIN if split == "train" else CIFAR_TEST
    xs, ys, have = [], [], 0
    for name in names:
        path = directory / name
        if not path.exists():
            if xs:
                break
            raise FileNotFoundError(path)
        x, y = parse_cifar10_records(_read_bytes(path), name)
        xs.append(x)
        ys.append(y)
        have += len(y)
        if subset and have >= subset:
            break
    x, y = np.concatenate(xs), np.concatenate(ys)
    if subset:
        x, y = x[:subset], y[:subset]
    return Dataset(x.astype(DTYPE) / DTYPE(255.0), y, split)


# -- augmentation --------------------------------------------------------------------

def flip(images, coins):
    """Mirror the samples whose coin is set."""
    out = images.copy()
    out[coins] = out[coins][..., ::-1]
    return out


def augment(images, rng, enabled=True, pad=4):
    """Random horizontal flip (p = 0.5) and random crop after zero padding by ``pad``."""
    if not enabled:
        return images
    n, _, h, w = images.shape
    out = flip(images, rng.random(n) < 0.5)
    padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dy = rng.integers(0, 2 * pad + 1, size=n)
    dx = rng.integers(0, 2 * pad + 1, size=n)
    for i in range(n):
        out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
    return out


# -- checkpoints ---------------------------------------------------------------------

@dataclass
class Checkpoint:
    version: int
    spec_descriptor: str
    params: dict
    step: int
    rng_state: dict | None
    config_digest: str


def _pack_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def checkpoint_bytes(model, step=0, rng=None, config_digest="") -> bytes:
    meta = {"step": int(step), "config_digest": config_digest,
            "rng_state": rng.bit_generator.state if rng is not None else None}
    out = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), _pack_text(model.spec.descriptor()),
           _pack_text(json.dumps(meta, sort_keys=True, separators=(",", ":"))),
           struct.pack("<I", len(model.params))]
    for name, value in model.params.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        out.append(_pack_text(name))
        out.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def save_checkpoint(model, path, step=0, rng=None, config_digest=""):
    """Layout (little-endian): magic, u32 version, u32-length-prefixed model
    descriptor, u32-length-prefixed metadata JSON, u32 tensor count, then per
    tensor: u32-length-prefixed name, u32 rank, u32 dims, raw float32 data."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, step, rng, config_digest))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, raw):
        self.raw, self.pos = raw, 0

    def take(self, n, what):
        if n < 0 or self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.raw[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]

    def text(self, what):
        n = self.u32(what + " length")
        try:
            return self.take(n, what).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"corrupt {what}") from exc


def parse_checkpoint(raw: bytes) -> Checkpoint:
    r = _Reader(raw)
    if r.take(len(CKPT_MAGIC), "magic") != CKPT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint")
    version = r.u32("version")
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    descriptor = r.text("model descriptor")
    try:
        meta = json.loads(r.text("metadata"))
    except json.JSONDecodeError as exc:
        raise CheckpointError("corrupt metadata") from exc
    params = {}
    for _ in range(r.u32("tensor count")):
        name = r.text("tensor name")
        rank = r.u32(f"{name} rank")
        if rank > 8:
            raise CheckpointError(f"{name}: implausible rank {rank}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, f"{name} dims"))
        count = int(np.prod(dims, dtype=np.int64))
        data = r.take(4 * count, f"{name} data")
        params[name] = np.frombuffer(data, dtype="<f4").astype(DTYPE).reshape(dims)
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after last tensor")
    return Checkpoint(version, descriptor, params, meta.get("step", 0), meta.get("rng_state"),
                      meta.get("config_digest", ""))


def load_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes())


def load_model(path, spec=None):
    """Checkpoint -> Model.  With ``spec`` given, every tensor must match it."""
    from .models import Model, ModelSpec

    ckpt = load_checkpoint(path)
    stored = ModelSpec.from_descriptor(ckpt.spec_descriptor)
    spec = spec or stored
    expected = spec.param_shapes()
    for name, shape in expected.items():
        if name not in ckpt.params:
            raise CheckpointError(f"tensor {name!r} missing from checkpoint")
        if ckpt.params[name].shape != shape:
            raise CheckpointError(
                f"tensor {name!r} has shape {ckpt.params[name].shape}, model expects {shape}")
    extra = set(ckpt.params) - set(expected)
    if extra:
        raise CheckpointError(f"unexpected tensor {sorted(extra)[0]!r} in checkpoint")
    return Model(spec, {k: ckpt.params[k] for k in expected}), ckpt


def checkpoint_path(directory, epoch) -> Path:
    return Path(directory) / f"epoch{epoch:03d}.ckpt"


def restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


# -- metrics ----------------------------------------------------------------------------

def _fmt(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.6f}"


def write_metrics(records, path):
    """One row per epoch under the fixed header; floats with six decimals."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for rec in records:
            row = rec if isinstance(rec, dict) else vars(rec)
            w.writerow([_fmt(row[k]) for k in METRIC_FIELDS])
    return path


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items()} for row in rows]


def write_table(rows, columns, path, comment=None):
    """Generic CSV writer with the same number formatting as the metrics file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in rows:
            w.writerow([v if isinstance(v, str) else _fmt(v) for v in (row[c] for c in columns)])
    return path
