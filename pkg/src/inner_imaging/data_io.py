"""Dataset files, synthetic data, augmentation and checkpoint persistence.

Raw dataset layout (all little-endian)::

    magic  b"INIR"   4 bytes
    version uint16   currently 1
    N      uint32    number of images
    C,H,W  uint16 x3
    label_width uint8  bytes per label (1 or 2)
    labels N * label_width bytes
    pixels N*C*H*W uint8, image-major, then channel, row, column

Checkpoints are a fixed header (``b"INICKPT\\0"`` + uint32 version + uint64
JSON length), a canonical JSON document (architecture, parameter and buffer
records, optimizer and RNG state), then the float64 payload in record order.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "TruncatedFileError",
    "HeaderError",
    "LabelRangeError",
    "DimensionError",
    "CheckpointError",
    "DATA_ROOT_ENV",
    "Dataset",
    "resolve_path",
    "write_raw",
    "load_dataset",
    "load_cifar_binary",
    "load_svhn_mat",
    "synth_dataset",
    "split",
    "standardize",
    "augment",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
]

DATA_ROOT_ENV = "INI_DATA_ROOT"

RAW_MAGIC = b"INIR"
RAW_VERSION = 1
_RAW_HEADER = struct.Struct("<4sHIHHHB")

CKPT_MAGIC = b"INICKPT\0"
CKPT_VERSION = 1
_CKPT_HEADER = struct.Struct("<8sIQ")


class DataError(ValueError):
    pass


class TruncatedFileError(DataError):
    pass


class HeaderError(DataError):
    pass


class LabelRangeError(DataError):
    pass


class DimensionError(DataError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [N,C,H,W] float64
    labels: np.ndarray  # [N] int64
    num_classes: int
    split: str = "train"

    def __len__(self) -> int:
        return len(self.labels)


def resolve_path(path: str | os.PathLike) -> Path:
    """Relative paths resolve against ``$INI_DATA_ROOT`` when it is set."""
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _check_labels(labels: np.ndarray, num_classes: int | None) -> int:
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = int(np.flatnonzero((labels < 0) | (labels >= k))[0])
        raise LabelRangeError(f"label {int(labels[bad])} at index {bad} is outside [0, {k})")
    return k


def write_raw(path: str | os.PathLike, pixels: np.ndarray, labels: np.ndarray, label_width: int = 1) -> None:
    """Write uint8 ``pixels`` [N,C,H,W] and integer labels in the raw layout."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, c, h, w = pixels.shape
    dtype = {1: "<u1", 2: "<u2"}[label_width]
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(RAW_MAGIC, RAW_VERSION, n, c, h, w, label_width))
        fh.write(np.asarray(labels, dtype=dtype).tobytes())
        fh.write(pixels.tobytes())


def _read_raw(path: Path, num_classes: int | None, split_tag: str) -> Dataset:
    blob = path.read_bytes()
    if len(blob) < _RAW_HEADER.size:
        raise TruncatedFileError(f"{path}: {len(blob)} bytes, header needs {_RAW_HEADER.size}")
    magic, version, n, c, h, w, lw = _RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise HeaderError(f"{path}: bad magic {magic!r} at offset 0")
    if version != RAW_VERSION:
        raise HeaderError(f"{path}: unsupported version {version} at offset 4")
    if lw not in (1, 2):
        raise HeaderError(f"{path}: label width {lw} at offset 16 must be 1 or 2")
    if min(c, h, w) == 0:
        raise HeaderError(f"{path}: zero image dimension {c}x{h}x{w} at offset 10")
    off = _RAW_HEADER.size
    need = off + n * lw + n * c * h * w
    if len(blob) < need:
        raise TruncatedFileError(f"{path}: expected {need} bytes, found {len(blob)}")
    if len(blob) > need:
        raise DimensionError(f"{path}: {len(blob) - need} trailing bytes after offset {need}")
    labels = np.frombuffer(blob, dtype="<u1" if lw == 1 else "<u2", count=n, offset=off).astype(np.int64)
    pixels = np.frombuffer(blob, dtype=np.uint8, count=n * c * h * w, offset=off + n * lw)
    k = _check_labels(labels, num_classes)
    images = pixels.reshape(n, c, h, w).astype(np.float64) / 255.0
    return Dataset(images, labels, k, split_tag)


def _read_csv(path: Path, shape: tuple[int, int, int] | None, num_classes: int | None, split_tag: str) -> Dataset:
    if shape is None:
        raise DimensionError("csv datasets need the image shape (C, H, W)")
    c, h, w = shape
    labels, rows = [], []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if lineno == 1 and row[0].strip().lower() == "label":
                continue
            if len(row) != 1 + c * h * w:
                raise DimensionError(f"{path}:{lineno}: {len(row) - 1} pixel values, expected {c * h * w}")
            labels.append(int(row[0]))
            rows.append([int(v) for v in row[1:]])
    lab = np.asarray(labels, dtype=np.int64)
    pix = np.asarray(rows, dtype=np.int64).reshape(-1, c, h, w)
    if pix.size and (pix.min() < 0 or pix.max() > 255):
        raise DataError(f"{path}: pixel values must lie in [0, 255]")
    k = _check_labels(lab, num_classes)
    return Dataset(pix.astype(np.float64) / 255.0, lab, k, split_tag)


def load_dataset(
    path: str | os.PathLike,
    format: str = "raw_u8",
    shape: tuple[int, int, int] | None = None,
    num_classes: int | None = None,
    split: str = "train",
) -> Dataset:
    """Load a raw or csv dataset with pixels scaled to [0, 1]."""
    p = resolve_path(path)
    if not p.exists():
        raise FileNotFoundError(p)
    if format == "raw_u8":
        return _read_raw(p, num_classes, split)
    if format == "csv":
        return _read_csv(p, shape, num_classes, split)
    raise ValueError(f"unknown dataset format {format!r}")


def load_cifar_binary(path: str | os.PathLike, label_bytes: int = 1, split: str = "train") -> Dataset:
    """CIFAR-10 (1 label byte) or CIFAR-100 (coarse+fine bytes, fine label kept) binary batches."""
    p = resolve_path(path)
    blob = np.fromfile(p, dtype=np.uint8)
    rec = label_bytes + 3 * 32 * 32
    if blob.size % rec:
        raise TruncatedFileError(f"{p}: {blob.size} bytes is not a multiple of the {rec}-byte record")
    recs = blob.reshape(-1, rec)
    labels = recs[:, label_bytes - 1].astype(np.int64)
    images = recs[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, 10 if label_bytes == 1 else 100, split)


def load_svhn_mat(path: str | os.PathLike, split: str = "train") -> Dataset:
    """SVHN cropped-digit ``.mat`` file; label 10 stands for digit 0."""
    from scipy.io import loadmat

    m = loadmat(resolve_path(path))
    x, y = m["X"], m["y"].reshape(-1).astype(np.int64)
    if x.ndim != 4 or x.shape[3] != y.size:
        raise DimensionError(f"SVHN arrays disagree: X {x.shape}, y {y.shape}")
    y[y == 10] = 0
    images = x.transpose(3, 2, 0, 1).astype(np.float64) / 255.0
    return Dataset(images, y, 10, split)


def synth_dataset(
    classes: int = 10,
    size: int = 1000,
    image: tuple[int, int] = (16, 16),
    channels: int = 3,
    seed: int = 0,
    noise: float = 0.15,
    jitter: int = 2,
    split: str = "train",
) -> Dataset:
    """Class-patterned images in [0, 1] with a balanced label histogram.

    Every class owns a grating (orientation and frequency), a colour mix and a
    blob position. Samples add a random shift of up to ``jitter`` pixels,
    random contrast and Gaussian noise.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    proto_rng = np.random.default_rng(10_007 * classes + 17)
    h, w = image
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    protos = []
    for k in range(classes):
        theta = np.pi * k / classes
        freq = 2 * np.pi * (1.0 + (k % 3)) / max(h, w)
        grating = 0.5 + 0.5 * np.cos(freq * (np.cos(theta) * xx + np.sin(theta) * yy))
        cy, cx = proto_rng.uniform(0.25, 0.75) * h, proto_rng.uniform(0.25, 0.75) * w
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (0.12 * max(h, w)) ** 2))
        mix = proto_rng.uniform(0.2, 1.0, size=channels)
        protos.append(np.stack([mix[c] * grating * 0.6 + (1 - mix[c]) * blob for c in range(channels)]))
    protos = np.stack(protos)

    labels = np.arange(size) % classes
    rng.shuffle(labels)
    images = np.empty((size, channels, h, w))
    pad = jitter
    for i, k in enumerate(labels):
        base = np.pad(protos[k], ((0, 0), (pad, pad), (pad, pad)), mode="reflect")
        dy, dx = rng.integers(0, 2 * pad + 1, size=2)
        img = base[:, dy:dy + h, dx:dx + w] * rng.uniform(0.7, 1.0)
        img = img + rng.normal(0.0, noise, size=img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels.astype(np.int64), classes, split)


def split(ds: Dataset, first: int, names: tuple[str, str] = ("train", "test")) -> tuple[Dataset, Dataset]:
    return (
        Dataset(ds.images[:first], ds.labels[:first], ds.num_classes, names[0]),
        Dataset(ds.images[first:], ds.labels[first:], ds.num_classes, names[1]),
    )


def standardize(train: Dataset, *others: Dataset) -> tuple[Dataset, ...]:
    """Per-channel standardisation with statistics from ``train`` only."""
    mean = train.images.mean(axis=(0, 2, 3), keepdims=True)
    std = train.images.std(axis=(0, 2, 3), keepdims=True)
    std = np.where(std > 0, std, 1.0)
    return tuple(replace(d, images=(d.images - mean) / std) for d in (train,) + others)


def augment(batch: np.ndarray, policy: str, rng: np.random.Generator | None = None, pad: int = 4) -> np.ndarray:
    """``"none"`` or ``"flip_translate"``: mirror with p=0.5, then zero-pad and random-crop."""
    if policy == "none":
        return batch
    if policy != "flip_translate":
        raise ValueError(f"unknown augmentation policy {policy!r}")
    if rng is None:
        raise ValueError("flip_translate needs a seeded generator")
    n, c, h, w = batch.shape
    flips = rng.random(n) < 0.5
    out = batch.copy()
    out[flips] = out[flips][..., ::-1]
    if pad:
        padded = np.pad(out, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
        for i, (dy, dx) in enumerate(offs):
            out[i] = padded[i, :, dy:dy + h, dx:dx + w]
    return out


# -- checkpoints ------------------------------------------------------------------------

def checkpoint_bytes(
    architecture: dict,
    params: list[tuple[str, np.ndarray]],
    buffers: list[tuple[str, np.ndarray]] = (),
    optimizer: list[np.ndarray] = (),
    rng_state: dict | None = None,
    extra: dict | None = None,
) -> bytes:
    records, chunks, offset = [], [], 0

    def add(kind: str, name: str, arr: np.ndarray) -> None:
        nonlocal offset
        data = np.ascontiguousarray(arr, dtype="<f8")
        records.append({"kind": kind, "name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(data.tobytes())
        offset += data.nbytes

    for name, arr in params:
        add("param", name, arr)
    for name, arr in buffers:
        add("buffer", name, arr)
    for i, arr in enumerate(optimizer):
        add("momentum", str(i), arr)
    doc = {
        "architecture": architecture,
        "records": records,
        "rng": rng_state,
        "extra": extra or {},
    }
    header = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return _CKPT_HEADER.pack(CKPT_MAGIC, CKPT_VERSION, len(header)) + header + b"".join(chunks)


def save_checkpoint(path: str | os.PathLike, **bundle) -> None:
    """Write a checkpoint; keyword arguments as for :func:`checkpoint_bytes`."""
    blob = checkpoint_bytes(**bundle)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict:
    """Read a checkpoint into ``{architecture, params, buffers, optimizer, rng, extra}``."""
    blob = Path(path).read_bytes()
    if len(blob) < _CKPT_HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, hlen = _CKPT_HEADER.unpack_from(blob)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (magic {magic!r})")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CKPT_VERSION}")
    start = _CKPT_HEADER.size
    try:
        doc = json.loads(blob[start:start + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    payload = memoryview(blob)[start + hlen:]
    out = {"architecture": doc["architecture"], "params": [], "buffers": [], "optimizer": [],
           "rng": doc["rng"], "extra": doc["extra"]}
    expected = 0
    for rec in doc["records"]:
        shape = tuple(rec["shape"])
        count = int(np.prod(shape)) if shape else 1
        lo = rec["offset"]
        # records tile the payload back to back, so a tampered shape shows up as a gap or overrun
        if lo != expected or lo + 8 * count > len(payload):
            raise CheckpointError(f"{path}: record {rec['name']!r} with shape {list(shape)} does not fit the payload")
        expected = lo + 8 * count
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=lo).reshape(shape).astype(np.float64)
        if rec["kind"] == "param":
            out["params"].append((rec["name"], arr))
        elif rec["kind"] == "buffer":
            out["buffers"].append((rec["name"], arr))
        else:
            out["optimizer"].append(arr)
    if expected != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - expected} payload bytes not covered by any record")
    return out
