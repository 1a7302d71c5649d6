"""On-disk dataset container (MVDS), the batch pipeline, and a synthetic
class-conditional dataset generator.

MVDS layout (integers little-endian):

    magic    4 bytes  b"MVDS"
    version  u32      (currently 1)
    n, channels, height, width, n_classes   u32 each
    label_kind u8     (0 multiclass, 1 multilabel)
    split tags u8[n]  (0 train, 1 val, 2 test)
    pixels   u8[n * channels * height * width]
    labels   multiclass: u16[n]
             multilabel: ceil(n_classes / 8) bytes per sample,
             class j stored in byte j//8, bit j%8 (LSB first)

The file length must match the header arithmetic exactly.
"""

from __future__ import annotations

import queue
import struct
import threading
from typing import Iterator, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import (
    BadMagicError,
    ConfigError,
    LabelRangeError,
    ShapeError,
    TruncatedFileError,
)
from .tensor import Tensor

MAGIC = b"MVDS"
VERSION = 1
HEADER = struct.Struct("<4sIIIIIIB")
SPLIT_TAGS = {"train": 0, "val": 1, "test": 2}

MULTICLASS = 0
MULTILABEL = 1


def _label_bytes_per_sample(n_classes: int, label_kind: int) -> int:
    return 2 if label_kind == MULTICLASS else (n_classes + 7) // 8


class DatasetFile:
    """Read-only view over an MVDS file; samples decode lazily by index."""

    def __init__(self, path):
        self.path = str(path)
        with open(path, "rb") as fh:
            self._blob = fh.read()
        if self._blob[:4] != MAGIC:
            raise BadMagicError(f"{path}: bad magic {self._blob[:4]!r}")
        if len(self._blob) < HEADER.size:
            raise TruncatedFileError(f"{path}: header truncated")
        magic, version, n, c, h, w, k, kind = HEADER.unpack_from(self._blob, 0)
        if version != VERSION:
            raise ConfigError(f"{path}: unsupported version {version}")
        if kind not in (MULTICLASS, MULTILABEL):
            raise ConfigError(f"{path}: unknown label kind {kind}")
        self.n, self.channels, self.height, self.width = n, c, h, w
        self.n_classes = k
        self.label_kind = "multiclass" if kind == MULTICLASS else "multilabel"
        self._pixel_off = HEADER.size + n
        self._label_off = self._pixel_off + n * c * h * w
        expected = self._label_off + n * _label_bytes_per_sample(k, kind)
        if len(self._blob) != expected:
            raise TruncatedFileError(
                f"{path}: file is {len(self._blob)} bytes, header arithmetic requires {expected}"
            )
        self.splits = np.frombuffer(self._blob, dtype=np.uint8, count=n, offset=HEADER.size)
        if kind == MULTICLASS:
            self.labels = np.frombuffer(self._blob, dtype="<u2", count=n, offset=self._label_off).astype(np.int64)
            if self.labels.size and self.labels.max() >= k:
                raise LabelRangeError(
                    f"{path}: label {int(self.labels.max())} out of range for {k} classes"
                )
        else:
            nb = _label_bytes_per_sample(k, kind)
            raw = np.frombuffer(self._blob, dtype=np.uint8, count=n * nb, offset=self._label_off)
            bits = np.unpackbits(raw.reshape(n, nb), axis=1, bitorder="little")
            self.labels = bits[:, :k].astype(np.int64)

    def __len__(self) -> int:
        return self.n

    def pixels_u8(self, index: int) -> np.ndarray:
        c, h, w = self.channels, self.height, self.width
        start = self._pixel_off + index * c * h * w
        return np.frombuffer(self._blob, dtype=np.uint8, count=c * h * w, offset=start).reshape(c, h, w)

    def pixel_checksum(self) -> int:
        """64-bit sum of every stored pixel byte."""
        px = np.frombuffer(self._blob, dtype=np.uint8,
                           count=self.n * self.channels * self.height * self.width,
                           offset=self._pixel_off)
        return int(px.sum(dtype=np.uint64))

    def split_indices(self, split: str) -> np.ndarray:
        if split == "all":
            return np.arange(self.n)
        return np.flatnonzero(self.splits == SPLIT_TAGS[split])

    def labels_for(self, indices) -> np.ndarray:
        return self.labels[np.asarray(indices)]

    def pixel_batch(self, indices, size: Optional[int] = None, dtype=np.float32) -> np.ndarray:
        """Decode samples into a float batch (B, 3, S, S) in [0, 1]:
        u8 -> [0,1], bilinear resize, then grayscale replicated to 3
        channels (values preserved exactly)."""
        imgs = np.stack([self.pixels_u8(i) for i in np.asarray(indices)])
        batch = imgs.astype(dtype) / dtype(255)
        size = size or self.height
        if (self.height, self.width) != (size, size):
            batch = resize_bilinear(batch, size, size)
        if batch.shape[1] == 1:
            batch = np.repeat(batch, 3, axis=1)
        return batch


def load_dataset(path) -> DatasetFile:
    return DatasetFile(path)


def write_mvds(path, pixels: np.ndarray, labels: np.ndarray, n_classes: int,
               label_kind: str, splits: np.ndarray) -> None:
    """Serialize arrays into the MVDS layout. ``pixels`` is u8 (n, c, h, w);
    multiclass labels are ints (n,), multilabel labels 0/1 arrays (n, K)."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 4:
        raise ConfigError(f"pixels must be u8 (n, c, h, w), got {pixels.dtype} {pixels.shape}")
    n, c, h, w = pixels.shape
    splits = np.asarray(splits, dtype=np.uint8)
    if splits.shape != (n,):
        raise ConfigError("split tags must be one u8 per sample")
    kind = MULTICLASS if label_kind == "multiclass" else MULTILABEL
    if kind == MULTICLASS:
        labels = np.asarray(labels).reshape(n)
        if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
            raise LabelRangeError(f"labels outside [0, {n_classes})")
        label_blob = labels.astype("<u2").tobytes()
    else:
        labels = np.asarray(labels).reshape(n, n_classes).astype(np.uint8)
        nb = _label_bytes_per_sample(n_classes, kind)
        padded = np.zeros((n, nb * 8), dtype=np.uint8)
        padded[:, :n_classes] = labels
        label_blob = np.packbits(padded, axis=1, bitorder="little").tobytes()
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, n, c, h, w, n_classes, kind))
        fh.write(splits.tobytes())
        fh.write(np.ascontiguousarray(pixels).tobytes())
        fh.write(label_blob)


# -- pixel transforms --


def resize_bilinear(img, target_h: int, target_w: int):
    """Bilinear resample over the trailing two axes (align_corners=False).

    Same-size calls return the input values unchanged. Accepts arrays of any
    leading shape; Tensor input returns a graph-free Tensor (the resize is a
    data-pipeline step, not a model op).
    """
    if isinstance(img, Tensor):
        return Tensor(resize_bilinear(img.data, target_h, target_w))
    img = np.asarray(img)
    h, w = img.shape[-2], img.shape[-1]
    if h < 1 or w < 1:
        raise ShapeError(f"resize source dims must be >= 1, got {h}x{w}")
    if target_h < 1 or target_w < 1:
        raise ShapeError(f"resize target dims must be >= 1, got {target_h}x{target_w}")
    if (h, w) == (target_h, target_w):
        return img.copy()
    ys = (np.arange(target_h) + 0.5) * (h / target_h) - 0.5
    xs = (np.arange(target_w) + 0.5) * (w / target_w) - 0.5
    y0 = np.floor(ys)
    x0 = np.floor(xs)
    fy = (ys - y0).astype(img.dtype)
    fx = (xs - x0).astype(img.dtype)
    y0i = np.clip(y0.astype(int), 0, h - 1)
    y1i = np.clip(y0.astype(int) + 1, 0, h - 1)
    x0i = np.clip(x0.astype(int), 0, w - 1)
    x1i = np.clip(x0.astype(int) + 1, 0, w - 1)
    top = img[..., y0i, :][..., x0i] * (1 - fx) + img[..., y0i, :][..., x1i] * fx
    bot = img[..., y1i, :][..., x0i] * (1 - fx) + img[..., y1i, :][..., x1i] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def normalize(img, mean, std):
    """Per-channel (x - mean) / std over axis -3. Tensor input stays on the
    autograd graph so attacks can differentiate through it."""
    if isinstance(img, Tensor):
        c = img.shape[-3]
        mean_a, std_a = _norm_arrays(c, mean, std, img.dtype)
        return T.div(T.sub(img, Tensor(mean_a)), Tensor(std_a))
    img = np.asarray(img)
    c = img.shape[-3]
    mean_a, std_a = _norm_arrays(c, mean, std, img.dtype)
    return (img - mean_a) / std_a


def _norm_arrays(channels, mean, std, dtype):
    mean_a = np.broadcast_to(np.asarray(mean, dtype=dtype), (channels,))
    std_a = np.broadcast_to(np.asarray(std, dtype=dtype), (channels,))
    if np.any(std_a <= 0):
        raise ConfigError(f"normalize std must be > 0, got {std_a}")
    return mean_a.reshape(channels, 1, 1), std_a.reshape(channels, 1, 1)


# -- synthetic data --


def make_synthetic(n: int, classes: int, size: int, seed: int, path) -> DatasetFile:
    """Write a deterministic grayscale MVDS of class-conditional frequency
    gratings plus noise, with balanced 70/15/15 splits, and return its view.

    Each class gets its own orientation/frequency, so a small model (or even
    a linear probe) can separate the classes.
    """
    if n < classes:
        raise ConfigError(f"need at least one sample per class ({n} < {classes})")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    labels = np.arange(n) % classes  # counts within +-1 of n/classes
    pixels = np.empty((n, 1, size, size), dtype=np.uint8)
    for i in range(n):
        k = labels[i]
        theta = np.pi * k / classes
        freq = 1.5 + k
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(70, 110)
        wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / size + phase)
        noise = rng.normal(0, 16.0, size=(size, size))
        pixels[i, 0] = np.clip(128 + amp * wave + noise, 0, 255).astype(np.uint8)
    splits = np.empty(n, dtype=np.uint8)
    for k in range(classes):
        members = np.flatnonzero(labels == k)
        members = members[rng.permutation(len(members))]
        n_train = int(round(len(members) * 0.70))
        n_val = int(round(len(members) * 0.15))
        splits[members[:n_train]] = SPLIT_TAGS["train"]
        splits[members[n_train : n_train + n_val]] = SPLIT_TAGS["val"]
        splits[members[n_train + n_val :]] = SPLIT_TAGS["test"]
    write_mvds(path, pixels, labels, classes, "multiclass", splits)
    return load_dataset(path)


# -- in-memory dataset (estimator front door) --


class ArrayDataset:
    """DatasetFile-compatible view over in-memory arrays."""

    def __init__(self, pixels: np.ndarray, labels: np.ndarray, n_classes: int,
                 splits: Optional[np.ndarray] = None, label_kind: str = "multiclass"):
        pixels = np.asarray(pixels)
        if pixels.ndim == 3:
            pixels = pixels[:, None]
        if pixels.dtype == np.uint8:
            pixels = pixels.astype(np.float32) / np.float32(255.0)
        self._pixels = pixels.astype(np.float32, copy=False)
        self.n, self.channels, self.height, self.width = self._pixels.shape
        self.labels = np.asarray(labels)
        self.n_classes = n_classes
        self.label_kind = label_kind
        self.splits = np.zeros(self.n, dtype=np.uint8) if splits is None else np.asarray(splits, dtype=np.uint8)

    def __len__(self):
        return self.n

    def split_indices(self, split: str) -> np.ndarray:
        if split == "all":
            return np.arange(self.n)
        return np.flatnonzero(self.splits == SPLIT_TAGS[split])

    def labels_for(self, indices) -> np.ndarray:
        return self.labels[np.asarray(indices)]

    def pixel_batch(self, indices, size: Optional[int] = None, dtype=np.float32) -> np.ndarray:
        batch = self._pixels[np.asarray(indices)].astype(dtype, copy=True)
        size = size or self.height
        if (self.height, self.width) != (size, size):
            batch = resize_bilinear(batch, size, size)
        if batch.shape[1] == 1:
            batch = np.repeat(batch, 3, axis=1)
        return batch


# -- bounded deterministic prefetch --


class Prefetcher:
    """Decode batches on a worker thread, at most ``slots`` decoded-but-
    unconsumed batches alive at a time, delivered strictly in order."""

    def __init__(self, fetch, order: Sequence, slots: int = 1):
        self.fetch = fetch
        self.order = list(order)
        self.slots = max(1, slots)
        self._sem = threading.Semaphore(self.slots)
        self._queue: queue.Queue = queue.Queue()
        self._live = 0
        self.max_live = 0
        self._lock = threading.Lock()
        self._stopped = False
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self):
        try:
            for item in self.order:
                self._sem.acquire()
                if self._stopped:
                    break
                with self._lock:
                    self._live += 1
                    self.max_live = max(self.max_live, self._live)
                self._queue.put(("ok", self.fetch(item)))
            self._queue.put(("done", None))
        except BaseException as exc:  # surface worker errors to the consumer
            self._queue.put(("err", exc))

    def close(self) -> None:
        """Unblock and retire the worker; call when abandoning iteration early."""
        self._stopped = True
        self._sem.release()
        self._thread.join(timeout=5)

    def __iter__(self) -> Iterator:
        while True:
            kind, payload = self._queue.get()
            if kind == "done":
                return
            if kind == "err":
                raise payload
            with self._lock:
                self._live -= 1
            self._sem.release()
            yield payload
