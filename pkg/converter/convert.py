#!/usr/bin/env python3
"""Convert a biomedical benchmark archive (.npz) to the MVDS container.

Usage: convert.py IN.npz OUT.mvds [--dataset-name NAME] [--classes K]

The archive must hold u8 image arrays and label arrays for the three
canonical splits: train_images, train_labels, val_images, val_labels,
test_images, test_labels. Images are (n, h, w) grayscale or (n, h, w, c);
labels are (n, 1) class indices (multiclass) or (n, L) 0/1 rows
(multilabel). Pixels and labels pass through losslessly; grayscale stays
single-channel (consumers replicate at load time).

MVDS layout written here (little-endian):
    magic "MVDS", version u32=1,
    n, channels, height, width, n_classes u32 each,
    label_kind u8 (0 multiclass, 1 multilabel),
    split tags u8[n] (0 train, 1 val, 2 test),
    pixels u8[n*c*h*w],
    labels u16[n] (multiclass) or ceil(K/8) bytes/sample, class j in
    byte j//8 bit j%8 (LSB first).

The tool prints per-split counts and a 64-bit checksum (decimal sum of all
pixel bytes) for a cheap integrity handshake with the consumer, then a
final `RESULT key=value ...` line. Exit codes: 0 ok, 1 usage, 2 bad data.
"""

import argparse
import struct
import sys

import numpy as np

MAGIC = b"MVDS"
VERSION = 1
SPLITS = ("train", "val", "test")


class DataError(Exception):
    pass


def load_archive(path):
    try:
        archive = np.load(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read archive {path}: {exc}") from exc
    splits = {}
    for split in SPLITS:
        for part in ("images", "labels"):
            key = f"{split}_{part}"
            if key not in archive:
                raise DataError(f"archive is missing key {key!r}")
        splits[split] = (archive[f"{split}_images"], archive[f"{split}_labels"])
    return splits


def canonical_images(images, split):
    if images.dtype != np.uint8:
        raise DataError(f"{split} images must be u8, got {images.dtype}")
    if images.ndim == 3:
        images = images[:, None, :, :]            # (n, h, w) -> (n, 1, h, w)
    elif images.ndim == 4:
        images = images.transpose(0, 3, 1, 2)     # (n, h, w, c) -> (n, c, h, w)
    else:
        raise DataError(f"{split} images have rank {images.ndim}, expected 3 or 4")
    return np.ascontiguousarray(images)


def convert(archive_path, out_path, n_classes=None):
    splits = load_archive(archive_path)

    images = []
    labels = []
    tags = []
    counts = {}
    label_width = None
    for tag, split in enumerate(SPLITS):
        imgs, labs = splits[split]
        imgs = canonical_images(imgs, split)
        labs = np.asarray(labs)
        if labs.ndim == 1:
            labs = labs[:, None]
        if labs.ndim != 2 or labs.shape[0] != imgs.shape[0]:
            raise DataError(
                f"{split} labels shape {labs.shape} does not match {imgs.shape[0]} images"
            )
        if label_width is None:
            label_width = labs.shape[1]
        elif labs.shape[1] != label_width:
            raise DataError(
                f"label arity differs across splits ({labs.shape[1]} vs {label_width})"
            )
        images.append(imgs)
        labels.append(labs)
        tags.append(np.full(imgs.shape[0], tag, dtype=np.uint8))
        counts[split] = imgs.shape[0]

    shapes = {im.shape[1:] for im in images}
    if len(shapes) != 1:
        raise DataError(f"image geometry differs across splits: {sorted(shapes)}")
    pixels = np.concatenate(images)
    labs = np.concatenate(labels)
    tags = np.concatenate(tags)
    n, c, h, w = pixels.shape

    multilabel = label_width > 1
    if multilabel:
        if not np.isin(labs, (0, 1)).all():
            raise DataError("multilabel rows must be 0/1")
        k = label_width if n_classes is None else n_classes
        if k != label_width:
            raise DataError(f"--classes {k} does not match label arity {label_width}")
        nb = (k + 7) // 8
        padded = np.zeros((n, nb * 8), dtype=np.uint8)
        padded[:, :k] = labs
        label_blob = np.packbits(padded, axis=1, bitorder="little").tobytes()
    else:
        flat = labs.reshape(n).astype(np.int64)
        if flat.min() < 0:
            raise DataError("negative class index")
        k = int(flat.max()) + 1 if n_classes is None else n_classes
        if flat.max() >= k:
            raise DataError(f"label {int(flat.max())} out of range for {k} classes")
        label_blob = flat.astype("<u2").tobytes()

    checksum = int(pixels.sum(dtype=np.uint64))
    with open(out_path, "wb") as fh:
        fh.write(struct.pack("<4sIIIIIIB", MAGIC, VERSION, n, c, h, w, k,
                             1 if multilabel else 0))
        fh.write(tags.tobytes())
        fh.write(pixels.tobytes())
        fh.write(label_blob)

    return {
        "counts": counts,
        "n": n,
        "channels": c,
        "height": h,
        "width": w,
        "n_classes": k,
        "label_kind": "multilabel" if multilabel else "multiclass",
        "checksum": checksum,
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("archive", help="input .npz bundle")
    parser.add_argument("out", help="output .mvds path")
    parser.add_argument("--dataset-name", default=None, help="label for the report")
    parser.add_argument("--classes", type=int, default=None,
                        help="class count override (default: inferred)")
    try:
        args = parser.parse_args(argv)
    except SystemExit:
        return 1
    try:
        summary = convert(args.archive, args.out, n_classes=args.classes)
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    name = args.dataset_name or "dataset"
    for split in SPLITS:
        print(f"{name} {split}: {summary['counts'][split]}")
    print(f"{name} pixel checksum: {summary['checksum']}")
    print(
        "RESULT "
        f"out={args.out} n={summary['n']} classes={summary['n_classes']} "
        f"kind={summary['label_kind']} checksum={summary['checksum']}"
    )
    return 0


if __name__ == "__main__":
    sys.exit(main())
