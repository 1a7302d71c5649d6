"""Converter round-trip checks against the MVDS consumer."""

import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))
from convert import DataError, convert, main

from mvlab.data import load_dataset

BREAST_SPLITS = {"train": 546, "val": 78, "test": 156}


def fabricate_archive(path, counts, h=28, w=28, channels=None, label_width=1, classes=2, seed=0):
    rng = np.random.default_rng(seed)
    payload = {}
    for split, n in counts.items():
        shape = (n, h, w) if channels is None else (n, h, w, channels)
        payload[f"{split}_images"] = rng.integers(0, 256, size=shape).astype(np.uint8)
        if label_width == 1:
            payload[f"{split}_labels"] = rng.integers(0, classes, size=(n, 1)).astype(np.uint8)
        else:
            payload[f"{split}_labels"] = rng.integers(0, 2, size=(n, label_width)).astype(np.uint8)
    np.savez(path, **payload)
    return payload


class TestRoundTrip:
    def test_breast_sized_archive_counts_exact(self, tmp_path):
        npz = tmp_path / "breast.npz"
        out = tmp_path / "breast.mvds"
        payload = fabricate_archive(npz, BREAST_SPLITS, classes=2, seed=1)
        summary = convert(npz, out)
        assert summary["counts"] == BREAST_SPLITS
        assert summary["n"] == 780
        ds = load_dataset(out)
        assert {s: len(ds.split_indices(s)) for s in BREAST_SPLITS} == BREAST_SPLITS
        assert ds.pixel_checksum() == summary["checksum"]
        expected = sum(int(payload[f"{s}_images"].sum(dtype=np.uint64)) for s in BREAST_SPLITS)
        assert summary["checksum"] == expected

    def test_pixels_and_labels_lossless(self, tmp_path):
        npz = tmp_path / "a.npz"
        out = tmp_path / "a.mvds"
        payload = fabricate_archive(npz, {"train": 5, "val": 2, "test": 3}, classes=4, seed=2)
        convert(npz, out)
        ds = load_dataset(out)
        stacked = np.concatenate([payload[f"{s}_images"] for s in ("train", "val", "test")])
        for i in range(10):
            assert np.array_equal(ds.pixels_u8(i)[0], stacked[i])
        labels = np.concatenate([payload[f"{s}_labels"] for s in ("train", "val", "test")])
        assert np.array_equal(ds.labels, labels.reshape(-1))

    def test_multilabel_archive_uses_bitmasks(self, tmp_path):
        npz = tmp_path / "chest.npz"
        out = tmp_path / "chest.mvds"
        payload = fabricate_archive(npz, {"train": 6, "val": 2, "test": 2},
                                    label_width=14, seed=3)
        summary = convert(npz, out)
        assert summary["label_kind"] == "multilabel"
        assert summary["n_classes"] == 14
        ds = load_dataset(out)
        assert ds.label_kind == "multilabel" and ds.n_classes == 14
        labels = np.concatenate([payload[f"{s}_labels"] for s in ("train", "val", "test")])
        assert np.array_equal(ds.labels, labels)
        # ceil(14/8) = 2 bitmask bytes per sample
        header, n, pixel_bytes = 29, 10, 10 * 28 * 28
        assert out.stat().st_size == header + n + pixel_bytes + n * 2

    def test_rgb_archive_keeps_three_channels(self, tmp_path):
        npz = tmp_path / "rgb.npz"
        out = tmp_path / "rgb.mvds"
        payload = fabricate_archive(npz, {"train": 4, "val": 2, "test": 2},
                                    channels=3, classes=3, seed=4)
        convert(npz, out)
        ds = load_dataset(out)
        assert ds.channels == 3
        assert np.array_equal(ds.pixels_u8(0), payload["train_images"][0].transpose(2, 0, 1))

    def test_header_arithmetic_exact(self, tmp_path):
        npz = tmp_path / "b.npz"
        out = tmp_path / "b.mvds"
        fabricate_archive(npz, {"train": 7, "val": 1, "test": 2}, h=6, w=5, classes=3)
        convert(npz, out)
        n, c, h, w = 10, 1, 6, 5
        assert out.stat().st_size == 29 + n + n * c * h * w + n * 2


class TestValidation:
    def test_missing_key_rejected(self, tmp_path):
        npz = tmp_path / "missing.npz"
        np.savez(npz, train_images=np.zeros((2, 4, 4), dtype=np.uint8))
        with pytest.raises(DataError, match="missing key"):
            convert(npz, tmp_path / "x.mvds")

    def test_wrong_dtype_rejected(self, tmp_path):
        npz = tmp_path / "f32.npz"
        payload = {f"{s}_images": np.zeros((2, 4, 4), dtype=np.float32) for s in ("train", "val", "test")}
        payload.update({f"{s}_labels": np.zeros((2, 1), dtype=np.uint8) for s in ("train", "val", "test")})
        np.savez(npz, **payload)
        with pytest.raises(DataError, match="u8"):
            convert(npz, tmp_path / "x.mvds")

    def test_label_arity_mismatch_rejected(self, tmp_path):
        npz = tmp_path / "arity.npz"
        payload = {f"{s}_images": np.zeros((2, 4, 4), dtype=np.uint8) for s in ("train", "val", "test")}
        payload["train_labels"] = np.zeros((2, 1), dtype=np.uint8)
        payload["val_labels"] = np.zeros((2, 3), dtype=np.uint8)
        payload["test_labels"] = np.zeros((2, 1), dtype=np.uint8)
        np.savez(npz, **payload)
        with pytest.raises(DataError, match="arity"):
            convert(npz, tmp_path / "x.mvds")

    def test_classes_override_checked(self, tmp_path):
        npz = tmp_path / "cls.npz"
        fabricate_archive(npz, {"train": 2, "val": 2, "test": 2}, classes=4, seed=5)
        with pytest.raises(DataError, match="range"):
            convert(npz, tmp_path / "x.mvds", n_classes=2)


class TestCli:
    def test_checksum_printed_matches_loader(self, tmp_path):
        npz = tmp_path / "cli.npz"
        out = tmp_path / "cli.mvds"
        fabricate_archive(npz, {"train": 4, "val": 2, "test": 2}, classes=2, seed=6)
        script = Path(__file__).parent / "convert.py"
        proc = subprocess.run([sys.executable, str(script), str(npz), str(out),
                               "--dataset-name", "demo"],
                              capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        printed = int([l for l in proc.stdout.splitlines() if "checksum:" in l][0].split()[-1])
        assert load_dataset(out).pixel_checksum() == printed
        assert proc.stdout.strip().splitlines()[-1].startswith("RESULT ")

    def test_missing_file_exit_code_2(self, tmp_path):
        assert main([str(tmp_path / "nope.npz"), str(tmp_path / "o.mvds")]) == 2

    def test_usage_error_exit_code_1(self):
        assert main([]) == 1
