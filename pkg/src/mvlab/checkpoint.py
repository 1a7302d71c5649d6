"""Binary model checkpoints.

Layout (all integers little-endian):

    magic   4 bytes  b"MVWT"
    version u32      (currently 1)
    digest  32 bytes sha256 of the canonical architecture JSON
    then, until EOF, one record per named tensor:
        name_len u32, name bytes (utf-8)
        dtype    u8   (1 = float32, 2 = float64)
        rank     u32, dims u32 * rank
        data     raw little-endian scalars

Trainable parameters come first, then named buffers (BatchNorm running
statistics), so evaluation state round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from typing import Optional

import numpy as np

from .errors import BadMagicError, ConfigError, TruncatedFileError
from .model import HybridNet, ModelConfig, build_model, config_digest, standard_config

MAGIC = b"MVWT"
VERSION = 1

_DTYPE_TAGS = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_TAG_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    fh.write(struct.pack("<I", len(nb)))
    fh.write(nb)
    fh.write(struct.pack("<B", _DTYPE_TAGS[arr.dtype]))
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<I", d))
    fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def save_checkpoint(model: HybridNet, cfg: ModelConfig, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(config_digest(cfg))
        for name, p in model.named_parameters():
            _write_record(fh, name, p.data)
        for name, b in model.named_buffers():
            _write_record(fh, name, b)


def read_checkpoint(path) -> tuple[int, bytes, dict[str, np.ndarray]]:
    """Parse a checkpoint into (version, digest, name -> array)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint (magic {blob[:4]!r})")
    if len(blob) < 40:
        raise TruncatedFileError(f"{path}: header truncated")
    (version,) = struct.unpack_from("<I", blob, 4)
    digest = blob[8:40]
    records: dict[str, np.ndarray] = {}
    off = 40
    try:
        while off < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode()
            off += nlen
            tag = blob[off]
            off += 1
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", blob, off)
            off += 4 * rank
            dt = _TAG_DTYPES[tag]
            count = int(np.prod(dims)) if rank else 1
            end = off + count * dt.itemsize
            if end > len(blob):
                raise TruncatedFileError(f"{path}: record {name!r} truncated")
            records[name] = np.frombuffer(blob[off:end], dtype=dt).reshape(dims).copy()
            off = end
    except (struct.error, IndexError, KeyError) as exc:
        raise TruncatedFileError(f"{path}: malformed record stream ({exc})") from exc
    return version, digest, records


def load_checkpoint(path, cfg: Optional[ModelConfig] = None) -> tuple[HybridNet, ModelConfig]:
    """Rebuild a model from a checkpoint.

    When ``cfg`` is omitted the architecture is inferred by matching the
    stored digest against the standard variants (any class count the head
    shape reveals).
    """
    version, digest, records = read_checkpoint(path)
    if version != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {version}")
    dtype = "float64" if any(a.dtype == np.float64 for a in records.values()) else "float32"
    if cfg is None:
        cfg = _infer_config(digest, records, dtype)
    elif config_digest(cfg) != digest:
        raise ConfigError(f"{path}: checkpoint digest does not match the given config")
    model = build_model(cfg, seed=0)
    param_names = set()
    for name, p in model.named_parameters():
        param_names.add(name)
        if name not in records:
            raise ConfigError(f"{path}: missing parameter {name!r}")
        if records[name].shape != p.data.shape:
            raise ConfigError(
                f"{path}: shape mismatch for {name!r}: "
                f"{records[name].shape} vs {p.data.shape}"
            )
        p.data = records[name].astype(cfg.np_dtype(), copy=False)
    for name, _ in model.named_buffers():
        if name in records:
            _assign_buffer(model, name, records[name].astype(cfg.np_dtype(), copy=False))
    return model.eval(), cfg


def _assign_buffer(model, dotted: str, value: np.ndarray) -> None:
    parts = dotted.split(".")
    obj = model
    for part in parts[:-1]:
        obj = obj._children[part] if part in obj._children else getattr(obj, part)
    obj.update_buffer(parts[-1], value)


def _infer_config(digest: bytes, records: dict, dtype: str) -> ModelConfig:
    head = records.get("head.weight")
    num_classes = int(head.shape[1]) if head is not None else 8
    for variant in ("toy", "t", "s", "l"):
        cand = standard_config(variant, num_classes=num_classes, dtype=dtype)
        if config_digest(cand) == digest:
            return cand
    raise ConfigError(
        "checkpoint does not match any standard variant; pass the config explicitly"
    )
