"""Signal records, preprocessing, patch extraction and the on-disk dataset format.

Preprocessing order is fixed: instance normalization, then length fitting, then
patch extraction. Zero padding therefore never enters the normalization stats.

Dataset file layout (little-endian)::

    b"WFDS" | u16 version=1 | u8 dtype=0 (f32) | u16 channels | u32 length | u32 count
    | count * channels * length f32 samples

Labels and per-record metadata live in ``<name>.manifest.json`` next to the file.
"""
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError, FormatError, LengthError
from .kernels import backend as _k

NORM_EPS = 1e-5
SOURCE_KINDS = ("iq", "cir", "synthetic")
FIT_MODES = ("pad_right_zero", "upsample_linear")

DATASET_MAGIC = b"WFDS"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sHBHII")


@dataclass(frozen=True)
class HyperConfig:
    input_len: int = 4096
    patch_len: int = 128
    stride: int = 32
    channels: int = 2
    hidden_dim: int = 64
    mask_ratio: float = 0.5

    def __post_init__(self):
        L, P, S = self.input_len, self.patch_len, self.stride
        if not (1 <= P <= L):
            raise ConfigError(f"patch_len must satisfy 1 <= P <= L, got P={P}, L={L}")
        if not (1 <= S <= P):
            raise ConfigError(f"stride must satisfy 1 <= S <= P, got S={S}, P={P}")
        if self.hidden_dim < 1 or self.channels < 1:
            raise ConfigError("hidden_dim and channels must be >= 1")
        if self.mask_ratio != 0.5:
            raise ConfigError("mask_ratio is fixed at 0.5")

    @property
    def num_patches(self):
        return (self.input_len - self.patch_len) // self.stride + 1

    def require_trainable(self):
        """Pre-training needs at least two patches to build complementary views."""
        if self.num_patches < 2:
            raise ConfigError(f"need at least 2 patches, config yields {self.num_patches}")
        return self

    def to_dict(self):
        return {
            "input_len": self.input_len, "patch_len": self.patch_len, "stride": self.stride,
            "channels": self.channels, "hidden_dim": self.hidden_dim, "mask_ratio": self.mask_ratio,
        }

    @classmethod
    def from_dict(cls, d):
        keys = ("input_len", "patch_len", "stride", "channels", "hidden_dim", "mask_ratio")
        return cls(**{k: d[k] for k in keys if k in d})


@dataclass
class SignalRecord:
    samples: np.ndarray
    sample_rate_hz: float = 1.0
    label: Optional[int] = None
    source_kind: str = "iq"

    def __post_init__(self):
        self.samples = np.ascontiguousarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 2:
            raise DataError(f"samples must be [C, L], got shape {self.samples.shape}")
        if self.source_kind not in SOURCE_KINDS:
            raise DataError(f"unknown source_kind {self.source_kind!r}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("samples contain non-finite values")

    @property
    def length(self):
        return self.samples.shape[1]

    def replace_samples(self, samples):
        return SignalRecord(samples, self.sample_rate_hz, self.label, self.source_kind)


def instance_normalize(rec, eps=NORM_EPS):
    """Per-channel zero mean / unit population variance. Constant channels map to zeros."""
    if rec.length < 2:
        raise LengthError(f"instance_normalize needs >= 2 samples per channel, got {rec.length}")
    return rec.replace_samples(_k.instance_norm(rec.samples, eps))


def fit_length(rec, length, mode):
    if mode not in FIT_MODES:
        raise ConfigError(f"unknown fit mode {mode!r}")
    n = rec.length
    if n == length:
        return rec.replace_samples(rec.samples.copy())
    if mode == "pad_right_zero":
        if n > length:
            raise LengthError(f"cannot pad {n} samples down to {length}")
        out = np.zeros((rec.samples.shape[0], length), dtype=np.float32)
        out[:, :n] = rec.samples
        return rec.replace_samples(out)
    if n < 2:
        raise LengthError("upsampling needs at least 2 samples")
    return rec.replace_samples(_k.upsample_linear(rec.samples, length))


def default_fit_mode(rec):
    """CIR records are zero-padded; everything else is resampled."""
    return "pad_right_zero" if rec.source_kind == "cir" else "upsample_linear"


def patch_windows(signals, cfg):
    """Strided view of overlapping patches: [..., L] -> [..., N, P]. No copy."""
    if signals.shape[-1] != cfg.input_len:
        raise LengthError(f"signal length {signals.shape[-1]} != input_len {cfg.input_len}")
    win = sliding_window_view(signals, cfg.patch_len, axis=-1)
    return win[..., :: cfg.stride, :]


def patchify(rec, cfg):
    """[C, N, P] array of patches; patch ``n`` covers samples ``[n*S, n*S + P)``."""
    return np.ascontiguousarray(patch_windows(rec.samples, cfg))


def preprocess(rec, cfg, mode=None):
    rec = instance_normalize(rec)
    return fit_length(rec, cfg.input_len, mode or default_fit_mode(rec))


def prepare_signals(records, cfg, mode=None):
    """Normalize and length-fit a list of records into one [B, C, L] float32 array."""
    out = np.empty((len(records), cfg.channels, cfg.input_len), dtype=np.float32)
    for i, rec in enumerate(records):
        if rec.samples.shape[0] != cfg.channels:
            raise DataError(f"record {i} has {rec.samples.shape[0]} channels, expected {cfg.channels}")
        out[i] = preprocess(rec, cfg, mode).samples
    return out


def labels_of(records):
    labels = [r.label for r in records]
    if any(l is None for l in labels):
        raise DataError("dataset has unlabeled records")
    return np.asarray(labels, dtype=np.int64)


# ---------------------------------------------------------------------------
# file format


def manifest_path(path):
    p = Path(path)
    return p.with_name(p.stem + ".manifest.json") if p.suffix else p.with_name(p.name + ".manifest.json")


def save_dataset(records, path, classes=None, extra=None, channels=2):
    """Write records plus sidecar manifest. ``extra`` keys are merged into the manifest."""
    path = Path(path)
    if records:
        channels, length = records[0].samples.shape
        for i, r in enumerate(records):
            if r.samples.shape != (channels, length):
                raise DataError(f"record {i} shape {r.samples.shape} differs from {(channels, length)}")
    else:
        length = 0
    payload = np.empty((len(records), channels, length), dtype="<f4")
    for i, r in enumerate(records):
        payload[i] = r.samples
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, 0, channels, length, len(records)))
        fh.write(payload.tobytes())

    manifest = {"classes": list(classes) if classes is not None else []}
    labels = [r.label for r in records]
    if records and all(l is not None for l in labels):
        manifest["labels"] = [int(l) for l in labels]
    elif any(l is not None for l in labels):
        raise DataError("either all records are labeled or none are")
    manifest["sample_rate_hz"] = [float(r.sample_rate_hz) for r in records]
    manifest["source_kind"] = [r.source_kind for r in records]
    if extra:
        manifest.update(extra)
    with open(manifest_path(path), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
        fh.write("\n")


def read_header(path):
    """Return ``(channels, length, count)`` after validating the fixed header."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    return _parse_header(head, os.path.getsize(path))


def _parse_header(head, file_size):
    if len(head) < 4 or head[:4] != DATASET_MAGIC:
        raise FormatError(f"bad magic {head[:4]!r}, expected {DATASET_MAGIC!r}", offset=0)
    if len(head) < _HEADER.size:
        raise FormatError("truncated header", offset=len(head))
    _, version, dtype, channels, length, count = _HEADER.unpack(head)
    if version != DATASET_VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if dtype != 0:
        raise FormatError(f"unsupported dtype code {dtype}", offset=6)
    expected = _HEADER.size + 4 * channels * length * count
    if file_size < expected:
        raise FormatError(f"payload truncated: need {expected} bytes, file has {file_size}", offset=file_size)
    if file_size > expected:
        raise FormatError(f"{file_size - expected} trailing bytes after payload", offset=expected)
    return channels, length, count


def load_manifest(path):
    mp = manifest_path(path)
    if not mp.exists():
        return {}
    with open(mp, encoding="utf-8") as fh:
        return json.load(fh)


def load_dataset(path):
    path = Path(path)
    with open(path, "rb") as fh:
        raw = fh.read()
    channels, length, count = _parse_header(raw[: _HEADER.size], len(raw))
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(count, channels, length)
    manifest = load_manifest(path)
    labels = manifest.get("labels")
    rates = manifest.get("sample_rate_hz", [1.0] * count)
    kinds = manifest.get("source_kind", ["iq"] * count)
    for name, seq in (("labels", labels), ("sample_rate_hz", rates), ("source_kind", kinds)):
        if seq is not None and len(seq) != count:
            raise DataError(f"manifest {name} has {len(seq)} entries for {count} records")
    return [
        SignalRecord(
            data[i].astype(np.float32),
            sample_rate_hz=rates[i],
            label=None if labels is None else int(labels[i]),
            source_kind=kinds[i],
        )
        for i in range(count)
    ]
