"""Seeded synthetic IQ / CIR generator for desk-scale experiments.

Waveform stand-ins: tone, bpsk and qpsk for modulation and short-range
recognition, chirp for long-range (LoRa-like), cir_decay for UWB channel
impulse responses, and noise.
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Sequence, Tuple

import numpy as np

from .data import SignalRecord, save_dataset
from .errors import ConfigError
from .numerics import Rng

KINDS = ("tone", "bpsk", "qpsk", "chirp", "cir_decay", "noise")
SAMPLE_RATE_HZ = 1.0e6
SPLITS = ("pretrain", "finetune", "test")


def _awgn(rng, shape, power):
    """Gaussian noise rescaled so its realised mean power equals ``power`` exactly."""
    n = rng.gen.standard_normal(shape)
    return n * np.sqrt(power / np.mean(n * n))


def gen_signal(kind, length, snr_db, rng):
    """One two-channel record of ``kind``. ``snr_db=inf`` disables noise."""
    if kind not in KINDS:
        raise ValueError(f"unknown signal kind {kind!r}; expected one of {KINDS}")
    if length < 16:
        raise ValueError(f"length must be >= 16, got {length}")
    g = rng.gen
    t = np.arange(length, dtype=np.float64)
    x = np.zeros((2, length))
    if kind == "tone":
        f = g.uniform(0.002, 0.05)
        x[0] = np.cos(2 * np.pi * f * t)
        x[1] = np.sin(2 * np.pi * f * t)
    elif kind in ("bpsk", "qpsk"):
        sps = int(g.integers(8, 33))
        n_sym = -(-length // sps)
        if kind == "bpsk":
            x[0] = np.repeat(g.choice([-1.0, 1.0], n_sym), sps)[:length]
        else:
            bits = g.choice([-1.0, 1.0], size=(2, n_sym)) / np.sqrt(2)
            x = np.repeat(bits, sps, axis=1)[:, :length]
    elif kind == "chirp":
        period = int(g.integers(256, 1025))
        bw = g.uniform(0.05, 0.4)
        tau = (t % period) / period
        # instantaneous frequency sweeps -bw/2 .. +bw/2 cycles/sample within each period
        phase = 2 * np.pi * period * (-bw / 2 * tau + bw / 2 * tau * tau)
        x[0] = np.cos(phase)
        x[1] = np.sin(phase)
    elif kind == "cir_decay":
        delay = int(g.integers(0, max(1, length // 8)))
        spacing = int(g.integers(2, 9))
        decay = g.uniform(0.02, 0.2) * length / 16
        taps = np.arange(delay, length, spacing)
        amps = g.uniform(0.5, 1.0, size=taps.shape) * np.exp(-(taps - delay) / decay)
        amps *= g.choice([-1.0, 1.0], size=taps.shape)
        amps[0] = abs(amps[0]) + 0.5
        x[0, taps] = amps
    else:  # noise
        x = _awgn(rng, (2, length), 1.0)

    if kind != "noise" and np.isfinite(snr_db):
        active = [0] if kind == "cir_decay" else [0, 1]
        p_sig = np.mean(x[active] ** 2)
        x[active] += _awgn(rng, (len(active), length), p_sig / 10 ** (snr_db / 10))
    source = "cir" if kind == "cir_decay" else "synthetic"
    return SignalRecord(x.astype(np.float32), sample_rate_hz=SAMPLE_RATE_HZ, source_kind=source)


@dataclass
class SynthSpec:
    kinds: Sequence[str] = ("tone", "bpsk", "qpsk", "chirp")
    pretrain_per_class: int = 500
    finetune_per_class: int = 200
    test_per_class: int = 200
    snr_db: float = 10.0
    length: int = 4096
    seed: int = 0
    excluded: Sequence[str] = ("chirp",)

    def __post_init__(self):
        self.kinds = tuple(self.kinds)
        self.excluded = tuple(self.excluded)
        for k in self.kinds + self.excluded:
            if k not in KINDS:
                raise ConfigError(f"unknown kind {k!r}")
        if len(self.kinds) < 2 or len(set(self.kinds)) != len(self.kinds):
            raise ConfigError("need at least 2 distinct kinds")
        if any(k not in self.kinds for k in self.excluded):
            raise ConfigError("excluded kinds must be a subset of kinds")
        if min(self.pretrain_per_class, self.finetune_per_class, self.test_per_class) < 0:
            raise ConfigError("per-class counts must be >= 0")
        if self.length < 16:
            raise ConfigError("length must be >= 16")

    @property
    def pretrain_kinds(self):
        return tuple(k for k in self.kinds if k not in self.excluded)

    def scenario(self):
        return {"excluded": list(self.excluded), "snr_db": self.snr_db, "seed": self.seed}


def gen_split(spec, split):
    """Records for one split. Each (split, kind, index) has its own RNG stream."""
    s = SPLITS.index(split)
    root = Rng(spec.seed, stream=s)
    if split == "pretrain":
        kinds, count, labeled = spec.pretrain_kinds, spec.pretrain_per_class, False
    else:
        kinds = spec.kinds
        count = spec.finetune_per_class if split == "finetune" else spec.test_per_class
        labeled = True
    records = []
    for kind in kinds:
        k = KINDS.index(kind)
        label = spec.kinds.index(kind) if labeled else None
        for i in range(count):
            rec = gen_signal(kind, spec.length, spec.snr_db, root.child(k, i))
            rec.label = label
            records.append(rec)
    return records, list(kinds) if not labeled else list(spec.kinds)


def gen_corpus(spec, out_dir) -> Dict[str, Path]:
    """Write ``pretrain.wfds``, ``finetune.wfds`` and ``test.wfds`` (plus manifests) to ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    paths = {}
    for split in SPLITS:
        records, classes = gen_split(spec, split)
        path = out / f"{split}.wfds"
        extra = {"scenario": spec.scenario(), "split": split}
        if split == "pretrain":
            extra["kinds"] = classes
        try:
            save_dataset(records, path, classes=classes, extra=extra)
        except OSError as exc:
            raise OSError(f"failed writing {path}: {exc}") from exc
        paths[split] = path
    return paths


def empirical_snr_db(clean, noisy):
    """SNR of ``noisy`` relative to ``clean`` over active channels."""
    noise = noisy - clean
    return 10 * np.log10(np.mean(clean ** 2) / np.mean(noise ** 2))
