"""Inference latency harness: untimed warm-up, then per-iteration timing of
normalize -> patchify -> encode -> classify on fresh seeded inputs.

The "full" scope times the whole pipeline (headline number); "model" times
encode + classify only. Both come from the same iterations.
"""
import hashlib
import json
import platform
import time
from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np

from .data import NORM_EPS, patch_windows
from .kernels import BACKEND
from .kernels import backend as _k
from .model import classify_forward, encode
from .numerics import Rng


@dataclass
class BenchReport:
    warmup_iters: int
    measured_iters: int
    batch: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    max_ms: float
    model_mean_ms: float
    model_p50_ms: float
    model_p95_ms: float
    model_max_ms: float
    forward_calls: int
    config_digest: str
    host: str
    kernel_backend: str
    warnings: List[str] = field(default_factory=list)

    @property
    def mean_ms_per_sample(self):
        return self.mean_ms / self.batch

    def summary(self):
        return (f"mean={self.mean_ms:.4f}ms p50={self.p50_ms:.4f}ms p95={self.p95_ms:.4f}ms "
                f"n={self.measured_iters} warmup={self.warmup_iters}")

    def to_json(self):
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def _stats(samples_ms):
    a = np.asarray(samples_ms, dtype=np.float64)
    return float(a.mean()), float(np.percentile(a, 50)), float(np.percentile(a, 95)), float(a.max())


def config_digest(params, cfg):
    h = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode())
    for name, arr in params.tensors().items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()[:16]


def host_description():
    return f"{platform.system()} {platform.machine()} {platform.processor() or 'cpu'} python {platform.python_version()}"


class InferencePipeline:
    """Batch-``b`` inference with a call counter."""

    def __init__(self, params, cfg):
        self.params = params
        self.cfg = cfg
        self.calls = 0

    def preprocess(self, raw):
        b, c, n = raw.shape
        normed = _k.instance_norm(raw.reshape(b * c, n), NORM_EPS).reshape(b, c, n)
        return patch_windows(normed, self.cfg)

    def model(self, patches):
        self.calls += 1
        logits, _ = classify_forward(encode(patches, self.params).z2, self.params, training=False)
        return logits

    def __call__(self, raw):
        return self.model(self.preprocess(raw))


def bench_inference(params, cfg, warmup=10, iters=5000, batch=1, seed=0):
    if iters < 1 or warmup < 0 or batch < 1:
        raise ValueError("need iters >= 1, warmup >= 0, batch >= 1")
    pipe = InferencePipeline(params, cfg)
    rng = Rng(seed, stream=0xBE7C)
    shape = (batch, cfg.channels, cfg.input_len)
    buf = np.empty(shape, dtype=np.float32)
    warnings = []
    res = time.get_clock_info("perf_counter").resolution
    if res > 1e-5:
        warnings.append(f"clock resolution {res:.3g}s is coarser than 10us")

    for _ in range(warmup):
        buf[...] = rng.gen.standard_normal(shape, dtype=np.float32)
        pipe(buf)

    full = np.empty(iters)
    model = np.empty(iters)
    clock = time.perf_counter
    for i in range(iters):
        buf[...] = rng.gen.standard_normal(shape, dtype=np.float32)
        t0 = clock()
        patches = pipe.preprocess(buf)
        t1 = clock()
        pipe.model(patches)
        t2 = clock()
        full[i] = (t2 - t0) * 1e3
        model[i] = (t2 - t1) * 1e3

    mean, p50, p95, mx = _stats(full)
    m_mean, m_p50, m_p95, m_max = _stats(model)
    return BenchReport(
        warmup_iters=warmup, measured_iters=iters, batch=batch,
        mean_ms=mean, p50_ms=p50, p95_ms=p95, max_ms=mx,
        model_mean_ms=m_mean, model_p50_ms=m_p50, model_p95_ms=m_p95, model_max_ms=m_max,
        forward_calls=pipe.calls, config_digest=config_digest(params, cfg),
        host=host_description(), kernel_backend=BACKEND, warnings=warnings,
    )
