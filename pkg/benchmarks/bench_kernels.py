"""Compare the compiled and pure-numpy kernel backends.

Run: python benchmarks/bench_kernels.py [--repeat 20]

Prints per-kernel median wall time for each backend at the shapes a default
training batch (B=64, C=2, N=125, D=64) produces, then one full
forward+backward pass of the self-supervised objective under each backend.
"""
import argparse
import importlib
import os
import time

import numpy as np


def timeit(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times)) * 1e3


def kernel_cases(rng):
    B, C, N, D, P, L = 64, 2, 125, 64, 128, 4096
    z = rng.standard_normal((B * C, N, D)).astype(np.float32)
    zc = rng.standard_normal((B * C, 2 * N, D)).astype(np.float32) * 0.3
    sim = np.ascontiguousarray(zc @ zc.transpose(0, 2, 1))
    h = rng.standard_normal((2, B, C, N, D)).astype(np.float32)
    sig = rng.standard_normal((B * C, L)).astype(np.float32)
    short = rng.standard_normal((B * C, 1024)).astype(np.float32)
    return {
        "relu": lambda k: k.relu(h),
        "relu_backward": lambda k: k.relu_backward(h, h),
        "maxpool_pairs": lambda k: k.maxpool_pairs(z),
        "global_maxpool": lambda k: k.global_maxpool(z),
        "contrastive_nll": lambda k: k.contrastive_nll(sim, N),
        "softmax_rows": lambda k: k.softmax_rows(sim.reshape(-1, 2 * N)),
        "instance_norm": lambda k: k.instance_norm(sig, 1e-5),
        "upsample_linear": lambda k: k.upsample_linear(short, L),
    }


def objective_time(backend_name, repeat):
    """Time one objective evaluation with every module re-imported under ``backend_name``."""
    os.environ["PIMLP_KERNELS"] = backend_name
    import pimlp

    for name in [m for m in list(importlib.sys.modules) if m.startswith("pimlp")]:
        del importlib.sys.modules[name]
    from pimlp.data import HyperConfig, patch_windows
    from pimlp.model import init_params
    from pimlp.numerics import Rng
    from pimlp.objective import draw_masks, ssl_forward_backward

    cfg = HyperConfig()
    rng = Rng(0)
    params = init_params(cfg, rng=rng)
    X = patch_windows(rng.gen.standard_normal((64, 2, 4096)).astype(np.float32), cfg)
    masks = draw_masks(64, cfg.num_patches, rng)
    return timeit(lambda: ssl_forward_backward(X, params, masks), max(3, repeat // 5))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()

    from pimlp import kernels

    backends = kernels.available_backends()
    if len(backends) < 2:
        print("compiled extension not built; only the python backend is available")
    cases = kernel_cases(np.random.default_rng(0))
    names = [b.name for b in backends]
    print(f"{'kernel':<18}" + "".join(f"{n + ' ms':>12}" for n in names) + f"{'speedup':>10}")
    for case, fn in cases.items():
        ms = [timeit(lambda b=b: fn(b), args.repeat) for b in backends]
        speed = f"{ms[-1] / ms[0]:.2f}x" if len(ms) == 2 else "-"
        print(f"{case:<18}" + "".join(f"{m:12.3f}" for m in ms) + f"{speed:>10}")

    full = [objective_time(n, args.repeat) for n in names]
    speed = f"{full[-1] / full[0]:.2f}x" if len(full) == 2 else "-"
    print(f"{'objective fwd+bwd':<18}" + "".join(f"{m:12.3f}" for m in full) + f"{speed:>10}")


if __name__ == "__main__":
    main()
