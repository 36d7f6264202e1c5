"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--skip-run]

Each kernel is timed on both backends at training-sized shapes; the last
section times one full benchmark federation run per backend.
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit
from pathlib import Path

import numpy as np

from fedsim import kernels

ROOT = Path(__file__).resolve().parents[1]


def kernel_cases(rng):
    b, c = 32, 64
    x = rng.normal(size=(b, c))
    gamma, beta = rng.normal(size=c), rng.normal(size=c)
    rm, rv = rng.normal(size=c), rng.uniform(0.5, 2, size=c)
    dy = rng.normal(size=(b, c))
    _, xhat, _, _, inv_std = kernels.available_backends()["python"].bn_forward_train(x, gamma, beta, 1e-5)
    logits, labels = rng.normal(size=(b, 10)), rng.integers(0, 10, size=b)
    batch = rng.normal(size=(256, c))
    mus, sds = rng.normal(size=(20, 1000)), rng.uniform(0, 2, size=(20, 1000))
    return {
        "bn_forward_train 32x64": lambda k: k.bn_forward_train(x, gamma, beta, 1e-5),
        "bn_forward_eval 32x64": lambda k: k.bn_forward_eval(x, gamma, beta, rm, rv, 1e-5),
        "bn_backward 32x64": lambda k: k.bn_backward(dy, xhat, gamma, inv_std),
        "softmax_xent 32x10": lambda k: k.softmax_xent(logits, labels),
        "welford_update 256x64": lambda k: k.welford_update(0, np.zeros(c), np.zeros(c), batch),
        "pairwise_w2 20x1000": lambda k: k.pairwise_w2(mus, sds),
    }


def time_kernels(repeat: int):
    backends = kernels.available_backends()
    names = sorted(backends)
    print(f"{'kernel':<24}" + "".join(f"{n + ' us':>14}" for n in names) + f"{'speedup':>10}")
    for label, fn in kernel_cases(np.random.default_rng(0)).items():
        per_call = {}
        for name in names:
            impl = backends[name]
            timer = timeit.Timer(lambda: fn(impl))
            loops, _ = timer.autorange()
            per_call[name] = min(timer.repeat(repeat, loops)) / loops * 1e6
        speedup = per_call["python"] / per_call["cython"] if "cython" in per_call else float("nan")
        print(f"{label:<24}" + "".join(f"{per_call[n]:>14.2f}" for n in names) + f"{speedup:>9.2f}x")


def time_run(backend: str) -> float:
    # a fresh interpreter so FEDSIM_BACKEND takes effect at import
    code = ("import sys, time; from fedsim.harness import load_config, prepare, run_strategy; "
            "cfg = load_config(sys.argv[1]); prep = prepare(cfg); t = time.perf_counter(); "
            "run_strategy(prep, 'fedap', threads=0); print(time.perf_counter() - t)")
    env = dict(os.environ, FEDSIM_BACKEND=backend)
    out = subprocess.run([sys.executable, "-c", code, str(ROOT / "configs" / "benchmark.json")], env=env,
                         capture_output=True, text=True, check=True)
    return float(out.stdout)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--skip-run", action="store_true", help="only time the individual kernels")
    args = parser.parse_args(argv)

    print(f"default backend: {kernels.BACKEND}")
    time_kernels(args.repeat)
    if not args.skip_run:
        print()
        for backend in sorted(kernels.available_backends()):
            print(f"fedap benchmark run ({backend}): {time_run(backend):.2f}s")


if __name__ == "__main__":
    main()
