"""Numba kernels vs the pure-numpy fallback.

Times each kernel on both implementations in-process, then one short
end-to-end experiment per path (the numpy path runs in a subprocess with
KVTIER_DISABLE_NUMBA=1, which is how users select it).

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from kvtier import _kernels

E2E = """
import time
from kvtier import USING_NUMBA
from kvtier.bench import ExperimentConfig, run_experiment
cfg = ExperimentConfig().replace(prefill_len=2048, decode_len=1024)
run_experiment(cfg.replace(decode_len=8))
t0 = time.perf_counter()
run_experiment(cfg)
print(USING_NUMBA, time.perf_counter() - t0)
"""


def best_of(fn, args, repeat):
    fn(*args)  # compile / warm
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    centers = rng.normal(size=(32, 64))
    pts = rng.normal(size=(4096, 64))
    offs = np.sort(rng.choice(1 << 24, 2000, replace=False)).astype(np.int64) * 64
    lens = np.full(2000, 4096, np.int64)
    return [
        ("nearest_row 32x64", "nearest_row", (pts[0], centers)),
        ("assign_rows 4096x64 / 32", "assign_rows", (pts, centers)),
        ("farthest_pair 512x64", "farthest_pair", (pts[:512],)),
        ("coalesce_extents 2000", "coalesce_extents", (offs, lens, 512 * 1024)),
    ]


def end_to_end(disable):
    env = dict(os.environ, KVTIER_DISABLE_NUMBA="1" if disable else "0")
    out = subprocess.run([sys.executable, "-c", E2E], env=env, check=True,
                         capture_output=True, text=True).stdout.split()
    return out[0], float(out[1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-e2e", action="store_true")
    args = ap.parse_args(argv)
    if _kernels.numba_impl is None:
        sys.exit("numba is not importable; nothing to compare")

    rng = np.random.default_rng(0)
    print(f"{'kernel':<28}{'numba us':>12}{'numpy us':>12}{'speedup':>10}")
    for label, name, a in cases(rng):
        nb = best_of(getattr(_kernels.numba_impl, name), a, args.repeat)
        npy = best_of(getattr(_kernels.numpy_impl, name), a, args.repeat)
        print(f"{label:<28}{nb * 1e6:>12.1f}{npy * 1e6:>12.1f}{npy / nb:>9.2f}x")

    if not args.skip_e2e:
        _, t_nb = end_to_end(False)
        flag, t_np = end_to_end(True)
        assert flag == "False"
        print(f"\nend-to-end 1024 decode steps: numba {t_nb:.2f}s, numpy {t_np:.2f}s, "
              f"speedup {t_np / t_nb:.2f}x")


if __name__ == "__main__":
    main()
