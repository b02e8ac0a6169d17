"""Compare the numba and numpy kernel backends.

Part one times each kernel pair in-process on fixed random inputs. Part two
runs a slice of the shipped desk suite end to end, once per backend, in a
subprocess with ``VERIBNB_NUMBA`` set accordingly.

    python benchmarks/bench_kernels.py [--repeats 200] [--props 10]
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from veribnb import _kernels as K

END_TO_END = """
import time
from veribnb import asset_path, _kernels
from veribnb.bab import BabConfig
from veribnb.bench import run_suite
from veribnb.network import load_network, load_properties
net = load_network(asset_path("desk_model.json"))
props = load_properties(asset_path("desk_props.json"))[:{n}]
run_suite(net, props[:1], BabConfig(timeout_s=5.0))  # warm-up / jit
t = time.perf_counter()
rows, _ = run_suite(net, props, BabConfig(timeout_s=5.0))
print(_kernels.BACKEND, time.perf_counter() - t, sum(r["n_subproblems"] for r in rows))
"""


def kernel_cases(rng):
    B, n, d = 64, 128, 128
    W, b = rng.normal(size=(n, d)), rng.normal(size=n)
    lo = rng.normal(size=(B, d))
    hi = lo + rng.uniform(0, 1, (B, d))
    lam = rng.normal(size=(B, n))
    up, ub, low = rng.uniform(0, 1, (B, n)), rng.normal(size=(B, n)), rng.uniform(0, 1, (B, n))
    sign, beta = rng.choice([-1.0, 0.0, 1.0], (B, n)), rng.uniform(0, 1, (B, n))
    kernel = rng.normal(size=(8, 3, 3, 3))
    return {
        "interval_affine": (W, b, lo, hi),
        "relax_backward": (lam, up, ub, low, sign, beta),
        "relax_backward_grad": (lam, lam, up, ub, low, sign),
        "box_linear_min": (lam, lo[:, :n], hi[:, :n]),
        "conv_to_dense": (kernel, 3, 16, 16, 1, 1),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=200)
    ap.add_argument("--props", type=int, default=10)
    args = ap.parse_args()
    if not K.HAS_NUMBA:
        sys.exit("numba is not installed; nothing to compare")

    print(f"{'kernel':<22}{'numpy us':>12}{'numba us':>12}{'speedup':>10}")
    for name, inputs in kernel_cases(np.random.default_rng(0)).items():
        f_np, f_nb = getattr(K, f"{name}_numpy"), getattr(K, f"{name}_numba")
        f_nb(*inputs)  # compile
        reps = max(args.repeats // 20, 1) if name == "conv_to_dense" else args.repeats
        t_np = min(timeit.repeat(lambda: f_np(*inputs), number=reps, repeat=3)) / reps * 1e6
        t_nb = min(timeit.repeat(lambda: f_nb(*inputs), number=reps, repeat=3)) / reps * 1e6
        print(f"{name:<22}{t_np:>12.1f}{t_nb:>12.1f}{t_np / t_nb:>10.2f}")

    print(f"\nend to end, first {args.props} desk properties")
    for flag in ("0", "1"):
        env = {**os.environ, "VERIBNB_NUMBA": flag}
        out = subprocess.run([sys.executable, "-c", END_TO_END.format(n=args.props)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"  {out[0]:<6} {float(out[1]):8.2f}s  subproblems {out[2]}")


if __name__ == "__main__":
    main()
