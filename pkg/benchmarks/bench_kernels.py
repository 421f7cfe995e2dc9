"""Time the numba kernels against their numpy fallbacks.

    python benchmarks/bench_kernels.py [--repeat N]

Both variants are called directly, so the ``ATYTTS_DISABLE_NUMBA`` switch
does not matter here.  The first numba call (compilation) is excluded.
"""
import argparse
import timeit

import numpy as np

from atytts import kernels
from atytts._accel import USE_NUMBA


def cases(rng):
    cost = rng.standard_normal((40, 400))
    f0 = 120 + 10 * rng.standard_normal(300)
    amps = np.abs(rng.standard_normal((300, 40)))
    frames = rng.standard_normal((400, 1024))
    window = np.hanning(1024)
    return {
        "maximum_path 40x400": (kernels._maximum_path_nb, kernels._maximum_path_np, (cost,)),
        "harmonic_stack 300 frames": (kernels._harmonic_stack_nb, kernels._harmonic_stack_np,
                                      (f0, amps, 256, 22050)),
        "overlap_add 400x1024": (kernels._overlap_add_nb, kernels._overlap_add_np, (frames, window, 256)),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    print(f"numba enabled for the library: {USE_NUMBA}")
    print(f"{'kernel':<28}{'numba ms':>10}{'numpy ms':>10}{'speedup':>9}  match")
    for name, (fast, slow, inputs) in cases(np.random.default_rng(0)).items():
        a, b = fast(*inputs), slow(*inputs)
        match = np.allclose(a, b, atol=1e-9)
        t_fast = min(timeit.repeat(lambda: fast(*inputs), number=1, repeat=args.repeat)) * 1e3
        t_slow = min(timeit.repeat(lambda: slow(*inputs), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<28}{t_fast:>10.2f}{t_slow:>10.2f}{t_slow / t_fast:>8.1f}x  {match}")


if __name__ == "__main__":
    main()
