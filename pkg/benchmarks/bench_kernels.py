"""Time the compiled and pure-Python pixel kernels on CIFAR-sized images.

    python benchmarks/bench_kernels.py [--repeat 200] [--json out.json]

Also checks that both backends return identical arrays on the benchmark
inputs.
"""
import argparse
import json
import math
import timeit

import numpy as np

from dssl import kernels


def cases(rng):
    img = rng.random((3, 32, 32), dtype=np.float32)
    t = math.radians(17.0)
    c, s, ctr = math.cos(t), math.sin(t), 15.5
    rot = np.array([[c, -s, ctr - c * ctr + s * ctr],
                    [s, c, ctr - s * ctr - c * ctr]])
    taps = np.exp(-0.5 * (np.arange(-3, 4) / 1.2) ** 2)
    taps = taps / taps.sum()
    return {
        "warp_affine": lambda k: k.warp_affine(img, rot, 32, 32, 0.5, False),
        "separable_filter": lambda k: k.separable_filter(img, taps),
        "shift_hue": lambda k: k.shift_hue(img, 0.3),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=200)
    p.add_argument("--json")
    args = p.parse_args(argv)
    backends = {name: kernels.get_backend(name) for name in kernels.available_backends()}
    if "cython" not in backends:
        print("compiled kernels not built; timing the python fallback only")
    results = {}
    for op, fn in cases(np.random.default_rng(0)).items():
        row = {}
        for name, mod in backends.items():
            row[name] = min(timeit.repeat(lambda: fn(mod), number=args.repeat, repeat=3)) / args.repeat
        if len(backends) == 2:
            row["identical"] = bool(np.array_equal(fn(backends["cython"]), fn(backends["python"])))
            row["speedup"] = row["python"] / row["cython"]
        results[op] = row
    print(f"{'kernel':<18}" + "".join(f"{b + ' (us)':>14}" for b in backends)
          + ("    speedup  identical" if len(backends) == 2 else ""))
    for op, row in results.items():
        line = f"{op:<18}" + "".join(f"{1e6 * row[b]:>14.1f}" for b in backends)
        if "speedup" in row:
            line += f"{row['speedup']:>10.1f}x  {row['identical']}"
        print(line)
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
